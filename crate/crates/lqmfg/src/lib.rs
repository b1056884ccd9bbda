//! Numerical laboratory for partial-information linear-quadratic mean-field games.
//!
//! The crate is organised by task: [`model`] holds the problem data,
//! [`riccati`] synthesises the decentralized feedback, [`filtersim`] simulates
//! filters and populations, [`fbsde`] solves the Hamiltonian consistency system
//! by Picard iteration, and [`nashlab`] measures the epsilon-Nash rates.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fbsde;
pub mod filtersim;
mod linalg;
pub mod model;
pub mod nashlab;
pub mod noise;
pub mod riccati;

pub use error::{LqError, Result};
