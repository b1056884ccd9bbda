//! Picard iteration for mean-field FBSDEs with conditional-expectation coupling.
//!
//! The forward equation is driven by the pair `(W, W~)`; coefficients may read
//! the cross-path mean `E[X]` and the `F^W`-conditional expectations of
//! `(Y, Z, Z~)`. Conditional expectations are least-squares regressions on a
//! polynomial basis: the full filtration uses `(X, X^, W)` and `F^W` uses
//! `(X^, W)`, where `X^` is a proxy state integrated with `dW` only and with
//! every conditional input replaced by its `F^W` prediction. In the linear
//! quadratic case `X^` is the Kalman-type filter of the decentralized state.
//!
//! Each Picard sweep runs Euler-Maruyama forward over all paths, then a
//! least-squares Monte-Carlo recursion backward. The Brownian increments are
//! drawn once and reused by every sweep, so successive iterates are compared
//! on the same sample points.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LqError, Result};
use crate::filtersim::FeedbackLaw;
use crate::linalg::spd_inverse;
use crate::model::{project, CoefficientSet, ConstraintSet, TimeGrid};
use crate::noise::{Domain, IncrementStream};

/// Arguments of the coefficient maps. Each `e*` entry is the `F^W`-conditional
/// expectation of the preceding process; `ex` is the plain mean of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub x: DVector<f64>,
    pub ex: DVector<f64>,
    pub y: DVector<f64>,
    pub ey: DVector<f64>,
    pub z: DVector<f64>,
    pub ez: DVector<f64>,
    pub zt: DVector<f64>,
    pub ezt: DVector<f64>,
    /// Control already evaluated at this point by the solver, if the problem
    /// has a control map. Coefficient maps may use it instead of recomputing.
    pub u: Option<DVector<f64>>,
}

/// Coefficient map evaluated at grid node `k` (time `grid.t(k)`).
pub type CoefficientFn = Box<dyn Fn(usize, &Theta) -> DVector<f64> + Send + Sync>;
/// Terminal map `g(x, E[x])`.
pub type TerminalFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Optional control read-out returning `(candidate, control)` at a node.
pub type ControlFn = Box<dyn Fn(usize, &Theta) -> Result<(DVector<f64>, DVector<f64>)> + Send + Sync>;

/// Lipschitz and monotonicity constants of the coefficients, 1-based as
/// usually written: `rho[0]` is `rho_1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzMeta {
    pub rho: [f64; 9],
    pub mu: [f64; 7],
    pub w: [f64; 8],
    pub kappa: [f64; 8],
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Free constants `C_1..C_3` and `K_1..K_3` of the contraction estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionTuning {
    pub c: [f64; 3],
    pub k: [f64; 3],
}

impl Default for ContractionTuning {
    fn default() -> Self {
        Self {
            c: [1.0; 3],
            k: [1.0; 3],
        }
    }
}

pub struct MfFbsdeProblem {
    /// State dimension; `Y`, `Z`, `Z~` share it.
    pub n: usize,
    /// Control dimension reported by `control`, zero when absent.
    pub m: usize,
    pub grid: TimeGrid,
    pub x0: DVector<f64>,
    pub drift: CoefficientFn,
    pub sigma: CoefficientFn,
    pub sigma_tilde: CoefficientFn,
    pub driver: CoefficientFn,
    pub terminal: TerminalFn,
    pub control: Option<ControlFn>,
    pub lipschitz: Option<LipschitzMeta>,
}

impl std::fmt::Debug for MfFbsdeProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfFbsdeProblem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("grid", &self.grid)
            .field("x0", &self.x0)
            .field("control", &self.control.is_some())
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl MfFbsdeProblem {
    fn check(&self) -> Result<()> {
        if self.n == 0 || self.x0.len() != self.n {
            return Err(LqError::Structural(format!(
                "state dimension {} and initial value of length {} disagree",
                self.n,
                self.x0.len()
            )));
        }
        if self.control.is_none() && self.m != 0 {
            return Err(LqError::Structural(
                "control dimension given without a control map".into(),
            ));
        }
        Ok(())
    }
}

/// Per-node, per-path vectors stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathField {
    pub n_paths: usize,
    pub nodes: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PathField {
    pub fn zeros(n_paths: usize, nodes: usize, dim: usize) -> Self {
        Self {
            n_paths,
            nodes,
            dim,
            data: vec![0.0; n_paths * nodes * dim],
        }
    }

    pub fn get(&self, path: usize, node: usize) -> &[f64] {
        let o = (node * self.n_paths + path) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn vector(&self, path: usize, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.get(path, node))
    }

    fn node(&self, node: usize) -> &[f64] {
        let w = self.n_paths * self.dim;
        &self.data[node * w..(node + 1) * w]
    }

    fn node_mut(&mut self, node: usize) -> &mut [f64] {
        let w = self.n_paths * self.dim;
        &mut self.data[node * w..(node + 1) * w]
    }

    /// Node slice as an `n_paths x dim` matrix.
    fn node_matrix(&self, node: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_paths, self.dim, self.node(node))
    }

    fn set_node_matrix(&mut self, node: usize, m: &DMatrix<f64>) {
        let dim = self.dim;
        let dst = self.node_mut(node);
        for (p, row) in m.row_iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                dst[p * dim + i] = *v;
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn minus(&self, other: &Self) -> Self {
        Self {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            ..*self
        }
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.n_paths, self.nodes, self.dim)
    }

    /// `|self - reference| / |reference|` in `L^2(paths x nodes)`, skipping the last node.
    pub fn relative_l2(&self, reference: &Self) -> Result<f64> {
        if self.shape() != reference.shape() {
            return Err(LqError::Structural("path fields differ in shape".into()));
        }
        let cut = (self.nodes - 1) * self.n_paths * self.dim;
        let num: f64 = self.data[..cut]
            .iter()
            .zip(&reference.data[..cut])
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let den: f64 = reference.data[..cut].iter().map(|b| b * b).sum();
        Ok((num / den).sqrt())
    }
}

/// Squared discounted norm `E int_0^T e^{-lambda s} |u(s)|^2 ds`, trapezoid in
/// time and averaged over paths.
pub fn weighted_norm(u: &PathField, lambda: f64, dt: f64) -> f64 {
    if u.n_paths == 0 || u.nodes < 2 {
        return 0.0;
    }
    (0..u.nodes)
        .map(|k| {
            let w = if k == 0 || k + 1 == u.nodes { 0.5 * dt } else { dt };
            let ms = u.node(k).iter().map(|v| v * v).sum::<f64>() / u.n_paths as f64;
            w * (-lambda * k as f64 * dt).exp() * ms
        })
        .sum()
}

/// Pre-drawn increments, node-major: entry `k * n_paths + p` is the step from `k` to `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    pub n_paths: usize,
    pub steps: usize,
    pub dw: Vec<f64>,
    pub dw_tilde: Vec<f64>,
}

impl NoiseBank {
    /// One stream per path, in order.
    pub fn from_streams(streams: Vec<IncrementStream>, steps: usize) -> Self {
        let n_paths = streams.len();
        let mut dw = vec![0.0; n_paths * steps];
        let mut dw_tilde = vec![0.0; n_paths * steps];
        for (p, mut s) in streams.into_iter().enumerate() {
            for k in 0..steps {
                let (a, b) = s.next_pair();
                dw[k * n_paths + p] = a;
                dw_tilde[k * n_paths + p] = b;
            }
        }
        Self {
            n_paths,
            steps,
            dw,
            dw_tilde,
        }
    }

    pub fn generate(seed: u64, n_paths: usize, grid: &TimeGrid) -> Result<Self> {
        if n_paths == 0 || n_paths > u32::MAX as usize {
            return Err(LqError::Argument(format!("invalid path count {n_paths}")));
        }
        let streams = (0..n_paths)
            .map(|p| IncrementStream::new(seed, Domain::Fbsde, 0, p as u32, grid.dt()))
            .collect();
        Ok(Self::from_streams(streams, grid.steps()))
    }
}

/// Polynomial basis in standardized features, all monomials up to `degree`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    center: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<usize>>,
}

fn monomials(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; vars]];
    let mut frontier = vec![vec![0; vars]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &frontier {
            // Raise only variables at or after the last raised one to avoid duplicates.
            let start = e.iter().rposition(|&p| p > 0).unwrap_or(0);
            for v in start..vars {
                let mut f = e.clone();
                f[v] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl PolyBasis {
    fn fit(features: &DMatrix<f64>, degree: usize) -> Self {
        let (rows, cols) = features.shape();
        let mut center = Vec::with_capacity(cols);
        let mut scale = Vec::with_capacity(cols);
        for c in features.column_iter() {
            let mean = c.sum() / rows as f64;
            let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
            center.push(mean);
            // A constant feature becomes a zero column and is left to the ridge term.
            scale.push(if sd > 1e-300 { sd } else { 1.0 });
        }
        Self {
            center,
            scale,
            exponents: monomials(cols, degree),
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    fn row(&self, feat: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0)
                .map(|(j, &p)| ((feat[j] - self.center[j]) / self.scale[j]).powi(p as i32))
                .product();
        }
    }

    fn design(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(features.nrows(), self.len());
        let mut buf = vec![0.0; self.len()];
        let mut feat = vec![0.0; features.ncols()];
        for r in 0..features.nrows() {
            for (c, f) in feat.iter_mut().enumerate() {
                *f = features[(r, c)];
            }
            self.row(&feat, &mut buf);
            for (c, v) in buf.iter().enumerate() {
                d[(r, c)] = *v;
            }
        }
        d
    }
}

/// Fitted conditional-expectation map with one column of coefficients per output.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub basis: PolyBasis,
    pub coefficients: DMatrix<f64>,
    pub r_squared: Vec<f64>,
}

impl RegressionModel {
    pub fn outputs(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn predict(&self, features: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.outputs());
        self.predict_into(features, &mut vec![0.0; self.basis.len()], out.as_mut_slice());
        out
    }

    /// Allocation-free prediction; `row` must hold one entry per basis function.
    pub fn predict_into(&self, features: &[f64], row: &mut [f64], out: &mut [f64]) {
        self.basis.row(features, row);
        for (j, o) in out.iter_mut().enumerate() {
            *o = self
                .coefficients
                .column(j)
                .iter()
                .zip(row.iter())
                .map(|(c, r)| c * r)
                .sum();
        }
    }
}

/// Ridge-regularized normal equations for one feature set, reusable across targets.
struct LeastSquares {
    basis: PolyBasis,
    design: DMatrix<f64>,
    gram: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Refinement sweeps of iterated Tikhonov; each one shrinks the ridge bias by
/// a factor `ridge / (eigenvalue + ridge)`.
const RIDGE_REFINEMENTS: usize = 2;

impl LeastSquares {
    fn new(features: &DMatrix<f64>, degree: usize, ridge: f64) -> Result<Self> {
        let rows = features.nrows();
        if !features.iter().all(|v| v.is_finite()) {
            return Err(LqError::Regression("non-finite regression features".into()));
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(LqError::Argument(format!(
                "ridge must be finite and nonnegative, got {ridge}"
            )));
        }
        let basis = PolyBasis::fit(features, degree);
        if rows < 10 * basis.len() {
            return Err(LqError::Regression(format!(
                "{rows} samples for {} basis functions; need at least ten per function",
                basis.len()
            )));
        }
        let design = basis.design(features);
        let gram = design.tr_mul(&design) / rows as f64;
        let mut reg = gram.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += ridge;
        }
        let chol = reg
            .cholesky()
            .ok_or_else(|| LqError::Regression("normal equations are not positive definite".into()))?;
        Ok(Self {
            basis,
            design,
            gram,
            chol,
        })
    }

    fn coefficients(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if values.nrows() != self.design.nrows() {
            return Err(LqError::Structural(
                "regression targets and features differ in length".into(),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(LqError::Regression("non-finite regression targets".into()));
        }
        let rhs = self.design.tr_mul(values) / values.nrows() as f64;
        let mut beta = self.chol.solve(&rhs);
        for _ in 0..RIDGE_REFINEMENTS {
            let resid = &rhs - &self.gram * &beta;
            beta += self.chol.solve(&resid);
        }
        Ok(beta)
    }

    fn model(&self, values: &DMatrix<f64>) -> Result<(RegressionModel, DMatrix<f64>)> {
        let coefficients = self.coefficients(values)?;
        let fitted = &self.design * &coefficients;
        let r_squared = (0..values.ncols())
            .map(|j| {
                let col = values.column(j);
                let mean = col.mean();
                let tot: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
                let res: f64 = col
                    .iter()
                    .zip(fitted.column(j).iter())
                    .map(|(v, f)| (v - f).powi(2))
                    .sum();
                if tot > 0.0 {
                    1.0 - res / tot
                } else {
                    1.0
                }
            })
            .collect();
        Ok((
            RegressionModel {
                basis: self.basis.clone(),
                coefficients,
                r_squared,
            },
            fitted,
        ))
    }
}

/// Least-squares fit of `values` (one row per path) on the degree-`degree`
/// polynomials in `features`.
pub fn regress_conditional(
    values: &DMatrix<f64>,
    features: &DMatrix<f64>,
    degree: usize,
    ridge: f64,
) -> Result<RegressionModel> {
    LeastSquares::new(features, degree, ridge)?
        .model(values)
        .map(|(m, _)| m)
}

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// One row of the Picard log. Differences are discounted norms of the change
/// between successive iterates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub diff_y: f64,
    pub diff_z: f64,
    pub diff_z_tilde: f64,
    pub total: f64,
    /// `total / previous total`; absent on the first sweep.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    Converged,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionDiagnostics {
    pub lambda: f64,
    pub lambda_bar1: Option<f64>,
    pub lambda_bar2: Option<f64>,
    pub tuning: ContractionTuning,
    /// Last ratio of successive difference norms, zero before the second sweep.
    pub observed_ratio: f64,
    /// Square root of the a-priori contraction factor, when constants are known
    /// and the bound is defined.
    pub theorem_ratio_bound: Option<f64>,
    pub history: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl ContractionDiagnostics {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }

    /// Whether every ratio from sweep `from` on is below one.
    pub fn contracting_from(&self, from: usize) -> bool {
        self.history
            .iter()
            .filter(|r| r.iter >= from)
            .all(|r| r.ratio.is_some_and(|q| q < 1.0))
    }
}

/// `(1 - e^{-a T}) / a`, continuous at `a = 0`.
fn decay_integral(a: f64, t: f64) -> f64 {
    if (a * t).abs() < 1e-12 {
        t
    } else {
        -(-a * t).exp_m1() / a
    }
}

/// Exponents of the two a-priori estimates and the resulting contraction bound.
pub fn contraction_constants(
    meta: &LipschitzMeta,
    tuning: &ContractionTuning,
    lambda: f64,
    horizon: f64,
) -> (f64, f64, Option<f64>) {
    let r = |i: usize| meta.rho[i - 1];
    let mu = |i: usize| meta.mu[i - 1];
    let w = |i: usize| meta.w[i - 1];
    let ka = |i: usize| meta.kappa[i - 1];
    let [c1, c2, c3] = tuning.c;
    let [k1, k2, k3] = tuning.k;
    let lb1 = lambda
        - 2.0 * meta.lambda1
        - (r(2) + r(3)) / c1
        - (r(4) + r(5)) / c2
        - (r(6) + r(7)) / c3
        - 2.0 * r(1)
        - w(1).powi(2)
        - w(2).powi(2)
        - ka(1).powi(2)
        - ka(2).powi(2);
    let lb2 =
        -lambda - 2.0 * meta.lambda2 - (mu(1) + mu(2)) / k1 - (mu(4) + mu(5)) / k2 - (mu(6) + mu(7)) / k3 - 2.0 * mu(3);
    let slack = (1.0 - (mu(4) + mu(5)) * k2).min(1.0 - (mu(6) + mu(7)) * k3);
    let bound = (slack > 0.0).then(|| {
        let t = horizon;
        let e2 = (-lb2 * t).exp();
        let e1 = (-lb1 * t).exp();
        let backward = decay_integral(lb2, t) + e2.max(1.0) / (slack * e2.min(1.0));
        let terminal = (r(8).powi(2) + r(9).powi(2)) * e1.max(1.0) + (mu(1) + mu(2)) * k1 * decay_integral(lb1, t);
        let coupling = [
            (r(2) + r(3)) * c1 + w(3).powi(2) + w(4).powi(2) + ka(3).powi(2) + ka(4).powi(2),
            (r(4) + r(5)) * c2 + w(5).powi(2) + w(6).powi(2) + ka(5).powi(2) + ka(6).powi(2),
            (r(6) + r(7)) * c3 + w(7).powi(2) + w(8).powi(2) + ka(7).powi(2) + ka(8).powi(2),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        (backward * terminal * coupling).sqrt()
    });
    (lb1, lb2, bound.filter(|b| b.is_finite()))
}

/// Solver knobs for [`picard_solve`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub degree: usize,
    pub ridge: f64,
    pub tuning: ContractionTuning,
}

impl PicardConfig {
    pub fn new(tol: f64, max_iter: usize, n_paths: usize, seed: u64) -> Self {
        Self {
            lambda: 0.0,
            tol,
            max_iter,
            n_paths,
            seed,
            degree: 2,
            ridge: DEFAULT_RIDGE,
            tuning: ContractionTuning::default(),
        }
    }
}

/// Path ensembles of one Picard iterate.
#[derive(Debug, Clone)]
pub struct FbsdeState {
    pub x: PathField,
    /// `F^W` proxy state.
    pub x_hat: PathField,
    /// Running Brownian motion `W`.
    pub w: PathField,
    pub y: PathField,
    pub z: PathField,
    pub z_tilde: PathField,
    /// Cross-path mean of `x` per node.
    pub mean_x: Vec<DVector<f64>>,
    pub candidates: Option<PathField>,
    pub controls: Option<PathField>,
    /// Per node, `F^W` model of `(Y, Z, Z~)` stacked in that order.
    pub models: Vec<Option<RegressionModel>>,
    pub lambda_weight: f64,
    pub history: Vec<IterationRecord>,
    degree: usize,
    ridge: f64,
}

impl FbsdeState {
    /// Zero iterate on the given problem and path count.
    pub fn initial(problem: &MfFbsdeProblem, n_paths: usize, lambda: f64, degree: usize, ridge: f64) -> Self {
        let nodes = problem.grid.nodes();
        let n = problem.n;
        let field = |dim| PathField::zeros(n_paths, nodes, dim);
        let with_control = problem.control.is_some();
        Self {
            x: field(n),
            x_hat: field(n),
            w: field(1),
            y: field(n),
            z: field(n),
            z_tilde: field(n),
            mean_x: vec![DVector::zeros(n); nodes],
            candidates: with_control.then(|| field(problem.m)),
            controls: with_control.then(|| field(problem.m)),
            models: vec![None; nodes],
            lambda_weight: lambda,
            history: Vec::new(),
            degree,
            ridge,
        }
    }

    pub fn n_paths(&self) -> usize {
        self.x.n_paths
    }

    fn conditional(&self, k: usize, feat: &[f64], n: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        match &self.models[k] {
            None => (DVector::zeros(n), DVector::zeros(n), DVector::zeros(n)),
            Some(m) => {
                let mut row = [0.0; 64];
                let mut out = [0.0; 48];
                if m.basis.len() <= row.len() && 3 * n <= out.len() {
                    m.predict_into(feat, &mut row[..m.basis.len()], &mut out[..3 * n]);
                    let part = |i: usize| DVector::from_column_slice(&out[i * n..(i + 1) * n]);
                    (part(0), part(1), part(2))
                } else {
                    let v = m.predict(feat);
                    (v.rows(0, n).into(), v.rows(n, n).into(), v.rows(2 * n, n).into())
                }
            }
        }
    }

    fn fw_features(&self, k: usize, p: usize) -> Vec<f64> {
        let mut f = self.x_hat.get(p, k).to_vec();
        f.push(self.w.get(p, k)[0]);
        f
    }
}

fn non_finite(what: &str, step: usize) -> LqError {
    LqError::Divergence {
        what: what.into(),
        step,
    }
}

fn check_vec(v: DVector<f64>, n: usize, what: &str, k: usize) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(LqError::Structural(format!(
            "{what} returned length {} instead of {n}",
            v.len()
        )));
    }
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(non_finite(what, k))
    }
}

fn check_bank(problem: &MfFbsdeProblem, state: &FbsdeState, noise: &NoiseBank) -> Result<()> {
    problem.check()?;
    if noise.n_paths != state.n_paths() || noise.steps != problem.grid.steps() {
        return Err(LqError::Structural("noise bank does not match paths and grid".into()));
    }
    if state.x.nodes != problem.grid.nodes() || state.x.dim != problem.n {
        return Err(LqError::Structural("state ensemble does not match the problem".into()));
    }
    Ok(())
}

type StepOut = (DVector<f64>, DVector<f64>, Option<(DVector<f64>, DVector<f64>)>);

/// Euler-Maruyama pass of `X` and its proxy under the current `(Y, Z, Z~)`
/// paths and `F^W` models. Overwrites `x`, `x_hat`, `w`, `mean_x` and the
/// recorded controls.
pub fn solve_forward(problem: &MfFbsdeProblem, state: &mut FbsdeState, noise: &NoiseBank) -> Result<()> {
    check_bank(problem, state, noise)?;
    let (n, m, mp) = (problem.n, problem.m, state.n_paths());
    let grid = &problem.grid;
    let (nodes, dt) = (grid.nodes(), grid.dt());
    for p in 0..mp {
        state.x.node_mut(0)[p * n..(p + 1) * n].copy_from_slice(problem.x0.as_slice());
        state.x_hat.node_mut(0)[p * n..(p + 1) * n].copy_from_slice(problem.x0.as_slice());
    }
    state.w.node_mut(0).fill(0.0);
    for k in 0..nodes {
        let ex = mean_rows(state.x.node(k), mp, n);
        state.mean_x[k] = ex.clone();
        let last = k + 1 == nodes;
        let st: &FbsdeState = state;
        let out: Vec<StepOut> = (0..mp)
            .into_par_iter()
            .map(|p| -> Result<StepOut> {
                let feat = st.fw_features(k, p);
                let (ey, ez, ezt) = st.conditional(k, &feat, n);
                let theta = Theta {
                    x: st.x.vector(p, k),
                    ex: ex.clone(),
                    y: st.y.vector(p, k),
                    ey: ey.clone(),
                    z: st.z.vector(p, k),
                    ez: ez.clone(),
                    zt: st.z_tilde.vector(p, k),
                    ezt: ezt.clone(),
                    u: None,
                };
                let ctrl = match &problem.control {
                    Some(c) => {
                        let (v, u) = c(k, &theta)?;
                        Some((check_vec(v, m, "control candidate", k)?, check_vec(u, m, "control", k)?))
                    }
                    None => None,
                };
                if last {
                    return Ok((theta.x, st.x_hat.vector(p, k), ctrl));
                }
                let mut theta = theta;
                theta.u = ctrl.as_ref().map(|(_, u)| u.clone());
                let mut hat = Theta {
                    x: st.x_hat.vector(p, k),
                    ex: ex.clone(),
                    y: ey.clone(),
                    ey,
                    z: ez.clone(),
                    ez,
                    zt: ezt.clone(),
                    ezt,
                    u: None,
                };
                if let Some(c) = &problem.control {
                    hat.u = Some(check_vec(c(k, &hat)?.1, m, "control", k)?);
                }
                let (dw, dwt) = (noise.dw[k * mp + p], noise.dw_tilde[k * mp + p]);
                let b = check_vec((problem.drift)(k, &theta), n, "drift", k)?;
                let s = check_vec((problem.sigma)(k, &theta), n, "diffusion", k)?;
                let st_ = check_vec((problem.sigma_tilde)(k, &theta), n, "diffusion", k)?;
                let x_next = &theta.x + b * dt + s * dw + st_ * dwt;
                let bh = check_vec((problem.drift)(k, &hat), n, "drift", k)?;
                let sh = check_vec((problem.sigma)(k, &hat), n, "diffusion", k)?;
                let xh_next = &hat.x + bh * dt + sh * dw;
                Ok((x_next, xh_next, ctrl))
            })
            .collect::<Result<_>>()?;
        if let (Some(cand), Some(ctrl)) = (state.candidates.as_mut(), state.controls.as_mut()) {
            let (cs, us) = (cand.node_mut(k), ctrl.node_mut(k));
            for (p, (_, _, c)) in out.iter().enumerate() {
                if let Some((v, u)) = c {
                    cs[p * m..(p + 1) * m].copy_from_slice(v.as_slice());
                    us[p * m..(p + 1) * m].copy_from_slice(u.as_slice());
                }
            }
        }
        if last {
            break;
        }
        let xs = state.x.node_mut(k + 1);
        for (p, (x, _, _)) in out.iter().enumerate() {
            xs[p * n..(p + 1) * n].copy_from_slice(x.as_slice());
        }
        let xh = state.x_hat.node_mut(k + 1);
        for (p, (_, h, _)) in out.iter().enumerate() {
            xh[p * n..(p + 1) * n].copy_from_slice(h.as_slice());
        }
        for p in 0..mp {
            let w = state.w.get(p, k)[0] + noise.dw[k * mp + p];
            state.w.node_mut(k + 1)[p] = w;
        }
        if !xs_finite(&state.x, k + 1) || !xs_finite(&state.x_hat, k + 1) {
            return Err(non_finite("forward state", k + 1));
        }
    }
    Ok(())
}

fn xs_finite(f: &PathField, k: usize) -> bool {
    f.node(k).iter().all(|v| v.is_finite())
}

/// Column means of a row-major `rows x dim` slice, summed in row order.
fn mean_rows(data: &[f64], rows: usize, dim: usize) -> DVector<f64> {
    let mut acc = DVector::zeros(dim);
    for r in 0..rows {
        for i in 0..dim {
            acc[i] += data[r * dim + i];
        }
    }
    acc / rows as f64
}

fn features(state: &FbsdeState, k: usize, full: bool) -> DMatrix<f64> {
    let (mp, n) = (state.n_paths(), state.x.dim);
    let cols = if full { 2 * n + 1 } else { n + 1 };
    DMatrix::from_fn(mp, cols, |p, c| {
        if full {
            if c < n {
                state.x.get(p, k)[c]
            } else if c < 2 * n {
                state.x_hat.get(p, k)[c - n]
            } else {
                state.w.get(p, k)[0]
            }
        } else if c < n {
            state.x_hat.get(p, k)[c]
        } else {
            state.w.get(p, k)[0]
        }
    })
}

fn hstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = parts[0].nrows();
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c0 = 0;
    for p in parts {
        out.view_mut((0, c0), (rows, p.ncols())).copy_from(*p);
        c0 += p.ncols();
    }
    out
}

/// Backward least-squares Monte-Carlo recursion for `(Y, Z, Z~)` on the
/// current forward paths. Refreshes the per-node `F^W` models.
pub fn solve_backward(problem: &MfFbsdeProblem, state: &mut FbsdeState, noise: &NoiseBank) -> Result<()> {
    check_bank(problem, state, noise)?;
    let (n, mp) = (problem.n, state.n_paths());
    let grid = &problem.grid;
    let (nodes, dt) = (grid.nodes(), grid.dt());
    let last = nodes - 1;
    let ex_t = state.mean_x[last].clone();
    let terminal = (0..mp)
        .into_par_iter()
        .map(|p| {
            check_vec(
                (problem.terminal)(&state.x.vector(p, last), &ex_t),
                n,
                "terminal map",
                last,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut y_next = DMatrix::from_fn(mp, n, |p, i| terminal[p][i]);
    state.y.set_node_matrix(last, &y_next);

    for k in (0..last).rev() {
        let full = LeastSquares::new(&features(state, k, true), state.degree, state.ridge)?;
        let fw = LeastSquares::new(&features(state, k, false), state.degree, state.ridge)?;
        let (_, y0) = full.model(&y_next)?;
        // The centred target drops the part of Y_{k+1} known at t_k, which
        // has zero covariation with the increment but inflates the variance.
        let mut zt = DMatrix::zeros(mp, 2 * n);
        for p in 0..mp {
            let (dw, dwt) = (noise.dw[k * mp + p], noise.dw_tilde[k * mp + p]);
            for i in 0..n {
                let c = y_next[(p, i)] - y0[(p, i)];
                zt[(p, i)] = c * dw / dt;
                zt[(p, n + i)] = c * dwt / dt;
            }
        }
        let (_, zfit) = full.model(&zt)?;
        let (_, cond) = fw.model(&hstack(&[&y0, &zfit]))?;
        let ex = &state.mean_x[k];
        let st: &FbsdeState = state;
        let drivers = (0..mp)
            .into_par_iter()
            .map(|p| {
                let row = |m: &DMatrix<f64>, off: usize| DVector::from_fn(n, |i, _| m[(p, off + i)]);
                let theta = Theta {
                    x: st.x.vector(p, k),
                    ex: ex.clone(),
                    y: row(&y0, 0),
                    ey: row(&cond, 0),
                    z: row(&zfit, 0),
                    ez: row(&cond, n),
                    zt: row(&zfit, n),
                    ezt: row(&cond, 2 * n),
                    u: None,
                };
                check_vec((problem.driver)(k, &theta), n, "driver", k)
            })
            .collect::<Result<Vec<_>>>()?;
        let target = DMatrix::from_fn(mp, n, |p, i| y_next[(p, i)] + drivers[p][i] * dt);
        let (_, yk) = full.model(&target)?;
        let z = zfit.columns(0, n).into_owned();
        let ztil = zfit.columns(n, n).into_owned();
        let (model, _) = fw.model(&hstack(&[&yk, &z, &ztil]))?;
        state.models[k] = Some(model);
        state.y.set_node_matrix(k, &yk);
        state.z.set_node_matrix(k, &z);
        state.z_tilde.set_node_matrix(k, &ztil);
        if k + 1 == last {
            state.z.set_node_matrix(last, &z);
            state.z_tilde.set_node_matrix(last, &ztil);
        }
        y_next = yk;
    }
    let fw = LeastSquares::new(&features(state, last, false), state.degree, state.ridge)?;
    let stacked = hstack(&[
        &y_next_at(state, last),
        &state.z.node_matrix(last),
        &state.z_tilde.node_matrix(last),
    ]);
    state.models[last] = Some(fw.model(&stacked)?.0);
    Ok(())
}

fn y_next_at(state: &FbsdeState, k: usize) -> DMatrix<f64> {
    state.y.node_matrix(k)
}

/// Runs Picard sweeps from the zero iterate and reports how they ended
/// without treating a failure to converge as an error.
pub fn picard_run(problem: &MfFbsdeProblem, cfg: &PicardConfig) -> Result<(FbsdeState, ContractionDiagnostics)> {
    problem.check()?;
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 || !cfg.lambda.is_finite() {
        return Err(LqError::Argument(
            "need tol > 0, max_iter >= 1 and finite lambda".into(),
        ));
    }
    let noise = NoiseBank::generate(cfg.seed, cfg.n_paths, &problem.grid)?;
    let mut state = FbsdeState::initial(problem, cfg.n_paths, cfg.lambda, cfg.degree, cfg.ridge);
    let dt = problem.grid.dt();
    let mut stop = StopReason::MaxIterations;
    for it in 1..=cfg.max_iter {
        let prev = (state.y.clone(), state.z.clone(), state.z_tilde.clone());
        let sweep =
            solve_forward(problem, &mut state, &noise).and_then(|_| solve_backward(problem, &mut state, &noise));
        match sweep {
            Ok(()) => {}
            Err(LqError::Divergence { .. }) => {
                stop = StopReason::NonFinite;
                break;
            }
            Err(e) => return Err(e),
        }
        if !(state.y.is_finite() && state.z.is_finite() && state.z_tilde.is_finite()) {
            stop = StopReason::NonFinite;
            break;
        }
        let dy = weighted_norm(&state.y.minus(&prev.0), cfg.lambda, dt).sqrt();
        let dz = weighted_norm(&state.z.minus(&prev.1), cfg.lambda, dt).sqrt();
        let dzt = weighted_norm(&state.z_tilde.minus(&prev.2), cfg.lambda, dt).sqrt();
        let total = (dy * dy + dz * dz + dzt * dzt).sqrt();
        let ratio = state
            .history
            .last()
            .map(|r| if r.total > 0.0 { total / r.total } else { 0.0 });
        state.history.push(IterationRecord {
            iter: it,
            diff_y: dy,
            diff_z: dz,
            diff_z_tilde: dzt,
            total,
            ratio,
        });
        if !total.is_finite() {
            stop = StopReason::NonFinite;
            break;
        }
        if total < cfg.tol {
            stop = StopReason::Converged;
            break;
        }
    }
    let (lambda_bar1, lambda_bar2, theorem_ratio_bound) = match &problem.lipschitz {
        Some(meta) => {
            let (a, b, c) = contraction_constants(meta, &cfg.tuning, cfg.lambda, problem.grid.horizon());
            (Some(a), Some(b), c)
        }
        None => (None, None, None),
    };
    let diag = ContractionDiagnostics {
        lambda: cfg.lambda,
        lambda_bar1,
        lambda_bar2,
        tuning: cfg.tuning,
        observed_ratio: state.history.last().and_then(|r| r.ratio).unwrap_or(0.0),
        theorem_ratio_bound,
        history: state.history.clone(),
        stop,
    };
    Ok((state, diag))
}

/// Picard iteration to tolerance; failure to converge is an error carrying
/// the successive difference norms.
pub fn picard_solve(problem: &MfFbsdeProblem, cfg: &PicardConfig) -> Result<(FbsdeState, ContractionDiagnostics)> {
    let (state, diag) = picard_run(problem, cfg)?;
    match diag.stop {
        StopReason::Converged => Ok((state, diag)),
        StopReason::MaxIterations => Err(LqError::NonConvergence {
            iterations: diag.iterations(),
            last_diff: diag.history.last().map_or(f64::NAN, |r| r.total),
            history: diag.history.iter().map(|r| r.total).collect(),
        }),
        StopReason::NonFinite => Err(non_finite("Picard iterate", diag.iterations())),
    }
}

/// The feedback law evaluated on the solver's `F^W` proxy paths, laid out like
/// [`FbsdeState::controls`] for a direct comparison.
pub fn feedback_on_proxy(state: &FbsdeState, law: &FeedbackLaw) -> Result<PathField> {
    let nodes = state.x_hat.nodes;
    if law.nodes() != nodes {
        return Err(LqError::Structural("feedback law and solver grid disagree".into()));
    }
    let np = state.n_paths();
    let m = law.k.first().map_or(0, |k| k.nrows());
    let mut out = PathField::zeros(np, nodes, m);
    for node in 0..nodes {
        for path in 0..np {
            let u = law.control(node, &state.x_hat.vector(path, node))?;
            let o = (node * np + path) * m;
            out.data[o..o + m].copy_from_slice(u.as_slice());
        }
    }
    Ok(out)
}

/// The Hamiltonian consistency system: forward state `z`, adjoint `p` with
/// martingale parts `k`, `k~`, and control
/// `u = P_Gamma[R^{-1}(B' E[p|G] + D' E[k|G] + D~' E[k~|G])]`.
pub fn assemble_cc_system(coeffs: &CoefficientSet, grid: &TimeGrid, gamma: ConstraintSet) -> Result<MfFbsdeProblem> {
    coeffs.check_shapes(grid)?;
    let (n, m) = (coeffs.n(), coeffs.m());
    if let ConstraintSet::Box { lower, .. } = &gamma {
        if lower.len() != m {
            return Err(LqError::Argument(format!(
                "box has dimension {}, control has {m}",
                lower.len()
            )));
        }
    }
    let r_inv = (0..grid.nodes())
        .map(|k| {
            spd_inverse(&coeffs.r[k]).ok_or(LqError::Singular {
                what: "R".into(),
                node: k,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let c = Arc::new(coeffs.clone());
    let gamma = Arc::new(gamma);

    // Gains R^{-1}B', R^{-1}D', R^{-1}D~' per node.
    let gains: Vec<[DMatrix<f64>; 3]> = (0..grid.nodes())
        .map(|k| {
            [
                &r_inv[k] * coeffs.b[k].transpose(),
                &r_inv[k] * coeffs.d[k].transpose(),
                &r_inv[k] * coeffs.d_tilde[k].transpose(),
            ]
        })
        .collect();
    let control = {
        let (c, gamma) = (c.clone(), gamma.clone());
        move |k: usize, th: &Theta| -> Result<(DVector<f64>, DVector<f64>)> {
            let [gy, gz, gzt] = &gains[k];
            let v = gy * &th.ey + gz * &th.ez + gzt * &th.ezt;
            let u = match *gamma {
                ConstraintSet::FullSpace => v.clone(),
                _ => project(&gamma, &c.r[k], &v)?,
            };
            Ok((v, u))
        }
    };
    let control = Arc::new(control);
    // The coefficient maps are total; a projection failure would mean a
    // malformed weight, which the constructor already excluded.
    let u_of = {
        let control = control.clone();
        move |k: usize, th: &Theta| match &th.u {
            Some(u) => u.clone(),
            None => control(k, th)
                .map(|(_, u)| u)
                .unwrap_or_else(|_| DVector::from_element(m, f64::NAN)),
        }
    };
    let u_of = Arc::new(u_of);

    let drift = {
        let (c, u_of) = (c.clone(), u_of.clone());
        move |k: usize, th: &Theta| &c.a[k] * &th.x + &c.b[k] * u_of(k, th) + &c.f[k] * &th.ex + &c.b_vec[k]
    };
    let sigma = {
        let (c, u_of) = (c.clone(), u_of.clone());
        move |k: usize, th: &Theta| &c.c[k] * &th.x + &c.d[k] * u_of(k, th) + &c.h[k] * &th.ex + &c.sigma[k]
    };
    let sigma_tilde = {
        let (c, u_of) = (c.clone(), u_of.clone());
        move |k: usize, th: &Theta| {
            &c.c_tilde[k] * &th.x + &c.d_tilde[k] * u_of(k, th) + &c.h_tilde[k] * &th.ex + &c.sigma_tilde[k]
        }
    };
    let driver = {
        let c = c.clone();
        move |k: usize, th: &Theta| {
            c.a[k].transpose() * &th.y + c.c[k].transpose() * &th.z + c.c_tilde[k].transpose() * &th.zt
                - &c.q[k] * (&th.x - &th.ex)
        }
    };
    let terminal = {
        let c = c.clone();
        move |x: &DVector<f64>, ex: &DVector<f64>| -(&c.g * (x - ex))
    };
    Ok(MfFbsdeProblem {
        n,
        m,
        grid: *grid,
        x0: coeffs.x0.clone(),
        drift: Box::new(drift),
        sigma: Box::new(sigma),
        sigma_tilde: Box::new(sigma_tilde),
        driver: Box::new(driver),
        terminal: Box::new(terminal),
        control: Some(Box::new(move |k, th| control(k, th))),
        lipschitz: None,
    })
}
