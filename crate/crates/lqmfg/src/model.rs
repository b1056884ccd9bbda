//! Problem data: time grid, sampled coefficients, assumption checks and the
//! R-weighted projection onto the control set.
//!
//! Coefficients are stored per grid node and read as piecewise constant:
//! sample `k` governs the interval `[t_k, t_{k+1})`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{LqError, Result};
use crate::linalg::{all_finite_m, all_finite_v, is_diagonal, max_eig, min_eig, spd_inverse, sym};

/// Symmetry/PSD slack used by the assumption checks.
const PSD_TOL: f64 = 1e-10;
/// Structural zero tolerance for the H3 pattern.
const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LqError::Argument(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(LqError::Argument(format!("need at least 2 steps, got {steps}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Grid point `t_k`; the last node is exactly the horizon.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|k| self.t(k)).collect()
    }
}

/// Time-sampled coefficients of the state equation and the cost.
///
/// Naming follows the state equation
/// `dx = (Ax + Bu + F x^N + b)dt + (Cx + Du + H x^N + sigma)dW + (C~x + D~u + H~x^N + sigma~)dW~`
/// with `b` stored as `b_vec` to keep it apart from the matrix `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub c_tilde: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    pub d_tilde: Vec<DMatrix<f64>>,
    pub f: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    pub h_tilde: Vec<DMatrix<f64>>,
    pub b_vec: Vec<DVector<f64>>,
    pub sigma: Vec<DVector<f64>>,
    pub sigma_tilde: Vec<DVector<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub g: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub delta: f64,
    /// Lower bound demanded of the smallest eigenvalue of `R`.
    pub kappa: f64,
}

/// Time-invariant coefficients, expanded onto a grid with [`ConstantCoefficients::on_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantCoefficients {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_tilde: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub h_tilde: DMatrix<f64>,
    pub b_vec: DVector<f64>,
    pub sigma: DVector<f64>,
    pub sigma_tilde: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub delta: f64,
    pub kappa: f64,
}

impl ConstantCoefficients {
    /// All-zero data of the given dimensions with `R = I`, `F = 0`.
    pub fn zeros(n: usize, m: usize) -> Self {
        let nn = DMatrix::zeros(n, n);
        let nm = DMatrix::zeros(n, m);
        Self {
            a: nn.clone(),
            b: nm.clone(),
            c: nn.clone(),
            c_tilde: nn.clone(),
            d: nm.clone(),
            d_tilde: nm,
            f: nn.clone(),
            h: nn.clone(),
            h_tilde: nn.clone(),
            b_vec: DVector::zeros(n),
            sigma: DVector::zeros(n),
            sigma_tilde: DVector::zeros(n),
            q: nn.clone(),
            r: DMatrix::identity(m, m),
            g: nn,
            x0: DVector::zeros(n),
            delta: 0.0,
            kappa: 1e-8,
        }
    }

    pub fn on_grid(&self, grid: &TimeGrid) -> CoefficientSet {
        let k = grid.nodes();
        CoefficientSet {
            a: vec![self.a.clone(); k],
            b: vec![self.b.clone(); k],
            c: vec![self.c.clone(); k],
            c_tilde: vec![self.c_tilde.clone(); k],
            d: vec![self.d.clone(); k],
            d_tilde: vec![self.d_tilde.clone(); k],
            f: vec![self.f.clone(); k],
            h: vec![self.h.clone(); k],
            h_tilde: vec![self.h_tilde.clone(); k],
            b_vec: vec![self.b_vec.clone(); k],
            sigma: vec![self.sigma.clone(); k],
            sigma_tilde: vec![self.sigma_tilde.clone(); k],
            q: vec![self.q.clone(); k],
            r: vec![self.r.clone(); k],
            g: self.g.clone(),
            x0: self.x0.clone(),
            delta: self.delta,
            kappa: self.kappa,
        }
    }
}

/// Scalar inter-bank borrowing and lending example.
///
/// The bank's reserve follows `dx = [a(x^N - x) + A x + B u + b]dt + (C x + D u + sigma)dW
/// + (D~ u + sigma~)dW~`, so the generic drift matrix is `A - a` and `F = delta = a`.
/// Running cost weights are `eps` on `x - x^N` and `r` on the control; `c` is the terminal weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IblParams {
    pub x: f64,
    pub big_a: f64,
    pub a: f64,
    pub big_b: f64,
    pub b: f64,
    pub c: f64,
    pub sigma: f64,
    pub d: f64,
    pub d_tilde: f64,
    pub sigma_tilde: f64,
    pub eps: f64,
    pub r: f64,
    pub c_terminal: f64,
    pub n_agents: usize,
    pub horizon: f64,
}

impl Default for IblParams {
    fn default() -> Self {
        Self {
            x: 1.0,
            big_a: 3.2,
            a: 1.5,
            big_b: 2.8,
            b: 2.0,
            c: 0.6,
            sigma: 0.8,
            d: 0.0,
            d_tilde: 2.0,
            sigma_tilde: 0.3,
            eps: 3.3,
            r: 2.5,
            c_terminal: 5.0,
            n_agents: 20,
            horizon: 1.0,
        }
    }
}

impl IblParams {
    pub fn constant(&self) -> ConstantCoefficients {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        let v = |x: f64| DVector::from_element(1, x);
        ConstantCoefficients {
            a: s(self.big_a - self.a),
            b: s(self.big_b),
            c: s(self.c),
            c_tilde: s(0.0),
            d: s(self.d),
            d_tilde: s(self.d_tilde),
            f: s(self.a),
            h: s(0.0),
            h_tilde: s(0.0),
            b_vec: v(self.b),
            sigma: v(self.sigma),
            sigma_tilde: v(self.sigma_tilde),
            q: s(self.eps),
            r: s(self.r),
            g: s(self.c_terminal),
            x0: v(self.x),
            delta: self.a,
            kappa: 1e-8,
        }
    }

    pub fn coefficients(&self, grid: &TimeGrid) -> CoefficientSet {
        self.constant().on_grid(grid)
    }
}

impl CoefficientSet {
    pub fn n(&self) -> usize {
        self.x0.len()
    }

    pub fn m(&self) -> usize {
        self.r.first().map_or(0, |r| r.nrows())
    }

    pub fn nodes(&self) -> usize {
        self.a.len()
    }

    /// Checks every array against the grid length and the (n, m) shapes.
    pub fn check_shapes(&self, grid: &TimeGrid) -> Result<()> {
        let (n, m, k) = (self.n(), self.m(), grid.nodes());
        if n == 0 || m == 0 {
            return Err(LqError::Structural(
                "state and control dimensions must be positive".into(),
            ));
        }
        let mats: [(&str, &Vec<DMatrix<f64>>, usize, usize); 11] = [
            ("A", &self.a, n, n),
            ("B", &self.b, n, m),
            ("C", &self.c, n, n),
            ("C~", &self.c_tilde, n, n),
            ("D", &self.d, n, m),
            ("D~", &self.d_tilde, n, m),
            ("F", &self.f, n, n),
            ("H", &self.h, n, n),
            ("H~", &self.h_tilde, n, n),
            ("Q", &self.q, n, n),
            ("R", &self.r, m, m),
        ];
        for (name, arr, rows, cols) in mats {
            if arr.len() != k {
                return Err(LqError::Structural(format!(
                    "{name} has {} samples, grid has {k} nodes",
                    arr.len()
                )));
            }
            if let Some(j) = arr.iter().position(|x| x.shape() != (rows, cols)) {
                return Err(LqError::Structural(format!(
                    "{name} sample {j} has shape {:?}, expected ({rows}, {cols})",
                    arr[j].shape()
                )));
            }
            if let Some(j) = arr.iter().position(|x| !all_finite_m(x)) {
                return Err(LqError::Structural(format!("{name} sample {j} is not finite")));
            }
        }
        let vecs = [
            ("b", &self.b_vec),
            ("sigma", &self.sigma),
            ("sigma~", &self.sigma_tilde),
        ];
        for (name, arr) in vecs {
            if arr.len() != k {
                return Err(LqError::Structural(format!(
                    "{name} has {} samples, grid has {k} nodes",
                    arr.len()
                )));
            }
            if let Some(j) = arr.iter().position(|x| x.len() != n) {
                return Err(LqError::Structural(format!("{name} sample {j} has wrong length")));
            }
            if let Some(j) = arr.iter().position(|x| !all_finite_v(x)) {
                return Err(LqError::Structural(format!("{name} sample {j} is not finite")));
            }
        }
        if self.g.shape() != (n, n) || !all_finite_m(&self.g) {
            return Err(LqError::Structural("G must be a finite n x n matrix".into()));
        }
        if !all_finite_v(&self.x0) || !self.delta.is_finite() {
            return Err(LqError::Structural("x0 and delta must be finite".into()));
        }
        Ok(())
    }

    /// True when `F = delta I` and `H = H~ = C~ = 0` at every node.
    pub fn h3_structure(&self) -> bool {
        let n = self.n();
        let target = DMatrix::<f64>::identity(n, n) * self.delta;
        let zero = |m: &DMatrix<f64>| m.amax() <= ZERO_TOL;
        self.f.iter().all(|f| (f - &target).amax() <= ZERO_TOL)
            && self.h.iter().all(zero)
            && self.h_tilde.iter().all(zero)
            && self.c_tilde.iter().all(zero)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub h1_ok: bool,
    pub h2_ok: bool,
    pub h3_ok: bool,
    pub lambda_star: f64,
    pub theorem33_ok: bool,
    pub messages: Vec<String>,
}

fn sup_frobenius(arr: &[DMatrix<f64>]) -> f64 {
    arr.iter().map(|m| m.norm()).fold(0.0, f64::max)
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= PSD_TOL * (1.0 + m.amax())
}

/// Checks the bounded-coefficient, cost-positivity and mean-field structure
/// assumptions, plus the sufficient well-posedness inequality
/// `4 lambda* < -2|F| - 6|C|^2 - 6|C~|^2 - 5|H|^2 - 5|H~|^2`.
pub fn validate(coeffs: &CoefficientSet, grid: &TimeGrid) -> Result<ValidationReport> {
    coeffs.check_shapes(grid)?;
    let mut messages = Vec::new();

    // Finite samples on a finite grid are bounded.
    let h1_ok = true;

    let mut h2_ok = true;
    for (k, q) in coeffs.q.iter().enumerate() {
        if !is_symmetric(q) || min_eig(q) < -PSD_TOL {
            h2_ok = false;
            messages.push(format!("(H2) Q is not symmetric positive semidefinite at node {k}"));
            break;
        }
    }
    for (k, r) in coeffs.r.iter().enumerate() {
        if !is_symmetric(r) || min_eig(r) < coeffs.kappa {
            h2_ok = false;
            messages.push(format!(
                "(H2) R is not uniformly positive definite at node {k} (kappa = {:e})",
                coeffs.kappa
            ));
            break;
        }
    }
    if !is_symmetric(&coeffs.g) || min_eig(&coeffs.g) < -PSD_TOL {
        h2_ok = false;
        messages.push("(H2) G is not symmetric positive semidefinite".into());
    }

    let h3_ok = coeffs.h3_structure();
    if !h3_ok {
        messages.push("(H3) expected F = delta I and H = H~ = C~ = 0".into());
    }

    let lambda_star = coeffs
        .a
        .iter()
        .map(|a| max_eig(&sym(a)))
        .fold(f64::NEG_INFINITY, f64::max);
    let rhs = -2.0 * sup_frobenius(&coeffs.f)
        - 6.0 * sup_frobenius(&coeffs.c).powi(2)
        - 6.0 * sup_frobenius(&coeffs.c_tilde).powi(2)
        - 5.0 * sup_frobenius(&coeffs.h).powi(2)
        - 5.0 * sup_frobenius(&coeffs.h_tilde).powi(2);
    let inequality = 4.0 * lambda_star < rhs;
    if !inequality {
        messages.push(format!(
            "sufficient well-posedness condition fails: 4 lambda* = {} is not below {}",
            4.0 * lambda_star,
            rhs
        ));
    }
    let theorem33_ok = h1_ok && h2_ok && inequality;

    Ok(ValidationReport {
        h1_ok,
        h2_ok,
        h3_ok,
        lambda_star,
        theorem33_ok,
        messages,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    FullSpace,
    NonnegativeOrthant,
    Box { lower: DVector<f64>, upper: DVector<f64> },
}

impl ConstraintSet {
    pub fn boxed(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(LqError::Argument("box bounds differ in length".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(LqError::Argument("box needs lower <= upper componentwise".into()));
        }
        Ok(Self::Box { lower, upper })
    }

    fn bounds(&self, m: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        match self {
            Self::FullSpace => Ok((
                DVector::from_element(m, f64::NEG_INFINITY),
                DVector::from_element(m, f64::INFINITY),
            )),
            Self::NonnegativeOrthant => Ok((DVector::zeros(m), DVector::from_element(m, f64::INFINITY))),
            Self::Box { lower, upper } => {
                if lower.len() != m {
                    return Err(LqError::Argument(format!(
                        "box has dimension {}, control has {m}",
                        lower.len()
                    )));
                }
                Ok((lower.clone(), upper.clone()))
            }
        }
    }

    /// Membership test with absolute slack `tol`.
    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        match self.bounds(v.len()) {
            Ok((lo, hi)) => v
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(x, (l, h))| *x >= l - tol && *x <= h + tol),
            Err(_) => false,
        }
    }
}

const PROJECTION_TOL: f64 = 1e-10;
const PROJECTION_MAX_SWEEPS: usize = 100_000;

/// Minimizer of `|w - v|_R` over `w` in `gamma`.
pub fn project(gamma: &ConstraintSet, r_t: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let m = v.len();
    if r_t.shape() != (m, m) {
        return Err(LqError::Argument(format!(
            "weight has shape {:?}, control has length {m}",
            r_t.shape()
        )));
    }
    if !is_symmetric(r_t) || spd_inverse(r_t).is_none() {
        return Err(LqError::Argument(
            "projection weight must be symmetric positive definite".into(),
        ));
    }
    if matches!(gamma, ConstraintSet::FullSpace) {
        return Ok(v.clone());
    }
    let (lo, hi) = gamma.bounds(m)?;
    let clamp = |x: f64, j: usize| x.max(lo[j]).min(hi[j]);
    let mut w = DVector::from_fn(m, |j, _| clamp(v[j], j));
    if is_diagonal(r_t) {
        return Ok(w);
    }
    // Projected coordinate descent on 1/2 (w - v)' R (w - v).
    for _ in 0..PROJECTION_MAX_SWEEPS {
        let mut moved = 0.0_f64;
        for j in 0..m {
            let grad: f64 = (0..m).map(|i| r_t[(j, i)] * (w[i] - v[i])).sum();
            let next = clamp(w[j] - grad / r_t[(j, j)], j);
            moved = moved.max((next - w[j]).abs());
            w[j] = next;
        }
        if moved < PROJECTION_TOL * 1e-3 {
            break;
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ibl(steps: usize) -> (CoefficientSet, TimeGrid) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        (IblParams::default().coefficients(&grid), grid)
    }

    #[test]
    fn grid_endpoints() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(3), 1.0);
        assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
    }

    #[test]
    fn ibl_satisfies_assumptions() {
        let (c, g) = ibl(100);
        let rep = validate(&c, &g).unwrap();
        assert!(rep.h1_ok && rep.h2_ok && rep.h3_ok);
        assert!((rep.lambda_star - 1.7).abs() < 1e-15);
    }

    #[test]
    fn ibl_fails_sufficient_condition() {
        let (c, g) = ibl(100);
        let rep = validate(&c, &g).unwrap();
        // 4 * 1.7 against -2 * 1.5 - 6 * 0.6^2
        let rhs: f64 = -2.0 * 1.5 - 6.0 * 0.36;
        assert!((rhs + 5.16).abs() < 1e-12);
        assert!(!(4.0 * 1.7 < rhs));
        assert!(!rep.theorem33_ok);
    }

    #[test]
    fn zero_r_breaks_h2() {
        let (mut c, g) = ibl(10);
        c.r[4] = DMatrix::zeros(1, 1);
        let rep = validate(&c, &g).unwrap();
        assert!(!rep.h2_ok);
        assert!(!rep.theorem33_ok);
        assert!(rep.messages.iter().any(|m| m.contains("(H2)")));
    }

    #[test]
    fn structural_errors() {
        let (mut c, g) = ibl(10);
        c.q.pop();
        assert!(matches!(validate(&c, &g), Err(LqError::Structural(_))));
        let (mut c, g) = ibl(10);
        c.sigma[3][0] = f64::NAN;
        assert!(matches!(validate(&c, &g), Err(LqError::Structural(_))));
    }

    #[test]
    fn validate_is_pure() {
        let (c, g) = ibl(50);
        assert_eq!(validate(&c, &g).unwrap(), validate(&c, &g).unwrap());
    }

    #[test]
    fn projection_examples() {
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let r = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        assert_eq!(project(&ConstraintSet::FullSpace, &r, &v).unwrap(), v);

        let w = project(
            &ConstraintSet::NonnegativeOrthant,
            &DMatrix::from_element(1, 1, 2.5),
            &DVector::from_element(1, -3.0),
        )
        .unwrap();
        assert_eq!(w[0], 0.0);

        let gamma = ConstraintSet::boxed(DVector::from_element(2, -1.0), DVector::from_element(2, 1.0)).unwrap();
        let w = project(
            &gamma,
            &DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
            &DVector::from_vec(vec![2.0, 0.5]),
        )
        .unwrap();
        assert_eq!(w, DVector::from_vec(vec![1.0, 0.5]));
    }

    #[test]
    fn projection_matches_mesh_search() {
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let v = DVector::from_vec(vec![1.0, -1.0]);
        let w = project(&ConstraintSet::NonnegativeOrthant, &r, &v).unwrap();
        // Brute-force mesh over [0, 3]^2, refined once around the coarse winner.
        let obj = |x: f64, y: f64| {
            let d = DVector::from_vec(vec![x - v[0], y - v[1]]);
            d.dot(&(&r * &d))
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=600 {
            for j in 0..=600 {
                let (x, y) = (i as f64 * 0.005, j as f64 * 0.005);
                let o = obj(x, y);
                if o < best.0 {
                    best = (o, x, y);
                }
            }
        }
        let (cx, cy) = (best.1, best.2);
        for i in 0..=400 {
            for j in 0..=400 {
                let x = (cx - 0.01 + i as f64 * 5e-5).max(0.0);
                let y = (cy - 0.01 + j as f64 * 5e-5).max(0.0);
                let o = obj(x, y);
                if o < best.0 {
                    best = (o, x, y);
                }
            }
        }
        assert!(
            (w[0] - best.1).abs() < 1e-4 && (w[1] - best.2).abs() < 1e-4,
            "{w} vs {best:?}"
        );
        // Exact minimizer: w2 = 0, w1 = v1 + v2 / 2 = 0.5.
        assert!((w[0] - 0.5).abs() < 1e-9 && w[1].abs() < 1e-12);
    }

    #[test]
    fn projection_rejects_indefinite_weight() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let v = DVector::zeros(2);
        assert!(matches!(
            project(&ConstraintSet::NonnegativeOrthant, &r, &v),
            Err(LqError::Argument(_))
        ));
    }

    #[test]
    fn h3_flag_detects_structure() {
        let (mut c, g) = ibl(10);
        c.h[2] = DMatrix::from_element(1, 1, 0.1);
        assert!(!validate(&c, &g).unwrap().h3_ok);
    }
}
