//! Consistency-condition Riccati system for the unconstrained problem.
//!
//! All integrators are classical RK4 on the coefficient grid. Because the
//! coefficients are piecewise constant, every stage of step `k` reads sample
//! `k`. Grids produced by an earlier solve (P for the Pi, Phi and l equations)
//! are evaluated at half steps by cubic Hermite interpolation whose nodal
//! slopes come from their own differential equation, which keeps the coupled
//! solve fourth order.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{LqError, Result};
use crate::linalg::{all_finite_m, all_finite_v, min_eig, spd_inverse, sym, sym_norm};
use crate::model::{CoefficientSet, TimeGrid};

/// Slack for the positivity and monotonicity assertions.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residuals {
    pub p: f64,
    pub lambda: f64,
    pub phi: f64,
    pub l: f64,
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: Vec<DMatrix<f64>>,
    pub lambda: Vec<DMatrix<f64>>,
    pub pi: Vec<DMatrix<f64>>,
    pub phi: Vec<DVector<f64>>,
    pub l: Vec<DVector<f64>>,
    pub r_tilde: Vec<DMatrix<f64>>,
    pub p_tilde: Vec<DMatrix<f64>>,
    pub iteration_count: usize,
    pub residuals: Residuals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    P,
    Lambda,
    Phi,
    L,
}

/// Where an RK4 stage sits inside step `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Start,
    Mid,
    End,
}

trait OdeState: Clone {
    fn axpy(&self, s: f64, other: &Self) -> Self;
    fn scaled(&self, s: f64) -> Self;
    fn tidy(self) -> Self;
    fn finite(&self) -> bool;
}

impl OdeState for DMatrix<f64> {
    fn axpy(&self, s: f64, other: &Self) -> Self {
        self + other * s
    }
    fn scaled(&self, s: f64) -> Self {
        self * s
    }
    fn tidy(self) -> Self {
        sym(&self)
    }
    fn finite(&self) -> bool {
        all_finite_m(self)
    }
}

impl OdeState for DVector<f64> {
    fn axpy(&self, s: f64, other: &Self) -> Self {
        self + other * s
    }
    fn scaled(&self, s: f64) -> Self {
        self * s
    }
    fn tidy(self) -> Self {
        self
    }
    fn finite(&self) -> bool {
        all_finite_v(self)
    }
}

/// Backward RK4 from `terminal` at the last node; `rhs(k, stage, y)` is `dy/dt`.
fn rk4_backward<T: OdeState>(
    nodes: usize,
    dt: f64,
    terminal: T,
    what: &str,
    mut rhs: impl FnMut(usize, Stage, &T) -> Result<T>,
) -> Result<Vec<T>> {
    let mut out = vec![terminal.clone(); nodes];
    let mut y = terminal;
    for k in (0..nodes - 1).rev() {
        let k1 = rhs(k, Stage::End, &y)?;
        let y2 = y.axpy(-0.5 * dt, &k1).tidy();
        let k2 = rhs(k, Stage::Mid, &y2)?;
        let y3 = y.axpy(-0.5 * dt, &k2).tidy();
        let k3 = rhs(k, Stage::Mid, &y3)?;
        let y4 = y.axpy(-dt, &k3).tidy();
        let k4 = rhs(k, Stage::Start, &y4)?;
        let incr = k1.axpy(2.0, &k2).axpy(2.0, &k3).axpy(1.0, &k4);
        y = y.axpy(-dt / 6.0, &incr).tidy();
        if !y.finite() {
            return Err(LqError::Divergence {
                what: what.into(),
                step: k,
            });
        }
        out[k] = y.clone();
    }
    Ok(out)
}

/// Forward RK4 from `initial` at node 0.
fn rk4_forward<T: OdeState>(
    nodes: usize,
    dt: f64,
    initial: T,
    what: &str,
    mut rhs: impl FnMut(usize, Stage, &T) -> Result<T>,
) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(nodes);
    let mut y = initial;
    out.push(y.clone());
    for k in 0..nodes - 1 {
        let k1 = rhs(k, Stage::Start, &y)?;
        let k2 = rhs(k, Stage::Mid, &y.axpy(0.5 * dt, &k1).tidy())?;
        let k3 = rhs(k, Stage::Mid, &y.axpy(0.5 * dt, &k2).tidy())?;
        let k4 = rhs(k, Stage::End, &y.axpy(dt, &k3).tidy())?;
        let incr = k1.axpy(2.0, &k2).axpy(2.0, &k3).axpy(1.0, &k4);
        y = y.axpy(dt / 6.0, &incr).tidy();
        if !y.finite() {
            return Err(LqError::Divergence {
                what: what.into(),
                step: k,
            });
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// Cubic Hermite value at the middle of a step.
fn hermite_mid<T: OdeState>(y0: &T, y1: &T, d0: &T, d1: &T, dt: f64) -> T {
    y0.axpy(1.0, y1)
        .scaled(0.5)
        .axpy(0.125 * dt, d0)
        .axpy(-0.125 * dt, d1)
        .tidy()
}

fn pick<T: Clone>(grid: &[T], mid: &[T], k: usize, stage: Stage) -> T {
    match stage {
        Stage::Start => grid[k].clone(),
        Stage::Mid => mid[k].clone(),
        Stage::End => grid[k + 1].clone(),
    }
}

/// Evaluations of the right-hand sides with coefficient sample `k`.
struct Rhs<'a> {
    c: &'a CoefficientSet,
}

impl<'a> Rhs<'a> {
    fn r_tilde(&self, k: usize, p: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, dt) = (&self.c.d[k], &self.c.d_tilde[k]);
        sym(&(&self.c.r[k] + d.transpose() * p * d + dt.transpose() * p * dt))
    }

    fn p_tilde(&self, k: usize, p: &DMatrix<f64>) -> DMatrix<f64> {
        p * &self.c.b[k] + self.c.c[k].transpose() * p * &self.c.d[k]
    }

    fn r_tilde_inv(&self, k: usize, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        spd_inverse(&self.r_tilde(k, p)).ok_or(LqError::Singular {
            what: "R~".into(),
            node: k,
        })
    }

    fn p_dot(&self, k: usize, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let c = self.c;
        let pt = self.p_tilde(k, p);
        let ri = self.r_tilde_inv(k, p)?;
        let a = &c.a[k];
        Ok(-(p * a + a.transpose() * p + c.c[k].transpose() * p * &c.c[k] + &c.q[k] - &pt * ri * pt.transpose()))
    }

    /// `Psi = R~^{-1} P~'` for the iterative scheme.
    fn psi(&self, k: usize, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.r_tilde_inv(k, p)? * self.p_tilde(k, p).transpose())
    }

    /// Closed-loop data of the Lyapunov pass built from the iterate `p`.
    fn hats(&self, k: usize, p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let c = self.c;
        let psi = self.psi(k, p)?;
        let a_hat = &c.a[k] - &c.b[k] * &psi;
        let c_hat = &c.c[k] - &c.d[k] * &psi;
        let dt = &c.d_tilde[k];
        let w = &c.r[k] + dt.transpose() * p * dt;
        let q_hat = sym(&(&c.q[k] + psi.transpose() * w * &psi));
        Ok((a_hat, c_hat, q_hat))
    }

    fn pi_dot(&self, k: usize, pi: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let c = self.c;
        let ri = self.r_tilde_inv(k, p)?;
        let (b, d, cc) = (&c.b[k], &c.d[k], &c.c[k]);
        let a_bar = &c.a[k] - b * &ri * d.transpose() * p * cc;
        let source = self.pi_source(k, p, &ri);
        Ok(-(pi * &a_bar + a_bar.transpose() * pi + pi * c.delta + source - pi * b * &ri * b.transpose() * pi))
    }

    fn pi_source(&self, k: usize, p: &DMatrix<f64>, ri: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, cc) = (&self.c.d[k], &self.c.c[k]);
        sym(&(cc.transpose() * (p - p * d * ri * d.transpose() * p) * cc))
    }

    fn lambda_dot(&self, k: usize, lam: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let c = self.c;
        let ri = self.r_tilde_inv(k, p)?;
        let b = &c.b[k];
        let a_k = &c.a[k] - b * &ri * self.p_tilde(k, p).transpose();
        Ok(-(lam * &a_k + a_k.transpose() * lam + (p + lam) * c.delta - lam * b * &ri * b.transpose() * lam - &c.q[k]))
    }

    fn phi_dot(&self, k: usize, phi: &DVector<f64>, p: &DMatrix<f64>, lam: &DMatrix<f64>) -> Result<DVector<f64>> {
        let c = self.c;
        let ri = self.r_tilde_inv(k, p)?;
        let pt = self.p_tilde(k, p);
        let (b, d, dtl) = (&c.b[k], &c.d[k], &c.d_tilde[k]);
        let left = &pt * &ri + lam * b * &ri;
        let m1 = c.a[k].transpose() - &left * b.transpose();
        let m2 = c.c[k].transpose() - &left * d.transpose();
        let m3 = &left * dtl.transpose();
        Ok(-(m1 * phi + m2 * (p * &c.sigma[k]) - m3 * (p * &c.sigma_tilde[k]) + (p + lam) * &c.b_vec[k]))
    }

    /// Feedback offset `R~^{-1}(B'Phi + D'P sigma + D~'P sigma~)`, without the sign.
    fn offset(&self, k: usize, p: &DMatrix<f64>, phi: &DVector<f64>, ri: &DMatrix<f64>) -> DVector<f64> {
        let c = self.c;
        ri * (c.b[k].transpose() * phi
            + c.d[k].transpose() * (p * &c.sigma[k])
            + c.d_tilde[k].transpose() * (p * &c.sigma_tilde[k]))
    }

    fn l_dot(
        &self,
        k: usize,
        l: &DVector<f64>,
        p: &DMatrix<f64>,
        lam: &DMatrix<f64>,
        phi: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let c = self.c;
        let ri = self.r_tilde_inv(k, p)?;
        let b = &c.b[k];
        let n = c.n();
        let gain = &c.a[k] + DMatrix::identity(n, n) * c.delta
            - b * &ri * (self.p_tilde(k, p).transpose() + b.transpose() * lam);
        Ok(gain * l + &c.b_vec[k] - b * self.offset(k, p, phi, &ri))
    }
}

fn check_h3(coeffs: &CoefficientSet) -> Result<()> {
    if coeffs.h3_structure() {
        Ok(())
    } else {
        Err(LqError::Argument(
            "the Riccati system needs F = delta I and H = H~ = C~ = 0".into(),
        ))
    }
}

fn check_len<T>(what: &str, grid: &[T], nodes: usize) -> Result<()> {
    if grid.len() == nodes {
        Ok(())
    } else {
        Err(LqError::Structural(format!(
            "{what} has {} nodes, expected {nodes}",
            grid.len()
        )))
    }
}

/// Half-step values of `p` by Hermite interpolation with Riccati slopes.
fn p_midpoints(rhs: &Rhs, p: &[DMatrix<f64>], dt: f64) -> Result<Vec<DMatrix<f64>>> {
    (0..p.len() - 1)
        .map(|k| {
            let d0 = rhs.p_dot(k, &p[k])?;
            let d1 = rhs.p_dot(k, &p[k + 1])?;
            Ok(hermite_mid(&p[k], &p[k + 1], &d0, &d1, dt))
        })
        .collect()
}

/// Backward RK4 for `P' + P Ah + Ah'P + Ch'P Ch + Qh = 0` with stagewise data.
///
/// `data(k, stage)` returns `(Ah, Ch, Qh)` for the stage of step `k`.
pub fn integrate_lyapunov(
    a_hat: &[DMatrix<f64>],
    c_hat: &[DMatrix<f64>],
    q_hat: &[DMatrix<f64>],
    terminal: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<Vec<DMatrix<f64>>> {
    let nodes = grid.nodes();
    check_len("Ahat", a_hat, nodes)?;
    check_len("Chat", c_hat, nodes)?;
    check_len("Qhat", q_hat, nodes)?;
    let n = terminal.nrows();
    if terminal.shape() != (n, n) {
        return Err(LqError::Structural("terminal must be square".into()));
    }
    lyapunov_staged(nodes, grid.dt(), sym(terminal), |k, _| {
        Ok((a_hat[k].clone(), c_hat[k].clone(), q_hat[k].clone()))
    })
}

type Hats = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

fn lyap_dot(h: &Hats, p: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, c, q) = h;
    -(p * a + a.transpose() * p + c.transpose() * p * c + q)
}

fn lyapunov_staged(
    nodes: usize,
    dt: f64,
    terminal: DMatrix<f64>,
    mut data: impl FnMut(usize, Stage) -> Result<Hats>,
) -> Result<Vec<DMatrix<f64>>> {
    rk4_backward(nodes, dt, terminal, "Lyapunov equation", |k, s, p| {
        Ok(lyap_dot(&data(k, s)?, p))
    })
}

/// Iterative scheme for `P`: `P_0` solves the open-loop Lyapunov equation and
/// `P_{i+1}` the Lyapunov equation closed by `Psi_i`. Returns the limit and the
/// number of Lyapunov passes after `P_0`.
pub fn solve_p_iterative(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<DMatrix<f64>>, usize)> {
    coeffs.check_shapes(grid)?;
    let rhs = Rhs { c: coeffs };
    let (nodes, dt) = (grid.nodes(), grid.dt());

    let open = |k: usize| -> Hats { (coeffs.a[k].clone(), coeffs.c[k].clone(), coeffs.q[k].clone()) };
    let mut current = lyapunov_staged(nodes, dt, coeffs.g.clone(), |k, _| Ok(open(k)))?;
    check_psd("P_0", &current)?;
    // Closed-loop data that produced `current`; `None` for the open-loop pass.
    let mut previous: Option<Vec<DMatrix<f64>>> = None;
    let mut history = Vec::new();

    for iter in 1..=max_iter {
        // Slopes of the current iterate, from the equation it solves.
        let slope = |k: usize, j: usize| -> Result<DMatrix<f64>> {
            let h = match &previous {
                None => open(k),
                Some(prev) => rhs.hats(k, &prev[j])?,
            };
            Ok(lyap_dot(&h, &current[j]))
        };
        let mids: Vec<DMatrix<f64>> = (0..nodes - 1)
            .map(|k| {
                Ok(hermite_mid(
                    &current[k],
                    &current[k + 1],
                    &slope(k, k)?,
                    &slope(k, k + 1)?,
                    dt,
                ))
            })
            .collect::<Result<_>>()?;
        let next = lyapunov_staged(nodes, dt, coeffs.g.clone(), |k, s| {
            rhs.hats(k, &pick(&current, &mids, k, s))
        })?;

        let mut diff = 0.0_f64;
        for (j, (pi, pn)) in current.iter().zip(next.iter()).enumerate() {
            let delta = pi - pn;
            let me = min_eig(&delta);
            if me < -PSD_TOL {
                return Err(LqError::Monotonicity {
                    iteration: iter,
                    node: j,
                    min_eig: me,
                });
            }
            let pe = min_eig(pn);
            if pe < -PSD_TOL {
                return Err(LqError::Monotonicity {
                    iteration: iter,
                    node: j,
                    min_eig: pe,
                });
            }
            diff = diff.max(sym_norm(&delta));
        }
        history.push(diff);
        previous = Some(std::mem::replace(&mut current, next));
        if diff < tol {
            return Ok((current, iter));
        }
    }
    Err(LqError::NonConvergence {
        iterations: max_iter,
        last_diff: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Direct backward RK4 on the nonlinear equation for `P`.
pub fn solve_p_direct(coeffs: &CoefficientSet, grid: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    coeffs.check_shapes(grid)?;
    let rhs = Rhs { c: coeffs };
    rk4_backward(grid.nodes(), grid.dt(), sym(&coeffs.g), "P", |k, _, p| rhs.p_dot(k, p))
}

fn check_psd(what: &str, grid: &[DMatrix<f64>]) -> Result<()> {
    for (node, m) in grid.iter().enumerate() {
        let me = min_eig(m);
        if me < -PSD_TOL {
            return Err(LqError::Positivity {
                what: what.into(),
                node,
                min_eig: me,
            });
        }
    }
    Ok(())
}

/// Solves the transformed equation for `Pi = P + Lambda` with `Pi(T) = 0`.
pub fn solve_pi(coeffs: &CoefficientSet, grid: &TimeGrid, p: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    coeffs.check_shapes(grid)?;
    check_h3(coeffs)?;
    check_len("P", p, grid.nodes())?;
    let rhs = Rhs { c: coeffs };
    for (k, pk) in p.iter().enumerate() {
        let ri = rhs.r_tilde_inv(k, pk)?;
        let me = min_eig(&rhs.pi_source(k, pk, &ri));
        if me < -PSD_TOL {
            return Err(LqError::Positivity {
                what: "Pi source term".into(),
                node: k,
                min_eig: me,
            });
        }
    }
    let n = coeffs.n();
    let mids = p_midpoints(&rhs, p, grid.dt())?;
    let pi = rk4_backward(grid.nodes(), grid.dt(), DMatrix::zeros(n, n), "Pi", |k, s, pi| {
        rhs.pi_dot(k, pi, &pick(p, &mids, k, s))
    })?;
    check_psd("Pi", &pi)?;
    Ok(pi)
}

pub fn solve_phi(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    p: &[DMatrix<f64>],
    lambda: &[DMatrix<f64>],
) -> Result<Vec<DVector<f64>>> {
    coeffs.check_shapes(grid)?;
    check_h3(coeffs)?;
    let (nodes, dt) = (grid.nodes(), grid.dt());
    check_len("P", p, nodes)?;
    check_len("Lambda", lambda, nodes)?;
    let rhs = Rhs { c: coeffs };
    let p_mid = p_midpoints(&rhs, p, dt)?;
    let lam_mid: Vec<DMatrix<f64>> = (0..nodes - 1)
        .map(|k| {
            let d0 = rhs.lambda_dot(k, &lambda[k], &p[k])?;
            let d1 = rhs.lambda_dot(k, &lambda[k + 1], &p[k + 1])?;
            Ok(hermite_mid(&lambda[k], &lambda[k + 1], &d0, &d1, dt))
        })
        .collect::<Result<_>>()?;
    rk4_backward(nodes, dt, DVector::zeros(coeffs.n()), "Phi", |k, s, phi| {
        rhs.phi_dot(k, phi, &pick(p, &p_mid, k, s), &pick(lambda, &lam_mid, k, s))
    })
}

pub fn solve_l(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    p: &[DMatrix<f64>],
    lambda: &[DMatrix<f64>],
    phi: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    coeffs.check_shapes(grid)?;
    check_h3(coeffs)?;
    let (nodes, dt) = (grid.nodes(), grid.dt());
    check_len("P", p, nodes)?;
    check_len("Lambda", lambda, nodes)?;
    check_len("Phi", phi, nodes)?;
    let rhs = Rhs { c: coeffs };
    let p_mid = p_midpoints(&rhs, p, dt)?;
    let mut lam_mid = Vec::with_capacity(nodes - 1);
    let mut phi_mid = Vec::with_capacity(nodes - 1);
    for k in 0..nodes - 1 {
        let dl0 = rhs.lambda_dot(k, &lambda[k], &p[k])?;
        let dl1 = rhs.lambda_dot(k, &lambda[k + 1], &p[k + 1])?;
        lam_mid.push(hermite_mid(&lambda[k], &lambda[k + 1], &dl0, &dl1, dt));
        let df0 = rhs.phi_dot(k, &phi[k], &p[k], &lambda[k])?;
        let df1 = rhs.phi_dot(k, &phi[k + 1], &p[k + 1], &lambda[k + 1])?;
        phi_mid.push(hermite_mid(&phi[k], &phi[k + 1], &df0, &df1, dt));
    }
    rk4_forward(nodes, dt, coeffs.x0.clone(), "l", |k, s, l| {
        rhs.l_dot(
            k,
            l,
            &pick(p, &p_mid, k, s),
            &pick(lambda, &lam_mid, k, s),
            &pick(phi, &phi_mid, k, s),
        )
    })
}

/// Which integrator produces `P` inside [`solve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PMethod {
    Direct,
    Iterative { tol: f64, max_iter: usize },
}

impl Default for PMethod {
    fn default() -> Self {
        PMethod::Iterative {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Full solve: `P`, then `Pi`, `Lambda = Pi - P`, `Phi`, `l`, and residuals.
pub fn solve(coeffs: &CoefficientSet, grid: &TimeGrid, method: PMethod) -> Result<RiccatiSolution> {
    coeffs.check_shapes(grid)?;
    check_h3(coeffs)?;
    let (p, iteration_count) = match method {
        PMethod::Direct => (solve_p_direct(coeffs, grid)?, 0),
        PMethod::Iterative { tol, max_iter } => solve_p_iterative(coeffs, grid, tol, max_iter)?,
    };
    check_psd("P", &p)?;
    let pi = solve_pi(coeffs, grid, &p)?;
    let lambda: Vec<DMatrix<f64>> = pi.iter().zip(p.iter()).map(|(a, b)| a - b).collect();
    let phi = solve_phi(coeffs, grid, &p, &lambda)?;
    let l = solve_l(coeffs, grid, &p, &lambda, &phi)?;
    let rhs = Rhs { c: coeffs };
    let r_tilde = p.iter().enumerate().map(|(k, pk)| rhs.r_tilde(k, pk)).collect();
    let p_tilde = p.iter().enumerate().map(|(k, pk)| rhs.p_tilde(k, pk)).collect();
    let mut sol = RiccatiSolution {
        p,
        lambda,
        pi,
        phi,
        l,
        r_tilde,
        p_tilde,
        iteration_count,
        residuals: Residuals {
            p: 0.0,
            lambda: 0.0,
            phi: 0.0,
            l: 0.0,
        },
    };
    sol.residuals = Residuals {
        p: residual(Equation::P, &sol, coeffs, grid)?,
        lambda: residual(Equation::Lambda, &sol, coeffs, grid)?,
        phi: residual(Equation::Phi, &sol, coeffs, grid)?,
        l: residual(Equation::L, &sol, coeffs, grid)?,
    };
    Ok(sol)
}

/// Central-difference derivative at node `k`: five-point stencil on grids
/// with at least five nodes, three-point otherwise.
fn central<T: OdeState>(y: &[T], k: usize, dt: f64) -> T {
    if y.len() >= 5 {
        y[k - 2]
            .axpy(-8.0, &y[k - 1])
            .axpy(8.0, &y[k + 1])
            .axpy(-1.0, &y[k + 2])
            .scaled(1.0 / (12.0 * dt))
    } else {
        y[k + 1].axpy(-1.0, &y[k - 1]).scaled(0.5 / dt)
    }
}

/// Largest norm of the equation's left-hand side over interior nodes, with
/// the time derivative replaced by a central difference. Interior means the
/// nodes where the stencil fits: two away from each end for the five-point
/// stencil, one for the three-point stencil on very short grids.
pub fn residual(eq: Equation, sol: &RiccatiSolution, coeffs: &CoefficientSet, grid: &TimeGrid) -> Result<f64> {
    let nodes = grid.nodes();
    if nodes < 3 {
        return Err(LqError::Structural("residual needs at least 3 nodes".into()));
    }
    check_len("P", &sol.p, nodes)?;
    check_len("Lambda", &sol.lambda, nodes)?;
    check_len("Phi", &sol.phi, nodes)?;
    check_len("l", &sol.l, nodes)?;
    let rhs = Rhs { c: coeffs };
    let dt = grid.dt();
    let margin = if nodes >= 5 { 2 } else { 1 };
    let mut worst = 0.0_f64;
    for k in margin..nodes - margin {
        let r = match eq {
            Equation::P => (central(&sol.p, k, dt) - rhs.p_dot(k, &sol.p[k])?).norm(),
            Equation::Lambda => (central(&sol.lambda, k, dt) - rhs.lambda_dot(k, &sol.lambda[k], &sol.p[k])?).norm(),
            Equation::Phi => {
                (central(&sol.phi, k, dt) - rhs.phi_dot(k, &sol.phi[k], &sol.p[k], &sol.lambda[k])?).norm()
            }
            Equation::L => {
                (central(&sol.l, k, dt) - rhs.l_dot(k, &sol.l[k], &sol.p[k], &sol.lambda[k], &sol.phi[k])?).norm()
            }
        };
        if !r.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(r);
    }
    Ok(worst)
}

/// Explicit scalar `P` when `C = D = D~ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarClosedForm {
    pub theta: f64,
    /// `(B^2 c/r - (A - a + theta)) / (B^2 c/r - (A - a) + theta)`; infinite
    /// when the lower term vanishes.
    pub k_ratio: f64,
    alpha: f64,
    beta: f64,
    r_over_b2: f64,
    horizon: f64,
}

impl ScalarClosedForm {
    /// `P(t)` in the cleared-denominator form, finite even when `k_ratio` is not.
    pub fn p_of_t(&self, t: f64) -> f64 {
        let (al, be, th) = (self.alpha, self.beta, self.theta);
        let e = (2.0 * th * (t - self.horizon)).exp();
        let num = (al + th) * (be - al + th) + (th - al) * (be - al - th) * e;
        let den = (be - al + th) - (be - al - th) * e;
        self.r_over_b2 * num / den
    }
}

/// Builds the closed form from the scalar example data; `a_big` and `a` enter only through `A - a`.
pub fn closed_form_scalar_p(
    a_big: f64,
    a: f64,
    b: f64,
    eps: f64,
    r: f64,
    c: f64,
    horizon: f64,
) -> Result<ScalarClosedForm> {
    if !(r > 0.0) || b == 0.0 || !(horizon > 0.0) {
        return Err(LqError::Argument("need r > 0, B != 0 and T > 0".into()));
    }
    let alpha = a_big - a;
    let beta = b * b * c / r;
    let theta = (alpha * alpha + b * b * eps / r).sqrt();
    if !(theta > 0.0) {
        return Err(LqError::Argument("theta must be positive".into()));
    }
    let upper = beta - alpha - theta;
    let lower = beta - alpha + theta;
    // Denominator lower - upper e^{2 theta (t - T)} over e in [e^{-2 theta T}, 1].
    let e_min = (-2.0 * theta * horizon).exp();
    let d_end = lower - upper;
    let d_start = lower - upper * e_min;
    if !(d_end > 0.0 && d_start > 0.0) && !(d_end < 0.0 && d_start < 0.0) {
        return Err(LqError::BlowUp(format!(
            "denominator changes sign or vanishes on [0, T] (k = {})",
            upper / lower
        )));
    }
    Ok(ScalarClosedForm {
        theta,
        k_ratio: upper / lower,
        alpha,
        beta,
        r_over_b2: r / (b * b),
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantCoefficients, IblParams};

    fn ibl(steps: usize) -> (CoefficientSet, TimeGrid) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        (IblParams::default().coefficients(&grid), grid)
    }

    #[test]
    fn lyapunov_zero_and_linear() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let z = vec![DMatrix::zeros(2, 2); grid.nodes()];
        let out = integrate_lyapunov(&z, &z, &z, &DMatrix::zeros(2, 2), &grid).unwrap();
        assert!(out.iter().all(|m| m.amax() == 0.0));

        let id = vec![DMatrix::identity(2, 2); grid.nodes()];
        let out = integrate_lyapunov(&z, &z, &id, &DMatrix::zeros(2, 2), &grid).unwrap();
        for (k, m) in out.iter().enumerate() {
            let expect = DMatrix::<f64>::identity(2, 2) * (1.0 - grid.t(k));
            assert!((m - expect).amax() < 1e-14);
        }
    }

    #[test]
    fn lyapunov_richardson() {
        let (c, g) = ibl(200);
        let (_, g2) = ibl(400);
        let coarse = integrate_lyapunov(&c.a, &c.c, &c.q, &c.g, &g).unwrap();
        let c2 = IblParams::default().coefficients(&g2);
        let fine = integrate_lyapunov(&c2.a, &c2.c, &c2.q, &c2.g, &g2).unwrap();
        let refined = |k: usize| (16.0 * fine[2 * k][(0, 0)] - coarse[k][(0, 0)]) / 15.0;
        for k in [0, 50, 100, 199] {
            let rel = (coarse[k][(0, 0)] - refined(k)).abs() / refined(k).abs();
            assert!(rel < 1e-8, "node {k}: rel {rel}");
        }
        // Exact scalar solution with 2A + C^2 = 3.76.
        let s: f64 = 2.0 * 1.7 + 0.36;
        let exact = 5.0 * s.exp() + 3.3 * (s.exp() - 1.0) / s;
        assert!((coarse[0][(0, 0)] - exact).abs() / exact < 1e-8);
    }

    #[test]
    fn zero_data_zero_p() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let mut k = ConstantCoefficients::zeros(2, 1);
        k.a = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.5]);
        k.b = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
        let c = k.on_grid(&grid);
        let (p, iters) = solve_p_iterative(&c, &grid, 1e-10, 200).unwrap();
        assert_eq!(iters, 1);
        assert!(p.iter().all(|m| m.amax() == 0.0));
        assert!(solve_p_direct(&c, &grid).unwrap().iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn ibl_iterative_matches_direct() {
        let (c, g) = ibl(1000);
        let (p, iters) = solve_p_iterative(&c, &g, 1e-10, 200).unwrap();
        let direct = solve_p_direct(&c, &g).unwrap();
        assert_eq!(p[1000][(0, 0)], 5.0);
        assert!(iters < 200);
        let err = p.iter().zip(&direct).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(err < 1e-6, "sup error {err}");
    }

    #[test]
    fn closed_form_examples() {
        let cf = closed_form_scalar_p(3.2, 1.5, 2.8, 3.3, 2.5, 5.0, 1.0).unwrap();
        assert!((cf.theta * cf.theta - 13.2388).abs() < 1e-12);
        assert!((cf.p_of_t(1.0) - 5.0).abs() < 1e-12);
        let z = closed_form_scalar_p(3.2, 1.5, 2.8, 0.0, 2.5, 0.0, 1.0).unwrap();
        assert!((z.theta - 1.7).abs() < 1e-15);
        for t in [0.0, 0.3, 0.9, 1.0] {
            assert!(z.p_of_t(t).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_blow_up() {
        // A negative terminal weight drives the denominator through zero.
        assert!(matches!(
            closed_form_scalar_p(3.2, 1.5, 2.8, 3.3, 2.5, -20.0, 5.0),
            Err(LqError::BlowUp(_))
        ));
    }

    #[test]
    fn residual_detects_corruption() {
        let (c, g) = ibl(1000);
        let mut sol = solve(&c, &g, PMethod::Direct).unwrap();
        assert!(sol.residuals.p < 1e-5);
        sol.p[500][(0, 0)] += 0.1;
        assert!(residual(Equation::P, &sol, &c, &g).unwrap() > 1.0);
    }

    #[test]
    fn zero_solution_has_zero_residual() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let c = ConstantCoefficients::zeros(1, 1).on_grid(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        for eq in [Equation::P, Equation::Lambda, Equation::Phi, Equation::L] {
            assert_eq!(residual(eq, &sol, &c, &grid).unwrap(), 0.0);
        }
    }

    #[test]
    fn requires_h3() {
        let (mut c, g) = ibl(10);
        c.h[0] = DMatrix::from_element(1, 1, 0.2);
        assert!(matches!(solve(&c, &g, PMethod::Direct), Err(LqError::Argument(_))));
    }

    #[test]
    fn grid_mismatch_is_structural() {
        let (c, g) = ibl(10);
        let p = solve_p_direct(&c, &g).unwrap();
        assert!(matches!(solve_phi(&c, &g, &p[..5], &p), Err(LqError::Structural(_))));
    }
}
