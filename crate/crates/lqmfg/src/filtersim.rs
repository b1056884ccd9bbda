//! Decentralized feedback, filter and population simulation, Monte-Carlo costs.
//!
//! All stochastic dynamics use Euler-Maruyama on the coefficient grid.
//! Paths run in parallel; each path reads its own counter-based streams and
//! results are assembled in path order, so the output does not depend on the
//! number of worker threads.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{LqError, Result};
use crate::linalg::spd_inverse;
use crate::model::{project, CoefficientSet, ConstraintSet, TimeGrid};
use crate::noise::{Domain, IncrementStream};
use crate::riccati::RiccatiSolution;

/// `u = K z^ + K_l l + c_off`, optionally projected onto `gamma` in the `R(t)` norm.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    pub k: Vec<DMatrix<f64>>,
    pub k_l: Vec<DMatrix<f64>>,
    pub c_off: Vec<DVector<f64>>,
    pub l_ref: Vec<DVector<f64>>,
    pub gamma: ConstraintSet,
    weights: Vec<DMatrix<f64>>,
}

pub fn build_feedback(sol: &RiccatiSolution, coeffs: &CoefficientSet) -> Result<FeedbackLaw> {
    let nodes = sol.p.len();
    if coeffs.nodes() != nodes || sol.l.len() != nodes || sol.phi.len() != nodes {
        return Err(LqError::Structural(
            "Riccati solution and coefficients disagree on the grid".into(),
        ));
    }
    let mut k = Vec::with_capacity(nodes);
    let mut k_l = Vec::with_capacity(nodes);
    let mut c_off = Vec::with_capacity(nodes);
    for j in 0..nodes {
        let ri = spd_inverse(&sol.r_tilde[j]).ok_or(LqError::Singular {
            what: "R~".into(),
            node: j,
        })?;
        let p = &sol.p[j];
        let b = &coeffs.b[j];
        k.push(-(&ri * sol.p_tilde[j].transpose()));
        k_l.push(-(&ri * b.transpose() * &sol.lambda[j]));
        let inner = b.transpose() * &sol.phi[j]
            + coeffs.d[j].transpose() * (p * &coeffs.sigma[j])
            + coeffs.d_tilde[j].transpose() * (p * &coeffs.sigma_tilde[j]);
        c_off.push(-(&ri * inner));
    }
    let law = FeedbackLaw {
        k,
        k_l,
        c_off,
        l_ref: sol.l.clone(),
        gamma: ConstraintSet::FullSpace,
        weights: coeffs.r.clone(),
    };
    if law.is_finite() {
        Ok(law)
    } else {
        Err(LqError::Structural("feedback gains are not finite".into()))
    }
}

impl FeedbackLaw {
    /// Same gains, controls projected onto `gamma`.
    pub fn with_constraint(mut self, gamma: ConstraintSet) -> Self {
        self.gamma = gamma;
        self
    }

    /// Multiplies the state gain `K` by `s`, leaving `K_l` and the offset alone.
    pub fn with_scaled_gain(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.k.iter_mut().for_each(|g| *g *= s);
        out
    }

    pub fn nodes(&self) -> usize {
        self.k.len()
    }

    fn is_finite(&self) -> bool {
        self.k
            .iter()
            .chain(self.k_l.iter())
            .all(|m| m.iter().all(|x| x.is_finite()))
            && self
                .c_off
                .iter()
                .chain(self.l_ref.iter())
                .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn control(&self, k: usize, z_hat: &DVector<f64>) -> Result<DVector<f64>> {
        let u = &self.k[k] * z_hat + &self.k_l[k] * &self.l_ref[k] + &self.c_off[k];
        match self.gamma {
            ConstraintSet::FullSpace => Ok(u),
            _ => project(&self.gamma, &self.weights[k], &u),
        }
    }
}

/// One Euler step of the filter `dz = (Az + Bu + F l + b)dt + (Cz + Du + H l + sigma)dW`.
pub(crate) fn filter_step(
    c: &CoefficientSet,
    k: usize,
    dt: f64,
    z: &DVector<f64>,
    u: &DVector<f64>,
    l: &DVector<f64>,
    dw: f64,
) -> DVector<f64> {
    let drift = &c.a[k] * z + &c.b[k] * u + &c.f[k] * l + &c.b_vec[k];
    let diff = &c.c[k] * z + &c.d[k] * u + &c.h[k] * l + &c.sigma[k];
    z + drift * dt + diff * dw
}

/// One Euler step of an agent's true state given the population average `xbar`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn state_step(
    c: &CoefficientSet,
    k: usize,
    dt: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    xbar: &DVector<f64>,
    dw: f64,
    dwt: f64,
) -> DVector<f64> {
    let drift = &c.a[k] * x + &c.b[k] * u + &c.f[k] * xbar + &c.b_vec[k];
    let diff = &c.c[k] * x + &c.d[k] * u + &c.h[k] * xbar + &c.sigma[k];
    let difft = &c.c_tilde[k] * x + &c.d_tilde[k] * u + &c.h_tilde[k] * xbar + &c.sigma_tilde[k];
    x + drift * dt + diff * dw + difft * dwt
}

/// Running cost integrand `<Q e, e> + <R u, u>` at node `k`.
pub(crate) fn running_cost(c: &CoefficientSet, k: usize, e: &DVector<f64>, u: &DVector<f64>) -> f64 {
    e.dot(&(&c.q[k] * e)) + u.dot(&(&c.r[k] * u))
}

pub(crate) fn terminal_cost(c: &CoefficientSet, e: &DVector<f64>) -> f64 {
    e.dot(&(&c.g * e))
}

/// Trapezoid weight of node `k` on a grid with `nodes` points.
pub(crate) fn trapezoid_weight(k: usize, nodes: usize, dt: f64) -> f64 {
    if k == 0 || k + 1 == nodes {
        0.5 * dt
    } else {
        dt
    }
}

/// Simulated paths. Arrays are flat, indexed by path, agent, node, component.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n_agents: usize,
    pub n_paths: usize,
    pub nodes: usize,
    pub n: usize,
    pub m: usize,
    /// Empty for filter-only ensembles.
    pub states: Vec<f64>,
    pub filters: Vec<f64>,
    pub controls: Vec<f64>,
    pub seed: u64,
    pub dt: f64,
}

impl PathEnsemble {
    fn offset(&self, path: usize, agent: usize, node: usize) -> usize {
        (path * self.n_agents + agent) * self.nodes + node
    }

    pub fn has_states(&self) -> bool {
        !self.states.is_empty()
    }

    pub fn state(&self, path: usize, agent: usize, node: usize) -> &[f64] {
        let o = self.offset(path, agent, node) * self.n;
        &self.states[o..o + self.n]
    }

    pub fn filter(&self, path: usize, agent: usize, node: usize) -> &[f64] {
        let o = self.offset(path, agent, node) * self.n;
        &self.filters[o..o + self.n]
    }

    pub fn control(&self, path: usize, agent: usize, node: usize) -> &[f64] {
        let o = self.offset(path, agent, node) * self.m;
        &self.controls[o..o + self.m]
    }

    /// Population average `x^(N)` on one path.
    pub fn state_average(&self, path: usize, node: usize) -> DVector<f64> {
        let mut acc = DVector::zeros(self.n);
        for a in 0..self.n_agents {
            acc += DVector::from_column_slice(self.state(path, a, node));
        }
        acc / self.n_agents as f64
    }

    /// Cross-path mean and standard deviation of component `comp` of a per-node quantity.
    pub fn summary(&self, agent: usize, comp: usize, which: Quantity) -> Vec<(f64, f64)> {
        (0..self.nodes)
            .map(|node| {
                let vals: Vec<f64> = (0..self.n_paths)
                    .map(|p| match which {
                        Quantity::State => self.state(p, agent, node)[comp],
                        Quantity::Filter => self.filter(p, agent, node)[comp],
                        Quantity::Control => self.control(p, agent, node)[comp],
                    })
                    .collect();
                mean_std(&vals)
            })
            .collect()
    }
}

/// Per-path time average (left-point rule over `[0, T]`) of one component,
/// then the cross-path mean and its standard error.
pub fn time_averaged(ens: &PathEnsemble, agent: usize, comp: usize, which: Quantity) -> (f64, f64) {
    let steps = ens.nodes - 1;
    let per_path: Vec<f64> = (0..ens.n_paths)
        .map(|p| {
            (0..steps)
                .map(|k| match which {
                    Quantity::State => ens.state(p, agent, k)[comp],
                    Quantity::Filter => ens.filter(p, agent, k)[comp],
                    Quantity::Control => ens.control(p, agent, k)[comp],
                })
                .sum::<f64>()
                / steps as f64
        })
        .collect();
    let (mean, sd) = mean_std(&per_path);
    (mean, sd / (per_path.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    State,
    Filter,
    Control,
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_law(law: &FeedbackLaw, coeffs: &CoefficientSet, grid: &TimeGrid) -> Result<()> {
    coeffs.check_shapes(grid)?;
    if law.nodes() != grid.nodes() || law.l_ref.len() != grid.nodes() {
        return Err(LqError::Structural(format!(
            "feedback law has {} nodes, grid has {}",
            law.nodes(),
            grid.nodes()
        )));
    }
    Ok(())
}

fn check_paths(n_paths: usize) -> Result<u32> {
    if n_paths == 0 || n_paths > u32::MAX as usize {
        return Err(LqError::Argument(format!("invalid path count {n_paths}")));
    }
    Ok(n_paths as u32)
}

/// Filter paths `z^` from `x0` under the law; one agent per path.
pub fn simulate_filter(
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    check_law(law, coeffs, grid)?;
    check_paths(n_paths)?;
    let (nodes, dt, n, m) = (grid.nodes(), grid.dt(), coeffs.n(), coeffs.m());
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut noise = IncrementStream::new(seed, Domain::Filter, 0, p as u32, dt);
            let mut z = coeffs.x0.clone();
            let mut zs = Vec::with_capacity(nodes * n);
            let mut us = Vec::with_capacity(nodes * m);
            for k in 0..nodes {
                let u = law.control(k, &z)?;
                zs.extend_from_slice(z.as_slice());
                us.extend_from_slice(u.as_slice());
                if k + 1 < nodes {
                    let (dw, _) = noise.next_pair();
                    z = filter_step(coeffs, k, dt, &z, &u, &law.l_ref[k], dw);
                }
            }
            Ok((zs, us))
        })
        .collect::<Result<_>>()?;
    let mut filters = Vec::with_capacity(n_paths * nodes * n);
    let mut controls = Vec::with_capacity(n_paths * nodes * m);
    for (z, u) in per_path {
        filters.extend(z);
        controls.extend(u);
    }
    Ok(PathEnsemble {
        n_agents: 1,
        n_paths,
        nodes,
        n,
        m,
        states: Vec::new(),
        filters,
        controls,
        seed,
        dt,
    })
}

/// Joint simulation of `n_agents` true states and their filters; agent `i`'s
/// filter reads the same `W_i` increments as its state.
pub fn simulate_population(
    n_agents: usize,
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    let dt = grid.dt();
    population_with(n_agents, law, coeffs, grid, n_paths, seed, |a, p| {
        IncrementStream::new(seed, Domain::Population, a as u32, p as u32, dt)
    })
}

/// Population simulation reading agent `a`'s increments on path `p` from `noise(a, p)`.
pub(crate) fn population_with(
    n_agents: usize,
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    noise: impl Fn(usize, usize) -> IncrementStream + Sync,
) -> Result<PathEnsemble> {
    check_law(law, coeffs, grid)?;
    check_paths(n_paths)?;
    if n_agents == 0 || n_agents > u32::MAX as usize {
        return Err(LqError::Argument("population size must be at least 1".into()));
    }
    let (nodes, dt, n, m) = (grid.nodes(), grid.dt(), coeffs.n(), coeffs.m());
    type Block = (Vec<f64>, Vec<f64>, Vec<f64>);
    let per_path: Vec<Block> = (0..n_paths)
        .into_par_iter()
        .map(|p| -> Result<Block> {
            let mut noise: Vec<IncrementStream> = (0..n_agents).map(|a| noise(a, p)).collect();
            let mut xs = vec![coeffs.x0.clone(); n_agents];
            let mut zs = vec![coeffs.x0.clone(); n_agents];
            // Layout inside the block: agent-major, node, component.
            let mut sx = vec![0.0; n_agents * nodes * n];
            let mut sz = vec![0.0; n_agents * nodes * n];
            let mut su = vec![0.0; n_agents * nodes * m];
            for k in 0..nodes {
                let xbar = xs.iter().fold(DVector::zeros(n), |acc, x| acc + x) / n_agents as f64;
                for a in 0..n_agents {
                    let u = law.control(k, &zs[a])?;
                    let o = a * nodes + k;
                    sx[o * n..(o + 1) * n].copy_from_slice(xs[a].as_slice());
                    sz[o * n..(o + 1) * n].copy_from_slice(zs[a].as_slice());
                    su[o * m..(o + 1) * m].copy_from_slice(u.as_slice());
                    if k + 1 < nodes {
                        let (dw, dwt) = noise[a].next_pair();
                        xs[a] = state_step(coeffs, k, dt, &xs[a], &u, &xbar, dw, dwt);
                        zs[a] = filter_step(coeffs, k, dt, &zs[a], &u, &law.l_ref[k], dw);
                    }
                }
            }
            Ok((sx, sz, su))
        })
        .collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(n_paths * n_agents * nodes * n);
    let mut filters = Vec::with_capacity(states.capacity());
    let mut controls = Vec::with_capacity(n_paths * n_agents * nodes * m);
    for (x, z, u) in per_path {
        states.extend(x);
        filters.extend(z);
        controls.extend(u);
    }
    Ok(PathEnsemble {
        n_agents,
        n_paths,
        nodes,
        n,
        m,
        states,
        filters,
        controls,
        seed,
        dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl CostEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let (mean, sd) = mean_std(samples);
        Self {
            mean,
            std_error: sd / (samples.len() as f64).sqrt(),
            n_paths: samples.len(),
        }
    }
}

/// Monte-Carlo estimate of agent `agent_index`'s cost against the population average.
pub fn evaluate_cost(ens: &PathEnsemble, coeffs: &CoefficientSet, agent_index: usize) -> Result<CostEstimate> {
    if agent_index >= ens.n_agents {
        return Err(LqError::Argument(format!(
            "agent {agent_index} out of range for {} agents",
            ens.n_agents
        )));
    }
    if !ens.has_states() {
        return Err(LqError::Structural("ensemble carries no true states".into()));
    }
    if coeffs.nodes() != ens.nodes {
        return Err(LqError::Structural(
            "coefficients and ensemble disagree on the grid".into(),
        ));
    }
    let samples: Vec<f64> = (0..ens.n_paths)
        .map(|p| {
            let mut integral = 0.0;
            let mut e = DVector::zeros(ens.n);
            for k in 0..ens.nodes {
                e = DVector::from_column_slice(ens.state(p, agent_index, k)) - ens.state_average(p, k);
                let u = DVector::from_column_slice(ens.control(p, agent_index, k));
                integral += trapezoid_weight(k, ens.nodes, ens.dt) * running_cost(coeffs, k, &e, &u);
            }
            0.5 * (integral + terminal_cost(coeffs, &e))
        })
        .collect();
    Ok(CostEstimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConstantCoefficients, IblParams};
    use crate::riccati::{solve, PMethod};
    use proptest::prelude::{Just, Strategy};

    fn ibl_law(steps: usize) -> (CoefficientSet, TimeGrid, RiccatiSolution, FeedbackLaw) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let c = IblParams::default().coefficients(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        let law = build_feedback(&sol, &c).unwrap();
        (c, grid, sol, law)
    }

    #[test]
    fn zero_riccati_gives_zero_law() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let c = ConstantCoefficients::zeros(2, 1).on_grid(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        let law = build_feedback(&sol, &c).unwrap();
        assert!(law.k.iter().chain(&law.k_l).all(|m| m.amax() == 0.0));
        assert!(law.c_off.iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn ibl_gains_match_scalar_formula() {
        let (c, grid, sol, law) = ibl_law(200);
        let p = IblParams::default();
        for k in 0..grid.nodes() {
            let pk = sol.p[k][(0, 0)];
            let den = p.r + p.d * p.d * pk + p.d_tilde * p.d_tilde * pk;
            let gain = -(pk * p.big_b + p.c * pk * p.d) / den;
            assert!((law.k[k][(0, 0)] - gain).abs() < 1e-12);
            let lam = sol.lambda[k][(0, 0)];
            assert!((law.k_l[k][(0, 0)] + p.big_b * lam / den).abs() < 1e-12);
            let off = -(p.big_b * sol.phi[k][0] + p.d * pk * p.sigma + p.d_tilde * pk * p.sigma_tilde) / den;
            assert!((law.c_off[k][0] - off).abs() < 1e-12);
        }
        let _ = c;
    }

    #[test]
    fn noiseless_filter_is_euler_of_drift() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let mut k = IblParams::default().constant();
        k.sigma[0] = 0.0;
        k.c[(0, 0)] = 0.0;
        k.sigma_tilde[0] = 0.0;
        let c = k.on_grid(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        let law = build_feedback(&sol, &c).unwrap();
        let ens = simulate_filter(&law, &c, &grid, 3, 9).unwrap();
        let mut z = 1.0;
        let dt = grid.dt();
        for j in 0..grid.nodes() {
            for p in 0..3 {
                assert!((ens.filter(p, 0, j)[0] - z).abs() < 1e-12);
            }
            let u = law.k[j][(0, 0)] * z + law.k_l[j][(0, 0)] * sol.l[j][0] + law.c_off[j][0];
            z += dt * (1.7 * z + 2.8 * u + 1.5 * sol.l[j][0] + 2.0);
        }
    }

    #[test]
    fn filter_stays_at_zero_without_forcing() {
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let mut k = IblParams::default().constant();
        k.b_vec[0] = 0.0;
        k.x0[0] = 0.0;
        k.sigma[0] = 0.0;
        k.sigma_tilde[0] = 0.0;
        let c = k.on_grid(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        assert!(sol.phi.iter().all(|v| v[0] == 0.0));
        let law = build_feedback(&sol, &c).unwrap();
        let ens = simulate_filter(&law, &c, &grid, 4, 1).unwrap();
        assert!(ens.filters.iter().all(|v| *v == 0.0));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn relabelling_agents_permutes_paths(perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(), seed in 0u64..1000) {
            let (c, grid, _, law) = ibl_law(40);
            let dt = grid.dt();
            let base = simulate_population(5, &law, &c, &grid, 2, seed).unwrap();
            let moved = population_with(5, &law, &c, &grid, 2, seed, |a, p| {
                IncrementStream::new(seed, Domain::Population, perm[a] as u32, p as u32, dt)
            })
            .unwrap();
            for p in 0..2 {
                for (a, &b) in perm.iter().enumerate() {
                    for k in 0..grid.nodes() {
                        let (x, y) = (moved.state(p, a, k)[0], base.state(p, b, k)[0]);
                        proptest::prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
                        proptest::prop_assert_eq!(moved.filter(p, a, k), base.filter(p, b, k));
                    }
                }
            }
        }
    }

    #[test]
    fn euler_mean_error_is_first_order() {
        // Noiseless drift: E[x(T)] against a run with a quarter of the step.
        let x_t = |steps: usize| {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let mut k = IblParams::default().constant();
            k.sigma[0] = 0.0;
            k.sigma_tilde[0] = 0.0;
            k.c[(0, 0)] = 0.0;
            k.d_tilde[(0, 0)] = 0.0;
            let c = k.on_grid(&grid);
            let sol = solve(&c, &grid, PMethod::Direct).unwrap();
            let law = build_feedback(&sol, &c).unwrap();
            let ens = simulate_population(3, &law, &c, &grid, 1, 0).unwrap();
            ens.state_average(0, grid.steps())[0]
        };
        let e1 = (x_t(50) - x_t(200)).abs();
        let e2 = (x_t(100) - x_t(400)).abs();
        let ratio = e1 / e2;
        assert!((1.7..2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn single_agent_noiseless_population_is_deterministic_ode() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let mut k = IblParams::default().constant();
        k.sigma[0] = 0.0;
        k.sigma_tilde[0] = 0.0;
        k.c[(0, 0)] = 0.0;
        k.d_tilde[(0, 0)] = 0.0;
        let c = k.on_grid(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        let law = build_feedback(&sol, &c).unwrap();
        let ens = simulate_population(1, &law, &c, &grid, 2, 5).unwrap();
        // With one agent x^N = x, and the filter drift feeds l instead.
        let (mut x, mut z) = (1.0, 1.0);
        let dt = grid.dt();
        for j in 0..grid.nodes() {
            assert!((ens.state(1, 0, j)[0] - x).abs() < 1e-10);
            let u = law.k[j][(0, 0)] * z + law.k_l[j][(0, 0)] * sol.l[j][0] + law.c_off[j][0];
            x += dt * (1.7 * x + 2.8 * u + 1.5 * x + 2.0);
            z += dt * (1.7 * z + 2.8 * u + 1.5 * sol.l[j][0] + 2.0);
        }
    }

    #[test]
    fn constant_control_cost() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut k = ConstantCoefficients::zeros(1, 1);
        k.r[(0, 0)] = 2.0;
        let c = k.on_grid(&grid);
        let nodes = grid.nodes();
        let ens = PathEnsemble {
            n_agents: 2,
            n_paths: 3,
            nodes,
            n: 1,
            m: 1,
            states: vec![0.0; 3 * 2 * nodes],
            filters: vec![0.0; 3 * 2 * nodes],
            controls: vec![0.7; 3 * 2 * nodes],
            seed: 0,
            dt: grid.dt(),
        };
        let est = evaluate_cost(&ens, &c, 1).unwrap();
        assert!((est.mean - 2.0 * 0.49 / 2.0).abs() < 1e-14);
        assert_eq!(est.std_error, 0.0);
        assert!(evaluate_cost(&ens, &c, 2).is_err());
        let zero = PathEnsemble {
            controls: vec![0.0; 3 * 2 * nodes],
            ..ens
        };
        assert_eq!(evaluate_cost(&zero, &c, 0).unwrap().mean, 0.0);
    }

    #[test]
    fn deterministic_cost_matches_refined_quadrature() {
        // Two agents with different starting points and no noise: the gap
        // x_1 - x^N is available in closed form.
        let grid = TimeGrid::new(1.0, 4000).unwrap();
        let mut k = ConstantCoefficients::zeros(1, 1);
        k.a[(0, 0)] = -0.5;
        k.q[(0, 0)] = 1.0;
        k.g[(0, 0)] = 2.0;
        let c = k.on_grid(&grid);
        let nodes = grid.nodes();
        let mut states = Vec::new();
        for a in 0..2 {
            let x0 = if a == 0 { 1.0 } else { -1.0 };
            for j in 0..nodes {
                states.push(x0 * (-0.5 * grid.t(j)).exp());
            }
        }
        let ens = PathEnsemble {
            n_agents: 2,
            n_paths: 1,
            nodes,
            n: 1,
            m: 1,
            filters: states.clone(),
            states,
            controls: vec![0.0; 2 * nodes],
            seed: 0,
            dt: grid.dt(),
        };
        let est = evaluate_cost(&ens, &c, 0).unwrap();
        // e(t) = e^{-t/2}: 1/2 [ (1 - e^{-1}) + 2 e^{-1} ]
        let exact = 0.5 * ((1.0 - (-1.0f64).exp()) + 2.0 * (-1.0f64).exp());
        let fine = 200_000;
        let h = 1.0 / fine as f64;
        let mut q = 0.0;
        for j in 0..=fine {
            let w = if j == 0 || j == fine { 0.5 } else { 1.0 };
            q += w * h * (-(j as f64) * h).exp();
        }
        let refined = 0.5 * (q + 2.0 * (-1.0f64).exp());
        assert!((refined - exact).abs() < 1e-10);
        assert!((est.mean - refined).abs() < 1e-8, "{} vs {refined}", est.mean);
    }

    #[test]
    fn orthant_constraint_keeps_controls_nonnegative() {
        let (c, grid, _, law) = ibl_law(100);
        let law = law.with_constraint(ConstraintSet::NonnegativeOrthant);
        let ens = simulate_population(5, &law, &c, &grid, 4, 3).unwrap();
        assert!(ens.controls.iter().all(|u| *u >= 0.0));
        assert!(ens.controls.contains(&0.0));
    }
}
