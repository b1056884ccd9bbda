//! Monte-Carlo checks of the epsilon-Nash program.
//!
//! One repetition simulates a population of `N` agents under the
//! decentralized law together with each agent's limiting state, all driven by
//! the same Brownian increments. The population average is compared with the
//! frozen mean field `l`, the N-agent cost with the limiting cost, and a
//! unilateral deviation of agent 0 with the equilibrium using common random
//! numbers.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LqError, Result};
use crate::filtersim::{filter_step, mean_std, running_cost, state_step, terminal_cost, trapezoid_weight, FeedbackLaw};
use crate::model::{CoefficientSet, TimeGrid};
use crate::noise::{Domain, IncrementStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    fn from_samples(v: &[f64]) -> Self {
        let (mean, sd) = mean_std(v);
        Self {
            mean,
            std_error: sd / (v.len() as f64).sqrt(),
        }
    }
}

/// Admissible replacements for agent 0's control.
#[derive(Debug, Clone, PartialEq)]
pub enum AltStrategy {
    Equilibrium,
    Zero,
    /// Equilibrium law with the state gain multiplied by the factor.
    ScaledGain(f64),
    Constant(DVector<f64>),
}

impl AltStrategy {
    pub fn label(&self) -> String {
        match self {
            AltStrategy::Equilibrium => "equilibrium".into(),
            AltStrategy::Zero => "zero".into(),
            AltStrategy::ScaledGain(s) => format!("gain_x{s}"),
            AltStrategy::Constant(v) => format!(
                "constant_{}",
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("_")
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct RepOutcome {
    /// `sup_t |x^(N)(t) - l(t)|^2`
    sup_err2: f64,
    /// Agent average of `J^N_i - J_i` on this repetition.
    cost_diff: f64,
    /// Agent 0's N-agent cost.
    cost0: f64,
}

fn check_inputs(
    n_agents: usize,
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    reps: usize,
) -> Result<()> {
    coeffs.check_shapes(grid)?;
    if law.nodes() != grid.nodes() {
        return Err(LqError::Structural("feedback law and grid disagree".into()));
    }
    if n_agents == 0 || n_agents > u32::MAX as usize {
        return Err(LqError::Argument("population size must be at least 1".into()));
    }
    if reps == 0 || reps > u32::MAX as usize {
        return Err(LqError::Argument("need at least one repetition".into()));
    }
    Ok(())
}

/// One repetition. `alt` replaces agent 0's control; the limiting states are
/// only simulated on equilibrium runs.
fn run_rep(
    n_agents: usize,
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    seed: u64,
    rep: usize,
    alt: &AltStrategy,
) -> Result<RepOutcome> {
    let (nodes, dt, n, m) = (grid.nodes(), grid.dt(), coeffs.n(), coeffs.m());
    let with_limit = matches!(alt, AltStrategy::Equilibrium);
    let scaled = match alt {
        AltStrategy::ScaledGain(s) => Some(law.with_scaled_gain(*s)),
        _ => None,
    };
    let mut noise: Vec<IncrementStream> = (0..n_agents)
        .map(|a| IncrementStream::new(seed, Domain::Nash(n_agents as u64), a as u32, rep as u32, dt))
        .collect();
    let mut xs = vec![coeffs.x0.clone(); n_agents];
    let mut zs = vec![coeffs.x0.clone(); n_agents];
    let mut lim = if with_limit {
        vec![coeffs.x0.clone(); n_agents]
    } else {
        Vec::new()
    };
    let mut cost_n = vec![0.0; n_agents];
    let mut cost_lim = vec![0.0; n_agents];
    let mut sup_err2 = 0.0_f64;

    for k in 0..nodes {
        let xbar = xs.iter().fold(DVector::zeros(n), |acc, x| acc + x) / n_agents as f64;
        let l = &law.l_ref[k];
        sup_err2 = sup_err2.max((&xbar - l).norm_squared());
        let w = trapezoid_weight(k, nodes, dt);
        let last = k + 1 == nodes;
        for a in 0..n_agents {
            let u = if a == 0 {
                match alt {
                    AltStrategy::Equilibrium => law.control(k, &zs[0])?,
                    AltStrategy::Zero => DVector::zeros(m),
                    AltStrategy::ScaledGain(_) => scaled
                        .as_ref()
                        .map_or_else(|| law.control(k, &zs[0]), |s| s.control(k, &zs[0]))?,
                    AltStrategy::Constant(v) => v.clone(),
                }
            } else {
                law.control(k, &zs[a])?
            };
            if a == 0 && (u.len() != m || !law.gamma.contains(&u, 1e-12)) {
                return Err(LqError::Admissibility(format!(
                    "{} leaves the control set at node {k}",
                    alt.label()
                )));
            }
            let e = &xs[a] - &xbar;
            cost_n[a] += w * running_cost(coeffs, k, &e, &u);
            if last {
                cost_n[a] += terminal_cost(coeffs, &e);
            }
            if with_limit {
                let el = &lim[a] - l;
                cost_lim[a] += w * running_cost(coeffs, k, &el, &u);
                if last {
                    cost_lim[a] += terminal_cost(coeffs, &el);
                }
            }
            if !last {
                let (dw, dwt) = noise[a].next_pair();
                xs[a] = state_step(coeffs, k, dt, &xs[a], &u, &xbar, dw, dwt);
                if with_limit {
                    lim[a] = state_step(coeffs, k, dt, &lim[a], &u, l, dw, dwt);
                }
                zs[a] = filter_step(coeffs, k, dt, &zs[a], &u, l, dw);
            }
        }
    }
    let cost_diff = if with_limit {
        cost_n.iter().zip(&cost_lim).map(|(a, b)| 0.5 * (a - b)).sum::<f64>() / n_agents as f64
    } else {
        0.0
    };
    if !sup_err2.is_finite() || !cost_n[0].is_finite() {
        return Err(LqError::Divergence {
            what: "population simulation".into(),
            step: nodes,
        });
    }
    Ok(RepOutcome {
        sup_err2,
        cost_diff,
        cost0: 0.5 * cost_n[0],
    })
}

fn run_reps(
    n_agents: usize,
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    reps: usize,
    seed: u64,
    alt: &AltStrategy,
) -> Result<Vec<RepOutcome>> {
    check_inputs(n_agents, law, coeffs, grid, reps)?;
    (0..reps)
        .into_par_iter()
        .map(|r| run_rep(n_agents, law, coeffs, grid, seed, r, alt))
        .collect()
}

/// Average over repetitions of `sup_t |x^(N)(t) - l(t)|^2`.
pub fn state_consistency_error(
    n_agents: usize,
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    reps: usize,
    seed: u64,
) -> Result<Estimate> {
    let out = run_reps(n_agents, law, coeffs, grid, reps, seed, &AltStrategy::Equilibrium)?;
    Ok(Estimate::from_samples(
        &out.iter().map(|o| o.sup_err2).collect::<Vec<_>>(),
    ))
}

/// `|J^N_i(u) - J_i(u_i)|` averaged over agents; the standard error is that of
/// the signed difference.
pub fn cost_gap(
    n_agents: usize,
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    reps: usize,
    seed: u64,
) -> Result<Estimate> {
    let out = run_reps(n_agents, law, coeffs, grid, reps, seed, &AltStrategy::Equilibrium)?;
    let e = Estimate::from_samples(&out.iter().map(|o| o.cost_diff).collect::<Vec<_>>());
    Ok(Estimate {
        mean: e.mean.abs(),
        ..e
    })
}

/// `J^N_0(u) - J^N_0(u_alt, u_{-0})` with common random numbers; positive
/// values mean the deviation pays.
pub fn deviation_test(
    n_agents: usize,
    alt: &AltStrategy,
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    reps: usize,
    seed: u64,
) -> Result<Estimate> {
    let base = run_reps(n_agents, law, coeffs, grid, reps, seed, &AltStrategy::Equilibrium)?;
    let dev = run_reps(n_agents, law, coeffs, grid, reps, seed, alt)?;
    let gains: Vec<f64> = base.iter().zip(&dev).map(|(b, d)| b.cost0 - d.cost0).collect();
    Ok(Estimate::from_samples(&gains))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_err: f64,
}

/// Least squares on `(log x, log y)`.
pub fn rate_fit(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(LqError::Argument("need at least 3 aligned points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(LqError::Argument("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LqError::Argument("abscissae are all equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let std_err = if lx.len() > 2 {
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RateFit {
        slope,
        intercept,
        std_err,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRow {
    pub population: usize,
    pub strategy: String,
    pub gap: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Slopes {
    pub state_error: RateFit,
    pub cost_gap: RateFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashReport {
    pub population_sizes: Vec<usize>,
    pub state_errors: Vec<f64>,
    pub state_error_se: Vec<f64>,
    pub cost_gaps: Vec<f64>,
    pub cost_gap_se: Vec<f64>,
    /// Largest deviation gain per population size (over the strategy library).
    pub deviation_gaps: Vec<f64>,
    pub deviation_se: Vec<f64>,
    /// `max(0, best gain) + 2 SE` per population size.
    pub epsilons: Vec<f64>,
    pub deviations: Vec<DeviationRow>,
    pub slopes: Slopes,
    pub seed: u64,
    pub reps: usize,
}

impl NashReport {
    /// True when every tested deviation stays within the reported epsilon.
    pub fn deviations_within_epsilon(&self) -> bool {
        self.deviations.iter().all(|row| {
            let i = self.population_sizes.iter().position(|n| *n == row.population);
            i.is_some_and(|i| row.gap <= self.epsilons[i])
        })
    }
}

/// Runs the state, cost and deviation studies over a grid of population sizes.
pub fn nash_experiment(
    populations: &[usize],
    alts: &[AltStrategy],
    law: &FeedbackLaw,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    reps: usize,
    seed: u64,
) -> Result<NashReport> {
    let mut report = NashReport {
        population_sizes: populations.to_vec(),
        state_errors: Vec::new(),
        state_error_se: Vec::new(),
        cost_gaps: Vec::new(),
        cost_gap_se: Vec::new(),
        deviation_gaps: Vec::new(),
        deviation_se: Vec::new(),
        epsilons: Vec::new(),
        deviations: Vec::new(),
        slopes: Slopes {
            state_error: RateFit {
                slope: f64::NAN,
                intercept: f64::NAN,
                std_err: f64::NAN,
            },
            cost_gap: RateFit {
                slope: f64::NAN,
                intercept: f64::NAN,
                std_err: f64::NAN,
            },
        },
        seed,
        reps,
    };
    for &n_agents in populations {
        let base = run_reps(n_agents, law, coeffs, grid, reps, seed, &AltStrategy::Equilibrium)?;
        let se = Estimate::from_samples(&base.iter().map(|o| o.sup_err2).collect::<Vec<_>>());
        let cg = Estimate::from_samples(&base.iter().map(|o| o.cost_diff).collect::<Vec<_>>());
        report.state_errors.push(se.mean);
        report.state_error_se.push(se.std_error);
        report.cost_gaps.push(cg.mean.abs());
        report.cost_gap_se.push(cg.std_error);

        let mut best = (f64::NEG_INFINITY, 0.0_f64);
        let mut worst_se = 0.0_f64;
        for alt in alts {
            let dev = run_reps(n_agents, law, coeffs, grid, reps, seed, alt)?;
            let gains: Vec<f64> = base.iter().zip(&dev).map(|(b, d)| b.cost0 - d.cost0).collect();
            let est = Estimate::from_samples(&gains);
            if est.mean > best.0 {
                best = (est.mean, est.std_error);
            }
            worst_se = worst_se.max(est.std_error);
            report.deviations.push(DeviationRow {
                population: n_agents,
                strategy: alt.label(),
                gap: est.mean,
                std_error: est.std_error,
            });
        }
        let best_gain = if alts.is_empty() { 0.0 } else { best.0 };
        report.deviation_gaps.push(best_gain);
        report.deviation_se.push(best.1);
        report.epsilons.push(best_gain.max(0.0) + 2.0 * worst_se);
    }
    if populations.len() >= 3 {
        let ns: Vec<f64> = populations.iter().map(|n| *n as f64).collect();
        report.slopes.state_error = rate_fit(&ns, &report.state_errors)?;
        report.slopes.cost_gap = rate_fit(&ns, &report.cost_gaps)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtersim::build_feedback;
    use crate::model::IblParams;
    use crate::riccati::{solve, PMethod};

    fn noiseless(steps: usize) -> (CoefficientSet, TimeGrid, FeedbackLaw) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let mut k = IblParams::default().constant();
        k.sigma[0] = 0.0;
        k.sigma_tilde[0] = 0.0;
        k.c[(0, 0)] = 0.0;
        k.d_tilde[(0, 0)] = 0.0;
        let c = k.on_grid(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        let law = build_feedback(&sol, &c).unwrap();
        (c, grid, law)
    }

    #[test]
    fn rate_fit_exact_powers() {
        let ns = [5.0, 10.0, 20.0, 40.0];
        let inv: Vec<f64> = ns.iter().map(|n| 1.0 / n).collect();
        let f = rate_fit(&ns, &inv).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12 && f.std_err < 1e-12);
        let sq: Vec<f64> = ns.iter().map(|n| 3.0 / n.sqrt()).collect();
        assert!((rate_fit(&ns, &sq).unwrap().slope + 0.5).abs() < 1e-12);
        assert!(rate_fit(&ns, &[2.0; 4]).unwrap().slope.abs() < 1e-12);
        assert!(rate_fit(&ns, &[1.0, 0.0, 1.0, 1.0]).is_err());
        assert!(rate_fit(&ns[..2], &inv[..2]).is_err());
    }

    #[test]
    fn noiseless_symmetric_population_tracks_l() {
        // Without noise every agent follows the same path. That path is the
        // Euler image of l, so the state gap is O(dt^2) in the squared norm
        // and the cost gap O(dt^2) as well.
        let run = |steps| {
            let (c, g, law) = noiseless(steps);
            let e = state_consistency_error(4, &law, &c, &g, 2, 1).unwrap();
            let j = cost_gap(4, &law, &c, &g, 2, 1).unwrap();
            assert_eq!(e.std_error, 0.0);
            (e.mean, j.mean)
        };
        let (e_coarse, j_coarse) = run(200);
        let (e_fine, j_fine) = run(800);
        assert!(e_fine < e_coarse / 10.0, "{e_coarse} {e_fine}");
        assert!(j_fine < j_coarse / 10.0, "{j_coarse} {j_fine}");
    }

    #[test]
    fn population_resting_at_l_has_zero_error() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let mut k = IblParams::default().constant();
        k.sigma[0] = 0.0;
        k.sigma_tilde[0] = 0.0;
        k.b_vec[0] = 0.0;
        k.x0[0] = 0.0;
        let c = k.on_grid(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        let law = build_feedback(&sol, &c).unwrap();
        assert_eq!(state_consistency_error(5, &law, &c, &grid, 3, 2).unwrap().mean, 0.0);
        assert_eq!(cost_gap(5, &law, &c, &grid, 3, 2).unwrap().mean, 0.0);
    }

    #[test]
    fn equilibrium_deviation_is_exactly_zero() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let c = IblParams::default().coefficients(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        let law = build_feedback(&sol, &c).unwrap();
        let d = deviation_test(6, &AltStrategy::Equilibrium, &law, &c, &grid, 8, 3).unwrap();
        assert_eq!(d.mean, 0.0);
        assert_eq!(d.std_error, 0.0);
    }

    #[test]
    fn inadmissible_alternative_is_rejected() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let c = IblParams::default().coefficients(&grid);
        let sol = solve(&c, &grid, PMethod::Direct).unwrap();
        let law = build_feedback(&sol, &c)
            .unwrap()
            .with_constraint(crate::model::ConstraintSet::NonnegativeOrthant);
        let alt = AltStrategy::Constant(DVector::from_element(1, -1.0));
        assert!(matches!(
            deviation_test(3, &alt, &law, &c, &grid, 2, 1),
            Err(LqError::Admissibility(_))
        ));
    }
}
