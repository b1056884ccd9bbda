//! One function per subcommand. Each reads the resolved configuration, calls
//! into the library and hands tables to the sink.

use std::path::PathBuf;

use lqmfg::fbsde::{assemble_cc_system, feedback_on_proxy, picard_run, ContractionDiagnostics, PicardConfig};
use lqmfg::filtersim::{
    build_feedback, evaluate_cost, simulate_filter, simulate_population, time_averaged, FeedbackLaw, PathEnsemble,
    Quantity,
};
use lqmfg::model::{validate, CoefficientSet, ConstraintSet, TimeGrid};
use lqmfg::nashlab::{nash_experiment, AltStrategy, NashReport};
use lqmfg::riccati::{solve, PMethod, RiccatiSolution};
use lqmfg::LqError;

use crate::config::{RiccatiMethod, RunConfig};
use crate::output::{fmt_f64, Sink, Table};
use crate::CliError;

/// Column names for an `n`-vector quantity: `name` when scalar, `name_i` otherwise.
fn names(name: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![name.to_string()]
    } else {
        (0..n).map(|i| format!("{name}_{i}")).collect()
    }
}

/// Column names for an `n x n` matrix quantity.
fn matrix_names(name: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![name.to_string()]
    } else {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| format!("{name}_{i}{j}")))
            .collect()
    }
}

fn method(cfg: &RunConfig) -> PMethod {
    match cfg.solver.riccati_method {
        RiccatiMethod::Direct => PMethod::Direct,
        RiccatiMethod::Iterative => PMethod::Iterative {
            tol: cfg.solver.riccati_tol,
            max_iter: cfg.solver.riccati_max_iter,
        },
    }
}

/// Riccati solve; a stalled iteration leaves its difference history behind.
fn riccati(
    cfg: &RunConfig,
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    sink: &Sink,
) -> Result<RiccatiSolution, CliError> {
    match solve(coeffs, grid, method(cfg)) {
        Ok(sol) => Ok(sol),
        Err(LqError::NonConvergence {
            iterations,
            last_diff,
            history,
        }) => {
            let mut t = Table::new(["iter", "sup_diff"]);
            for (i, d) in history.iter().enumerate() {
                t.push_cells(vec![(i + 1).to_string(), fmt_f64(*d)]);
            }
            let path = sink.csv("riccati_iterations.csv", &t)?;
            Err(CliError::Solver {
                message: format!("Riccati iteration stalled after {iterations} passes (last difference {last_diff:e})"),
                diagnostics: Some(path),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn law(cfg: &RunConfig, coeffs: &CoefficientSet, sol: &RiccatiSolution) -> Result<FeedbackLaw, CliError> {
    Ok(build_feedback(sol, coeffs)?.with_constraint(cfg.constraint()?))
}

pub fn run_validate(cfg: &RunConfig, sink: &Sink) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let coeffs = cfg.coefficients(&grid)?;
    let report = validate(&coeffs, &grid)?;
    sink.json("validation.json", &report)?;
    println!(
        "validate: H1 {} H2 {} H3 {} lambda* {} sufficient condition {}",
        report.h1_ok,
        report.h2_ok,
        report.h3_ok,
        fmt_f64(report.lambda_star),
        report.theorem33_ok
    );
    if report.h1_ok && report.h2_ok {
        Ok(())
    } else {
        Err(CliError::Config(report.messages.join("; ")))
    }
}

fn riccati_table(sol: &RiccatiSolution, grid: &TimeGrid) -> Table {
    let n = sol.l[0].len();
    let mut cols = vec!["t".to_string()];
    for name in ["P", "Lambda", "Pi"] {
        cols.extend(matrix_names(name, n));
    }
    cols.extend(names("Phi", n));
    cols.extend(names("l", n));
    let mut t = Table::new(cols);
    for k in 0..grid.nodes() {
        let mut row = vec![grid.t(k)];
        for m in [&sol.p[k], &sol.lambda[k], &sol.pi[k]] {
            row.extend(m.transpose().iter());
        }
        row.extend(sol.phi[k].iter());
        row.extend(sol.l[k].iter());
        t.push(&row);
    }
    t
}

pub fn run_riccati(cfg: &RunConfig, sink: &Sink) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let coeffs = cfg.coefficients(&grid)?;
    let sol = riccati(cfg, &coeffs, &grid, sink)?;
    sink.csv("riccati.csv", &riccati_table(&sol, &grid))?;
    let r = sol.residuals;
    let mut t = Table::new(["P", "Lambda", "Phi", "l", "iterations"]);
    let mut cells: Vec<String> = [r.p, r.lambda, r.phi, r.l].into_iter().map(fmt_f64).collect();
    cells.push(sol.iteration_count.to_string());
    t.push_cells(cells);
    sink.csv("riccati_residuals.csv", &t)?;
    println!(
        "riccati: {} nodes, {} passes, residuals P {} Lambda {} Phi {} l {}",
        grid.nodes(),
        sol.iteration_count,
        fmt_f64(r.p),
        fmt_f64(r.lambda),
        fmt_f64(r.phi),
        fmt_f64(r.l)
    );
    Ok(())
}

/// Cross-path mean and standard error of the filter and the control per node.
fn filter_table(ens: &PathEnsemble, sol: &RiccatiSolution, grid: &TimeGrid) -> Table {
    let (n, m) = (ens.n, ens.m);
    let mut cols = vec!["t".to_string()];
    cols.extend(names("zhat_mean", n));
    cols.extend(names("zhat_se", n));
    cols.extend(names("u_mean", m));
    cols.extend(names("u_se", m));
    cols.extend(names("l", n));
    let root = (ens.n_paths as f64).sqrt();
    let z: Vec<_> = (0..n).map(|c| ens.summary(0, c, Quantity::Filter)).collect();
    let u: Vec<_> = (0..m).map(|c| ens.summary(0, c, Quantity::Control)).collect();
    let mut t = Table::new(cols);
    for k in 0..grid.nodes() {
        let mut row = vec![grid.t(k)];
        row.extend(z.iter().map(|s| s[k].0));
        row.extend(z.iter().map(|s| s[k].1 / root));
        row.extend(u.iter().map(|s| s[k].0));
        row.extend(u.iter().map(|s| s[k].1 / root));
        row.extend(sol.l[k].iter());
        t.push(&row);
    }
    t
}

/// Every agent's filter and control along the first path.
fn population_tables(ens: &PathEnsemble, grid: &TimeGrid) -> (Table, Table) {
    let agent_cols = |name: &str, dim: usize| {
        let mut cols = vec!["t".to_string()];
        for a in 0..ens.n_agents {
            cols.extend(names(&format!("{name}{}", a + 1), dim));
        }
        cols
    };
    let mut filters = Table::new(agent_cols("zhat_", ens.n));
    let mut controls = Table::new(agent_cols("u_", ens.m));
    for k in 0..grid.nodes() {
        let mut zr = vec![grid.t(k)];
        let mut ur = vec![grid.t(k)];
        for a in 0..ens.n_agents {
            zr.extend(ens.filter(0, a, k));
            ur.extend(ens.control(0, a, k));
        }
        filters.push(&zr);
        controls.push(&ur);
    }
    (filters, controls)
}

/// Time-averaged filter and control, mean and standard error over paths.
fn time_average_rows(ens: &PathEnsemble) -> Vec<(String, usize, f64, f64)> {
    let mut rows = Vec::new();
    for c in 0..ens.n {
        let (mean, se) = time_averaged(ens, 0, c, Quantity::Filter);
        rows.push(("zhat".to_string(), c, mean, se));
    }
    for c in 0..ens.m {
        let (mean, se) = time_averaged(ens, 0, c, Quantity::Control);
        rows.push(("u".to_string(), c, mean, se));
    }
    rows
}

pub fn run_simulate(cfg: &RunConfig, sink: &Sink) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let grid = cfg.grid()?;
    let coeffs = cfg.coefficients(&grid)?;
    let sol = riccati(cfg, &coeffs, &grid, sink)?;
    let law = law(cfg, &coeffs, &sol)?;

    let ens = simulate_filter(&law, &coeffs, &grid, cfg.monte_carlo.n_paths, seed)?;
    sink.csv("simulate.csv", &filter_table(&ens, &sol, &grid))?;
    let mut summary = Table::new(["quantity", "component", "time_mean", "std_error"]);
    let rows = time_average_rows(&ens);
    for (q, c, mean, se) in &rows {
        summary.push_cells(vec![q.clone(), c.to_string(), fmt_f64(*mean), fmt_f64(*se)]);
    }
    sink.csv("simulate_summary.csv", &summary)?;

    let pop = simulate_population(cfg.n_agents(), &law, &coeffs, &grid, 1, seed)?;
    let (filters, controls) = population_tables(&pop, &grid);
    sink.csv("population_filters.csv", &filters)?;
    sink.csv("population_controls.csv", &controls)?;
    let cost = evaluate_cost(&pop, &coeffs, 0)?;
    println!(
        "simulate: {} paths, time-averaged zhat {} (se {}), u {} (se {}); agent 1 cost on one population path {}",
        ens.n_paths,
        fmt_f64(rows[0].2),
        fmt_f64(rows[0].3),
        fmt_f64(rows[ens.n].2),
        fmt_f64(rows[ens.n].3),
        fmt_f64(cost.mean)
    );
    Ok(())
}

fn picard_table(diag: &ContractionDiagnostics) -> Table {
    let mut t = Table::new(["iter", "diffY", "diffZ", "diffZtilde", "ratio"]);
    for r in &diag.history {
        let ratio = r.ratio.map_or_else(String::new, fmt_f64);
        t.push_cells(vec![
            r.iter.to_string(),
            fmt_f64(r.diff_y),
            fmt_f64(r.diff_z),
            fmt_f64(r.diff_z_tilde),
            ratio,
        ]);
    }
    t
}

pub fn run_fbsde(cfg: &RunConfig, sink: &Sink) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let grid = cfg.grid()?;
    let coeffs = cfg.coefficients(&grid)?;
    let gamma = cfg.constraint()?;
    let problem = assemble_cc_system(&coeffs, &grid, gamma.clone())?;
    let s = &cfg.solver;
    let pc = PicardConfig {
        lambda: s.lambda,
        degree: s.degree,
        ridge: s.ridge,
        ..PicardConfig::new(s.picard_tol, s.picard_max_iter, cfg.monte_carlo.n_paths, seed)
    };
    let (state, diag) = picard_run(&problem, &pc)?;
    let log = sink.csv("picard.csv", &picard_table(&diag))?;
    if !diag.converged() {
        return Err(CliError::Solver {
            message: format!(
                "Picard iteration stopped ({:?}) after {} sweeps",
                diag.stop,
                diag.iterations()
            ),
            diagnostics: Some(log),
        });
    }

    // Riccati reference on the same proxy paths; only exact without a constraint.
    let reference = match solve(&coeffs, &grid, method(cfg)) {
        Ok(sol) => Some(feedback_on_proxy(
            &state,
            &build_feedback(&sol, &coeffs)?.with_constraint(gamma.clone()),
        )?),
        Err(_) => None,
    };
    let controls = state
        .controls
        .as_ref()
        .ok_or_else(|| CliError::Internal("solver returned no controls".into()))?;
    let (n, m, np) = (problem.n, problem.m, state.n_paths());
    let mut cols = vec!["t".to_string()];
    cols.extend(names("x_mean", n));
    cols.extend(names("y_mean", n));
    cols.extend(names("u_mean", m));
    if reference.is_some() {
        cols.extend(names("u_riccati_mean", m));
    }
    let mean =
        |f: &lqmfg::fbsde::PathField, k: usize, c: usize| (0..np).map(|p| f.get(p, k)[c]).sum::<f64>() / np as f64;
    let mut t = Table::new(cols);
    for k in 0..grid.nodes() {
        let mut row = vec![grid.t(k)];
        row.extend((0..n).map(|c| mean(&state.x, k, c)));
        row.extend((0..n).map(|c| mean(&state.y, k, c)));
        row.extend((0..m).map(|c| mean(controls, k, c)));
        if let Some(r) = &reference {
            row.extend((0..m).map(|c| mean(r, k, c)));
        }
        t.push(&row);
    }
    sink.csv("fbsde.csv", &t)?;

    let gap = match &reference {
        Some(r) => fmt_f64(controls.relative_l2(r)?),
        None => "n/a".into(),
    };
    if !matches!(gamma, ConstraintSet::FullSpace) && !controls.data.is_empty() {
        let lowest = controls.data.iter().copied().fold(f64::INFINITY, f64::min);
        println!("fbsde: smallest control value {}", fmt_f64(lowest));
    }
    println!(
        "fbsde: converged in {} sweeps, observed ratio {}, relative L2 gap to Riccati feedback {}",
        diag.iterations(),
        fmt_f64(diag.observed_ratio),
        gap
    );
    Ok(())
}

fn nash_table(r: &NashReport) -> Table {
    let mut t = Table::new([
        "N",
        "state_error",
        "cost_gap",
        "deviation_gap",
        "epsilon",
        "se_state_error",
        "se_cost_gap",
        "se_deviation_gap",
    ]);
    for (i, n) in r.population_sizes.iter().enumerate() {
        t.push_cells(vec![
            n.to_string(),
            fmt_f64(r.state_errors[i]),
            fmt_f64(r.cost_gaps[i]),
            fmt_f64(r.deviation_gaps[i]),
            fmt_f64(r.epsilons[i]),
            fmt_f64(r.state_error_se[i]),
            fmt_f64(r.cost_gap_se[i]),
            fmt_f64(r.deviation_se[i]),
        ]);
    }
    t
}

pub fn run_nash(cfg: &RunConfig, sink: &Sink) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let grid = cfg.grid()?;
    let coeffs = cfg.coefficients(&grid)?;
    let sol = riccati(cfg, &coeffs, &grid, sink)?;
    let law = law(cfg, &coeffs, &sol)?;
    let alts = [AltStrategy::Zero, AltStrategy::ScaledGain(1.5)];
    let report = nash_experiment(
        &cfg.monte_carlo.n_grid,
        &alts,
        &law,
        &coeffs,
        &grid,
        cfg.monte_carlo.reps,
        seed,
    )?;
    sink.json("nash_report.json", &report)?;
    sink.csv("nash_report.csv", &nash_table(&report))?;
    println!(
        "nash: state-error slope {} (se {}), cost-gap slope {} (se {}), deviations within epsilon: {}",
        fmt_f64(report.slopes.state_error.slope),
        fmt_f64(report.slopes.state_error.std_err),
        fmt_f64(report.slopes.cost_gap.slope),
        fmt_f64(report.slopes.cost_gap.std_err),
        report.deviations_within_epsilon()
    );
    Ok(())
}

/// The bank example end to end: Riccati curves, 20-bank filters and
/// controls, and the same population with a larger common-noise loading.
pub fn run_example_ibl(cfg: &RunConfig, sink: &Sink) -> Result<(), CliError> {
    let params = cfg
        .ibl_params()
        .ok_or_else(|| CliError::Config("example-ibl needs model.preset = \"ibl\"".into()))?;
    let seed = cfg.seed()?;
    let grid = cfg.grid()?;
    let mut comparison = Table::new(["D_tilde", "u_time_mean", "u_se", "zhat_time_mean", "zhat_se"]);
    let variants = [("", params.d_tilde), ("_high_dtilde", 3.0 * params.d_tilde)];
    for (suffix, d_tilde) in variants {
        let p = lqmfg::model::IblParams { d_tilde, ..params };
        let coeffs = p.coefficients(&grid);
        let sol = riccati(cfg, &coeffs, &grid, sink)?;
        let law = law(cfg, &coeffs, &sol)?;
        if suffix.is_empty() {
            sink.csv("ibl_riccati.csv", &riccati_table(&sol, &grid))?;
        }
        let pop = simulate_population(p.n_agents, &law, &coeffs, &grid, 1, seed)?;
        let (filters, controls) = population_tables(&pop, &grid);
        sink.csv(&format!("ibl_filters{suffix}.csv"), &filters)?;
        sink.csv(&format!("ibl_controls{suffix}.csv"), &controls)?;
        let ens = simulate_filter(&law, &coeffs, &grid, cfg.monte_carlo.n_paths, seed)?;
        let (zm, zs) = time_averaged(&ens, 0, 0, Quantity::Filter);
        let (um, us) = time_averaged(&ens, 0, 0, Quantity::Control);
        comparison.push(&[d_tilde, um, us, zm, zs]);
        println!(
            "example-ibl: D~ = {d_tilde}: P(0) {}, l(T) {}, time-averaged u {} (se {}), zhat {} (se {})",
            fmt_f64(sol.p[0][(0, 0)]),
            fmt_f64(sol.l[grid.steps()][0]),
            fmt_f64(um),
            fmt_f64(us),
            fmt_f64(zm),
            fmt_f64(zs)
        );
    }
    sink.csv("ibl_dtilde_comparison.csv", &comparison)?;
    Ok(())
}

/// Output directory: flag, then config, then the working directory.
pub fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}
