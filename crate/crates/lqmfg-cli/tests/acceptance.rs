//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so every line is printed; exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use lqmfg::fbsde::{assemble_cc_system, feedback_on_proxy, picard_run, PicardConfig};
use lqmfg::filtersim::{build_feedback, simulate_filter, time_averaged, Quantity};
use lqmfg::model::{project, CoefficientSet, ConstantCoefficients, ConstraintSet, IblParams, TimeGrid};
use lqmfg::nashlab::{nash_experiment, AltStrategy};
use lqmfg::noise::{Domain, IncrementStream};
use lqmfg::riccati::{closed_form_scalar_p, solve, solve_p_direct, solve_p_iterative, PMethod};
use nalgebra::{DMatrix, DVector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sup_diff(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn ibl_on(steps: usize, p: IblParams) -> (CoefficientSet, TimeGrid) {
    let grid = TimeGrid::new(1.0, steps).unwrap();
    (p.coefficients(&grid), grid)
}

fn riccati_correctness() -> Outcome {
    let (c, grid) = ibl_on(1000, IblParams::default());
    let start = Instant::now();
    let sol = solve(&c, &grid, PMethod::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let r = sol.residuals;
    let last = grid.steps();
    let worst = r.p.max(r.lambda).max(r.phi).max(r.l);
    let terminal = sol.p[last][(0, 0)] == 5.0
        && sol.lambda[last][(0, 0)] == -5.0
        && sol.pi[last][(0, 0)] == 0.0
        && sol.phi[last][0] == 0.0;
    let split = (0..grid.nodes())
        .map(|k| (&sol.pi[k] - &sol.p[k] - &sol.lambda[k]).amax())
        .fold(0.0, f64::max);
    outcome(
        worst < 1e-5 && terminal && split <= 1e-12 && secs < 1.0,
        format!(
            "residuals P {:.1e} Lambda {:.1e} Phi {:.1e} l {:.1e}; terminal values exact: {terminal}; \
             |Pi - P - Lambda| {split:.1e}; {secs:.3} s",
            r.p, r.lambda, r.phi, r.l
        ),
    )
}

/// Standard normal draws from the library's counter streams.
struct Draws(IncrementStream);

impl Draws {
    fn new(case: u32) -> Self {
        Self(IncrementStream::new(2024, Domain::Filter, case, 0, 1.0))
    }

    fn next(&mut self) -> f64 {
        self.0.next_pair().0
    }

    fn matrix(&mut self, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(2, 2, |_, _| scale * self.next())
    }

    fn spd(&mut self, floor: f64) -> DMatrix<f64> {
        let l = self.matrix(0.7);
        &l * l.transpose() + DMatrix::identity(2, 2) * floor
    }

    fn vector(&mut self, scale: f64) -> DVector<f64> {
        DVector::from_fn(2, |_, _| scale * self.next())
    }
}

/// A random two-dimensional configuration with the mean-field structure.
fn random_config(case: u32) -> ConstantCoefficients {
    let mut d = Draws::new(case);
    let mut k = ConstantCoefficients::zeros(2, 2);
    k.a = d.matrix(0.8);
    k.b = d.matrix(0.7);
    k.c = d.matrix(0.3);
    k.d = d.matrix(0.3);
    k.d_tilde = d.matrix(0.3);
    k.q = d.spd(0.1);
    k.r = d.spd(0.5);
    k.g = d.spd(0.0);
    k.delta = 0.5 * d.next().abs();
    k.f = DMatrix::identity(2, 2) * k.delta;
    k.b_vec = d.vector(0.5);
    k.sigma = d.vector(0.3);
    k.sigma_tilde = d.vector(0.3);
    k.x0 = d.vector(1.0);
    k
}

fn iterative_fidelity() -> Outcome {
    let mut cases: Vec<(String, CoefficientSet, TimeGrid)> = Vec::new();
    let (c, g) = ibl_on(1000, IblParams::default());
    cases.push(("ibl".into(), c, g));
    for case in 0..10 {
        let grid = TimeGrid::new(1.0, 400).unwrap();
        cases.push((format!("random {case}"), random_config(case).on_grid(&grid), grid));
    }
    let mut worst_gap = 0.0_f64;
    let mut worst_iters = 0;
    for (name, c, grid) in &cases {
        // The solver rejects any iterate with min eig(P_i - P_{i+1}) below -1e-10.
        let (p, iters) = match solve_p_iterative(c, grid, 1e-10, 200) {
            Ok(v) => v,
            Err(e) => return outcome(false, format!("{name}: {e}")),
        };
        let direct = solve_p_direct(c, grid).unwrap();
        worst_gap = worst_gap.max(sup_diff(&p, &direct));
        worst_iters = worst_iters.max(iters);
    }
    outcome(
        worst_gap < 1e-6 && worst_iters <= 200,
        format!(
            "{} configurations, monotone chains, at most {worst_iters} passes, sup |P_iter - P_direct| {worst_gap:.1e}",
            cases.len()
        ),
    )
}

fn closed_form_oracle() -> Outcome {
    let p = IblParams {
        c: 0.0,
        d: 0.0,
        d_tilde: 0.0,
        ..IblParams::default()
    };
    let (c, grid) = ibl_on(1000, p);
    let sol = solve(&c, &grid, PMethod::default()).unwrap();
    let cf = closed_form_scalar_p(p.big_a, p.a, p.big_b, p.eps, p.r, p.c_terminal, 1.0).unwrap();
    let mut p_err = 0.0_f64;
    let mut pi_max = 0.0_f64;
    let mut l_err = 0.0_f64;
    for k in 0..grid.nodes() {
        let t = grid.t(k);
        p_err = p_err.max((sol.p[k][(0, 0)] - cf.p_of_t(t)).abs());
        pi_max = pi_max.max(sol.pi[k][(0, 0)].abs());
        // Reduced mean equation l' = A l + b with A = 3.2.
        let e = (p.big_a * t).exp();
        let l_ode = e * p.x + p.b / p.big_a * (e - 1.0);
        l_err = l_err.max((sol.l[k][0] - l_ode).abs());
    }
    outcome(
        p_err < 1e-6 && pi_max < 1e-8 && l_err < 1e-8,
        format!("max |P - closed form| {p_err:.1e}, max |Pi| {pi_max:.1e}, max |l - ODE| {l_err:.1e}"),
    )
}

fn fbsde_riccati_equivalence() -> Outcome {
    let p = IblParams {
        big_b: 2.8 * 0.5,
        d_tilde: 2.0 * 0.5,
        ..IblParams::default()
    };
    let (c, grid) = ibl_on(200, p);
    let problem = assemble_cc_system(&c, &grid, ConstraintSet::FullSpace).unwrap();
    let start = Instant::now();
    let cfg = PicardConfig {
        degree: 2,
        ..PicardConfig::new(1e-3, 30, 10_000, 4)
    };
    let (state, diag) = picard_run(&problem, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ratios: Vec<String> = diag
        .history
        .iter()
        .map(|r| r.ratio.map_or("-".into(), |q| format!("{q:.2}")))
        .collect();
    let gap = if diag.converged() {
        let law = build_feedback(&solve(&c, &grid, PMethod::Direct).unwrap(), &c).unwrap();
        let reference = feedback_on_proxy(&state, &law).unwrap();
        state.controls.as_ref().unwrap().relative_l2(&reference).unwrap()
    } else {
        f64::NAN
    };
    outcome(
        diag.converged() && gap < 0.05 && diag.contracting_from(2) && secs < 120.0,
        format!(
            "stop {:?} after {} sweeps, ratios [{}], control gap {gap:.3}, {secs:.1} s",
            diag.stop,
            diag.iterations(),
            ratios.join(", ")
        ),
    )
}

fn constrained_consistency() -> Outcome {
    // Weak-coupling instance: B scaled by 0.05, no common-noise control loading.
    let p = IblParams {
        big_b: 2.8 * 0.05,
        d_tilde: 0.0,
        ..IblParams::default()
    };
    let (c, grid) = ibl_on(200, p);
    let gamma = ConstraintSet::NonnegativeOrthant;
    let problem = assemble_cc_system(&c, &grid, gamma.clone()).unwrap();
    let (state, diag) = picard_run(&problem, &PicardConfig::new(1e-3, 30, 4000, 5)).unwrap();
    let (Some(cands), Some(controls)) = (&state.candidates, &state.controls) else {
        return outcome(false, "solver kept no controls".into());
    };
    let lowest = controls.data.iter().copied().fold(f64::INFINITY, f64::min);
    let mut mismatches = 0usize;
    let mut active = 0usize;
    for node in 0..grid.nodes() {
        for path in 0..state.n_paths() {
            let cand = cands.vector(path, node);
            if cand[0] < 0.0 {
                active += 1;
            }
            if project(&gamma, &c.r[node], &cand).unwrap() != controls.vector(path, node) {
                mismatches += 1;
            }
        }
    }
    outcome(
        diag.converged() && lowest >= 0.0 && mismatches == 0,
        format!(
            "B x 0.05, D~ = 0: stop {:?} after {} sweeps, min control {lowest:.3e}, \
             {active} clipped candidates, {mismatches} re-projection mismatches",
            diag.stop,
            diag.iterations()
        ),
    )
}

fn nash_rates() -> Outcome {
    let (c, grid) = ibl_on(1000, IblParams::default());
    let law = build_feedback(&solve(&c, &grid, PMethod::default()).unwrap(), &c).unwrap();
    let start = Instant::now();
    let populations = [5, 10, 20, 40, 80, 160];
    let alts = [AltStrategy::Zero, AltStrategy::ScaledGain(1.5)];
    let report = nash_experiment(&populations, &alts, &law, &c, &grid, 64, 42).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let s = &report.slopes;
    let state_ok = (s.state_error.slope + 1.0).abs() <= 0.3;
    let cost_ok = (s.cost_gap.slope + 0.5).abs() <= 0.25;
    let dev_ok = report.deviations_within_epsilon();
    outcome(
        state_ok && cost_ok && dev_ok && secs < 300.0,
        format!(
            "state slope {:.3} (se {:.3}, target -1 +/- 0.3), cost slope {:.3} (se {:.3}, target -0.5 +/- 0.25), \
             deviations within epsilon: {dev_ok}, {secs:.1} s",
            s.state_error.slope, s.state_error.std_err, s.cost_gap.slope, s.cost_gap.std_err
        ),
    )
}

fn dtilde_direction() -> Outcome {
    let run = |d_tilde: f64| {
        let (c, grid) = ibl_on(
            1000,
            IblParams {
                d_tilde,
                ..IblParams::default()
            },
        );
        let law = build_feedback(&solve(&c, &grid, PMethod::default()).unwrap(), &c).unwrap();
        let ens = simulate_filter(&law, &c, &grid, 1000, 7).unwrap();
        (
            time_averaged(&ens, 0, 0, Quantity::Control),
            time_averaged(&ens, 0, 0, Quantity::Filter),
        )
    };
    let ((u2, su2), (z2, sz2)) = run(2.0);
    let ((u6, su6), (z6, sz6)) = run(6.0);
    let u_margin = (u2 - u6) / su2.hypot(su6);
    let z_margin = (z6 - z2) / sz2.hypot(sz6);
    outcome(
        u_margin > 2.0 && z_margin > 2.0,
        format!(
            "mean u {u2:.3} -> {u6:.3} ({u_margin:+.1} SE lower), mean zhat {z2:.3} -> {z6:.3} ({z_margin:+.1} SE higher)"
        ),
    )
}

type Files = BTreeMap<String, Vec<u8>>;

/// Every file under `dir`, by name.
fn snapshot(dir: &Path) -> Files {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        out.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            std::fs::read(&path).unwrap(),
        );
    }
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let weak = root.path().join("weak.json");
    std::fs::write(
        &weak,
        r#"{"model": {"preset": "ibl", "params": {"B": 0.14, "D_tilde": 0}},
            "grid": {"horizon": 1, "steps": 50}, "monte_carlo": {"n_paths": 1000, "seed": 3}}"#,
    )
    .unwrap();
    let weak = weak.to_string_lossy().into_owned();
    let runs: [(&str, Vec<&str>); 6] = [
        ("validate", vec![]),
        ("riccati", vec!["--steps", "1000"]),
        ("simulate", vec!["--steps", "200", "--n-paths", "300", "--seed", "11"]),
        ("fbsde", vec!["--config", &weak]),
        (
            "nash",
            vec!["--steps", "100", "--N-grid", "5,10,20", "--reps", "8", "--seed", "11"],
        ),
        (
            "example-ibl",
            vec!["--steps", "200", "--n-paths", "300", "--seed", "11"],
        ),
    ];
    let mut problems = Vec::new();
    let mut files = 0;
    for (cmd, args) in &runs {
        let mut reference: Option<(Option<i32>, Files)> = None;
        for (i, threads) in [None, Some("1"), Some("3"), Some("1")].into_iter().enumerate() {
            let out = root.path().join(format!("{cmd}-{i}"));
            let mut command = Command::new(env!("CARGO_BIN_EXE_lqmfg"));
            command.arg(cmd).args(args).arg("--out").arg(&out);
            match threads {
                Some(t) => command.env("LQMFG_THREADS", t),
                None => command.env_remove("LQMFG_THREADS"),
            };
            let status = command.output().unwrap().status.code();
            let files_now = snapshot(&out);
            match &reference {
                None => {
                    files += files_now.len();
                    reference = Some((status, files_now));
                }
                Some((s0, f0)) if *s0 == status && *f0 == files_now => {}
                Some(_) => problems.push(format!("{cmd} differs under threads {threads:?}")),
            }
        }
        if let Some((status, _)) = &reference {
            if *status != Some(0) {
                problems.push(format!("{cmd} exited with {status:?}"));
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} subcommands, {files} files, identical across 4 runs with 1, 3 and default workers",
                runs.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 8] = [
        ("Riccati correctness", riccati_correctness),
        ("iterative-scheme fidelity", iterative_fidelity),
        ("closed-form oracle", closed_form_oracle),
        ("FBSDE-Riccati equivalence", fbsde_riccati_equivalence),
        ("constrained consistency", constrained_consistency),
        ("epsilon-Nash rates", nash_rates),
        ("D~ directional claim", dtilde_direction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{tag} criterion {} ({name}): {}", i + 1, o.detail);
    }
    println!(
        "acceptance: {} of {} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
