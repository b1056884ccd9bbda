//! Run configuration: JSON schema, flag overrides and conversion to model data.

use std::path::{Path, PathBuf};

use lqmfg::model::{CoefficientSet, ConstantCoefficients, ConstraintSet, IblParams, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub constraint: ConstraintSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub monte_carlo: MonteCarloSection,
    /// Informational label; the subcommand decides what runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Either the named preset (with optional parameter overrides) or explicit coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<IblOverrides>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Coefficients>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Ibl,
}

/// Scalar bank-model parameters; unset fields keep their preset values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IblOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(rename = "A", skip_serializing_if = "Option::is_none")]
    pub big_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    pub big_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(rename = "C", skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(rename = "D", skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(rename = "D_tilde", skip_serializing_if = "Option::is_none")]
    pub d_tilde: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_tilde: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(rename = "c", skip_serializing_if = "Option::is_none")]
    pub c_terminal: Option<f64>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n_agents: Option<usize>,
}

impl IblOverrides {
    fn apply(&self, base: IblParams) -> IblParams {
        IblParams {
            x: self.x.unwrap_or(base.x),
            big_a: self.big_a.unwrap_or(base.big_a),
            a: self.a.unwrap_or(base.a),
            big_b: self.big_b.unwrap_or(base.big_b),
            b: self.b.unwrap_or(base.b),
            c: self.c.unwrap_or(base.c),
            sigma: self.sigma.unwrap_or(base.sigma),
            d: self.d.unwrap_or(base.d),
            d_tilde: self.d_tilde.unwrap_or(base.d_tilde),
            sigma_tilde: self.sigma_tilde.unwrap_or(base.sigma_tilde),
            eps: self.eps.unwrap_or(base.eps),
            r: self.r.unwrap_or(base.r),
            c_terminal: self.c_terminal.unwrap_or(base.c_terminal),
            n_agents: self.n_agents.unwrap_or(base.n_agents),
            horizon: base.horizon,
        }
    }
}

/// A coefficient given once (constant in time) or once per grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Matrix {
    Constant(Vec<Vec<f64>>),
    Sampled(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Vector {
    Constant(Vec<f64>),
    Sampled(Vec<Vec<f64>>),
}

/// Explicit coefficients. Matrices are lists of rows; omitted terms are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Matrix>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Matrix>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Matrix>,
    #[serde(rename = "C_tilde", default, skip_serializing_if = "Option::is_none")]
    pub c_tilde: Option<Matrix>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Matrix>,
    #[serde(rename = "D_tilde", default, skip_serializing_if = "Option::is_none")]
    pub d_tilde: Option<Matrix>,
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Matrix>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Matrix>,
    #[serde(rename = "H_tilde", default, skip_serializing_if = "Option::is_none")]
    pub h_tilde: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_vec: Option<Vector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_tilde: Option<Vector>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Matrix>,
    #[serde(rename = "R")]
    pub r: Matrix,
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSection {
    #[default]
    Full,
    Orthant,
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// `iterative` or `direct` integration of `P`.
    pub riccati_method: RiccatiMethod,
    pub riccati_tol: f64,
    pub riccati_max_iter: usize,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub lambda: f64,
    pub degree: usize,
    pub ridge: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiccatiMethod {
    Iterative,
    Direct,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            riccati_method: RiccatiMethod::Iterative,
            riccati_tol: 1e-10,
            riccati_max_iter: 200,
            picard_tol: 1e-3,
            picard_max_iter: 30,
            lambda: 0.0,
            degree: 2,
            ridge: lqmfg::fbsde::DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub n_paths: usize,
    pub reps: usize,
    pub n_agents: Option<usize>,
    pub n_grid: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            n_paths: 1000,
            reps: 64,
            n_agents: None,
            n_grid: vec![5, 10, 20, 40, 80, 160],
            seed: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub n_paths: Option<usize>,
    pub reps: Option<usize>,
    pub n_grid: Option<Vec<usize>>,
    pub d_tilde: Option<f64>,
}

impl RunConfig {
    /// The bank example on a 1000-step grid, without a seed.
    pub fn ibl() -> Self {
        Self {
            model: ModelSection {
                preset: Some(Preset::Ibl),
                params: None,
                coefficients: None,
            },
            grid: GridSection::default(),
            constraint: ConstraintSection::default(),
            solver: SolverSection::default(),
            monte_carlo: MonteCarloSection::default(),
            experiment: None,
            output_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.monte_carlo.seed = Some(seed);
        }
        match (o.steps, o.dt) {
            (Some(steps), Some(dt)) if (self.grid.horizon / steps as f64 - dt).abs() > 1e-12 * dt => {
                return Err(CliError::Config(format!("--steps {steps} and --dt {dt} disagree")));
            }
            (Some(steps), _) => self.grid.steps = steps,
            (None, Some(dt)) => {
                if dt.is_nan() || dt <= 0.0 {
                    return Err(CliError::Config(format!("--dt must be positive, got {dt}")));
                }
                let steps = (self.grid.horizon / dt).round();
                if (self.grid.horizon / steps - dt).abs() > 1e-9 * dt {
                    return Err(CliError::Config(format!("--dt {dt} does not divide the horizon")));
                }
                self.grid.steps = steps as usize;
            }
            (None, None) => {}
        }
        if let Some(n) = o.n_paths {
            self.monte_carlo.n_paths = n;
        }
        if let Some(r) = o.reps {
            self.monte_carlo.reps = r;
        }
        if let Some(g) = &o.n_grid {
            self.monte_carlo.n_grid = g.clone();
        }
        if let Some(dt) = o.d_tilde {
            if self.model.preset.is_none() {
                return Err(CliError::Config("--dtilde applies to the ibl preset only".into()));
            }
            self.model.params.get_or_insert_with(IblOverrides::default).d_tilde = Some(dt);
        }
        self.check()
    }

    fn check(&self) -> Result<(), CliError> {
        match (&self.model.preset, &self.model.coefficients) {
            (Some(_), None) => {}
            (None, Some(_)) if self.model.params.is_none() => {}
            (None, Some(_)) => return Err(CliError::Config("model.params needs a preset".into())),
            _ => {
                return Err(CliError::Config(
                    "model needs exactly one of preset and coefficients".into(),
                ))
            }
        }
        if self.monte_carlo.n_grid.is_empty() {
            return Err(CliError::Config("monte_carlo.n_grid is empty".into()));
        }
        Ok(())
    }

    /// Seed, required by every stochastic subcommand.
    pub fn seed(&self) -> Result<u64, CliError> {
        self.monte_carlo
            .seed
            .ok_or_else(|| CliError::Config("a seed is required (monte_carlo.seed or --seed)".into()))
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.grid.horizon, self.grid.steps).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn ibl_params(&self) -> Option<IblParams> {
        self.model.preset.map(|_| {
            let base = IblParams {
                horizon: self.grid.horizon,
                ..IblParams::default()
            };
            self.model.params.as_ref().map_or(base, |o| o.apply(base))
        })
    }

    /// Population size for single-population runs.
    pub fn n_agents(&self) -> usize {
        self.monte_carlo
            .n_agents
            .or_else(|| self.ibl_params().map(|p| p.n_agents))
            .unwrap_or(20)
    }

    pub fn coefficients(&self, grid: &TimeGrid) -> Result<CoefficientSet, CliError> {
        let coeffs = match (self.ibl_params(), &self.model.coefficients) {
            (Some(p), _) => p.coefficients(grid),
            (None, Some(c)) => c.build(grid)?,
            (None, None) => unreachable!("checked on load"),
        };
        coeffs.check_shapes(grid).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(coeffs)
    }

    pub fn constraint(&self) -> Result<ConstraintSet, CliError> {
        Ok(match &self.constraint {
            ConstraintSection::Full => ConstraintSet::FullSpace,
            ConstraintSection::Orthant => ConstraintSet::NonnegativeOrthant,
            ConstraintSection::Box { lower, upper } => {
                ConstraintSet::boxed(DVector::from_column_slice(lower), DVector::from_column_slice(upper))
                    .map_err(|e| CliError::Config(e.to_string()))?
            }
        })
    }

    /// SHA-256 of the resolved configuration in its canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("configuration serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(CliError::Config(format!(
            "{what} must be a non-empty rectangular list of rows"
        )));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn sample_matrix(m: &Matrix, nodes: usize, what: &str) -> Result<Vec<DMatrix<f64>>, CliError> {
    match m {
        Matrix::Constant(rows) => Ok(vec![rows_to_matrix(rows, what)?; nodes]),
        Matrix::Sampled(samples) => {
            if samples.len() != nodes {
                return Err(CliError::Config(format!(
                    "{what} has {} samples, grid has {nodes} nodes",
                    samples.len()
                )));
            }
            samples.iter().map(|rows| rows_to_matrix(rows, what)).collect()
        }
    }
}

fn sample_vector(v: &Vector, nodes: usize, what: &str) -> Result<Vec<DVector<f64>>, CliError> {
    match v {
        Vector::Constant(x) => Ok(vec![DVector::from_column_slice(x); nodes]),
        Vector::Sampled(samples) => {
            if samples.len() != nodes {
                return Err(CliError::Config(format!(
                    "{what} has {} samples, grid has {nodes} nodes",
                    samples.len()
                )));
            }
            Ok(samples.iter().map(|x| DVector::from_column_slice(x)).collect())
        }
    }
}

impl Coefficients {
    fn build(&self, grid: &TimeGrid) -> Result<CoefficientSet, CliError> {
        let nodes = grid.nodes();
        let n = self.x0.len();
        let r = sample_matrix(&self.r, nodes, "R")?;
        let m = r[0].nrows();
        let zero = ConstantCoefficients::zeros(n, m).on_grid(grid);
        let mat = |x: &Option<Matrix>, what: &str, default: Vec<DMatrix<f64>>| match x {
            Some(x) => sample_matrix(x, nodes, what),
            None => Ok(default),
        };
        let vec = |x: &Option<Vector>, what: &str, default: Vec<DVector<f64>>| match x {
            Some(x) => sample_vector(x, nodes, what),
            None => Ok(default),
        };
        Ok(CoefficientSet {
            a: mat(&self.a, "A", zero.a.clone())?,
            b: mat(&self.b, "B", zero.b.clone())?,
            c: mat(&self.c, "C", zero.c.clone())?,
            c_tilde: mat(&self.c_tilde, "C_tilde", zero.c_tilde.clone())?,
            d: mat(&self.d, "D", zero.d.clone())?,
            d_tilde: mat(&self.d_tilde, "D_tilde", zero.d_tilde.clone())?,
            f: mat(&self.f, "F", zero.f.clone())?,
            h: mat(&self.h, "H", zero.h.clone())?,
            h_tilde: mat(&self.h_tilde, "H_tilde", zero.h_tilde.clone())?,
            b_vec: vec(&self.b_vec, "b_vec", zero.b_vec.clone())?,
            sigma: vec(&self.sigma, "sigma", zero.sigma.clone())?,
            sigma_tilde: vec(&self.sigma_tilde, "sigma_tilde", zero.sigma_tilde.clone())?,
            q: mat(&self.q, "Q", zero.q.clone())?,
            r,
            g: match &self.g {
                Some(rows) => rows_to_matrix(rows, "G")?,
                None => zero.g.clone(),
            },
            x0: DVector::from_column_slice(&self.x0),
            delta: self.delta,
            kappa: self.kappa.unwrap_or(zero.kappa),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips() {
        let cfg = RunConfig::ibl();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{"model": {"preset": "ibl"}, "grid": {"horizon": 1, "steps": 10, "stpes": 3}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let bad = r#"{"model": {"preset": "ibl", "params": {"Dtilde": 6}}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
    }

    #[test]
    fn explicit_scalar_model_matches_preset() {
        let text = r#"{"model": {"coefficients": {
            "A": [[1.7]], "B": [[2.8]], "C": [[0.6]], "D_tilde": [[2.0]], "F": [[1.5]],
            "b_vec": [2.0], "sigma": [0.8], "sigma_tilde": [0.3],
            "Q": [[3.3]], "R": [[2.5]], "G": [[5.0]], "x0": [1.0], "delta": 1.5}},
            "grid": {"horizon": 1.0, "steps": 20}}"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        let grid = cfg.grid().unwrap();
        let preset = RunConfig {
            grid: cfg.grid.clone(),
            ..RunConfig::ibl()
        };
        let (mut explicit, preset) = (cfg.coefficients(&grid).unwrap(), preset.coefficients(&grid).unwrap());
        // The preset forms A - a = 3.2 - 1.5 in floating point.
        assert!((explicit.a[0][(0, 0)] - preset.a[0][(0, 0)]).abs() < 1e-15);
        explicit.a = preset.a.clone();
        assert_eq!(explicit, preset);
    }

    #[test]
    fn overrides_change_the_hash() {
        let base = RunConfig::ibl();
        let mut moved = base.clone();
        moved
            .apply(&Overrides {
                d_tilde: Some(6.0),
                ..Overrides::default()
            })
            .unwrap();
        assert_ne!(base.hash(), moved.hash());
        assert_eq!(moved.ibl_params().unwrap().d_tilde, 6.0);
        assert_eq!(base.hash(), RunConfig::ibl().hash());
    }

    #[test]
    fn dt_and_steps_must_agree() {
        let mut cfg = RunConfig::ibl();
        cfg.apply(&Overrides {
            dt: Some(0.01),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.grid.steps, 100);
        let clash = Overrides {
            dt: Some(0.01),
            steps: Some(50),
            ..Overrides::default()
        };
        assert!(cfg.apply(&clash).is_err());
        assert!(cfg.seed().is_err());
    }
}
