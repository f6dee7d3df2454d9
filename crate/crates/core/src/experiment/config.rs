//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::TimeGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    GaussConvergence,
    GridConvergence,
    OracleCheck,
    BridgeCheck,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::GaussConvergence => "gauss-convergence",
            Mode::GridConvergence => "grid-convergence",
            Mode::OracleCheck => "oracle-check",
            Mode::BridgeCheck => "bridge-check",
        }
    }
}

/// `"uniform"` (tₙ = n/(N+1) for every swept N) or an explicit list of inner times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Named(String),
    Times(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Named("uniform".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaussProblem {
    /// Seeded random-eigenbasis pair with eigenvalues in [0.5, 2].
    #[default]
    Benchmark,
    /// `p₀ = p₁ = N(0, I)`.
    Standard,
}

/// Finite-state problem for `grid-convergence`: two discretized isotropic Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridProblem {
    /// Spatial dimension of the grid, 1 or 2.
    pub space_dim: usize,
    /// Points per axis.
    pub states: usize,
    pub lo: f64,
    pub hi: f64,
    pub mean0: Vec<f64>,
    pub var0: f64,
    pub mean1: Vec<f64>,
    pub var1: f64,
    pub sinkhorn_tol: f64,
}

impl Default for GridProblem {
    fn default() -> Self {
        Self {
            space_dim: 1,
            states: 15,
            lo: -2.0,
            hi: 2.0,
            mean0: vec![0.0],
            var0: 1.0,
            mean1: vec![0.0],
            var1: 1.0,
            sinkhorn_tol: 1e-15,
        }
    }
}

/// Settings for `oracle-check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCheck {
    /// Random instances for the closed-form vs IPF comparison.
    pub instances: usize,
    pub ipf_tol: f64,
    pub uvp_tol_percent: f64,
    pub cov_tol: f64,
    /// 1D grid for the Sinkhorn comparison.
    pub grid_states: usize,
    pub grid_half_width: f64,
    pub correlation_tol: f64,
}

impl Default for OracleCheck {
    fn default() -> Self {
        Self {
            instances: 10,
            ipf_tol: 1e-14,
            uvp_tol_percent: 1e-8,
            cov_tol: 1e-8,
            grid_states: 201,
            grid_half_width: 6.0,
            correlation_tol: 1e-3,
        }
    }
}

/// Settings for `bridge-check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeCheck {
    pub samples: usize,
    /// Allowed deviation in standard errors.
    pub se_multiple: f64,
    pub composition_tol: f64,
}

impl Default for BridgeCheck {
    fn default() -> Self {
        Self { samples: 100_000, se_multiple: 3.0, composition_tol: 1e-10 }
    }
}

/// Config file contents. Absent keys take mode-dependent defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub dim: Option<usize>,
    pub eps: Option<Vec<f64>>,
    pub n_inner: Option<Vec<usize>>,
    #[serde(default)]
    pub grid: GridSpec,
    pub max_iters: Option<usize>,
    pub threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Record wall-clock time. Off by default so that outputs are byte-reproducible.
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub problem: GaussProblem,
    #[serde(default)]
    pub grid_problem: GridProblem,
    #[serde(default)]
    pub oracle_check: OracleCheck,
    #[serde(default)]
    pub bridge_check: BridgeCheck,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
}

/// Fully specified configuration; echoed into every summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub mode: Mode,
    pub dim: usize,
    pub eps: Vec<f64>,
    pub n_inner: Vec<usize>,
    pub grid: GridSpec,
    pub max_iters: usize,
    pub threshold: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub timing: bool,
    pub problem: GaussProblem,
    pub grid_problem: GridProblem,
    pub oracle_check: OracleCheck,
    pub bridge_check: BridgeCheck,
}

pub const DEFAULT_N_SWEEP: [usize; 6] = [1, 2, 4, 8, 16, 32];

impl ResolvedConfig {
    pub fn resolve(mode: Mode, cfg: ExperimentConfig, overrides: Overrides) -> Result<Self> {
        if let Some(m) = cfg.mode {
            if m != mode {
                return Err(Error::Config(format!("config is for mode {}, invoked as {}", m.as_str(), mode.as_str())));
            }
        }
        let (dim, eps, n_inner, max_iters): (usize, Vec<f64>, Vec<usize>, usize) = match mode {
            Mode::GaussConvergence => (16, vec![1.0, 3.0, 10.0], DEFAULT_N_SWEEP.to_vec(), 100_000),
            Mode::GridConvergence => (1, vec![0.5], vec![3], 500),
            Mode::OracleCheck => (4, vec![1.0], vec![1], 100_000),
            Mode::BridgeCheck => (2, vec![1.0], vec![3], 1),
        };
        let n_inner = match (&cfg.grid, cfg.n_inner) {
            (GridSpec::Times(t), Some(n)) if n != [t.len()] => {
                return Err(Error::Config(format!("n_inner {n:?} contradicts {} explicit grid times", t.len())))
            }
            (GridSpec::Times(t), _) => vec![t.len()],
            (_, n) => n.unwrap_or(n_inner),
        };
        let resolved = Self {
            mode,
            dim: cfg.dim.unwrap_or(dim),
            eps: cfg.eps.unwrap_or(eps),
            n_inner,
            grid: cfg.grid,
            max_iters: cfg.max_iters.unwrap_or(max_iters),
            threshold: overrides.threshold.or(cfg.threshold).unwrap_or(1e-10),
            seed: overrides.seed.unwrap_or(cfg.seed),
            output_dir: overrides.output_dir.or(cfg.output_dir).unwrap_or_else(|| PathBuf::from("results")),
            timing: cfg.timing,
            problem: cfg.problem,
            grid_problem: cfg.grid_problem,
            oracle_check: cfg.oracle_check,
            bridge_check: cfg.bridge_check,
        };
        resolved.validate()?;
        Ok(resolved)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return bad(format!("eps must be a non-empty list of positive values, got {:?}", self.eps));
        }
        if self.n_inner.is_empty() || self.n_inner.contains(&0) {
            return bad(format!("n_inner must be a non-empty list of values >= 1, got {:?}", self.n_inner));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        match &self.grid {
            GridSpec::Named(s) if s != "uniform" => return bad(format!("grid must be \"uniform\" or a list of times, got {s:?}")),
            GridSpec::Times(t) => {
                TimeGrid::from_inner(t).map_err(|e| Error::Config(e.to_string()))?;
            }
            _ => {}
        }
        let g = &self.grid_problem;
        if !(1..=2).contains(&g.space_dim) || g.states < 2 || !(g.hi > g.lo) {
            return bad("grid_problem needs space_dim in {1, 2}, states >= 2 and hi > lo".into());
        }
        if g.mean0.len() != g.space_dim || g.mean1.len() != g.space_dim || !(g.var0 > 0.0) || !(g.var1 > 0.0) {
            return bad("grid_problem means must have space_dim entries and variances must be positive".into());
        }
        if self.oracle_check.instances == 0 || self.oracle_check.grid_states < 2 {
            return bad("oracle_check needs instances >= 1 and grid_states >= 2".into());
        }
        if self.bridge_check.samples < 2 {
            return bad("bridge_check.samples must be at least 2".into());
        }
        Ok(())
    }

    pub fn time_grid(&self, n_inner: usize) -> Result<TimeGrid> {
        match &self.grid {
            GridSpec::Times(t) => TimeGrid::from_inner(t),
            GridSpec::Named(_) => TimeGrid::uniform(n_inner),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_per_mode() {
        let c = ResolvedConfig::resolve(Mode::GaussConvergence, ExperimentConfig::default(), Overrides::default()).unwrap();
        assert_eq!(c.dim, 16);
        assert_eq!(c.n_inner, DEFAULT_N_SWEEP.to_vec());
        assert_eq!(c.threshold, 1e-10);
        let g = ResolvedConfig::resolve(Mode::GridConvergence, ExperimentConfig::default(), Overrides::default()).unwrap();
        assert_eq!(g.eps, vec![0.5]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml_str("epsilon = [1.0]").is_err());
        assert!(ExperimentConfig::from_toml_str("[grid_problem]\nstate = 3").is_err());
        let c = ExperimentConfig::from_toml_str("mode = \"gauss-convergence\"\ndim = 4\neps = [1.0, 3.0]\ngrid = [0.25, 0.5]").unwrap();
        assert_eq!(c.grid, GridSpec::Times(vec![0.25, 0.5]));
    }

    #[test]
    fn validation() {
        let parse = |s: &str, mode| ResolvedConfig::resolve(mode, ExperimentConfig::from_toml_str(s).unwrap(), Overrides::default());
        assert!(parse("eps = [0.0]", Mode::GaussConvergence).is_err());
        assert!(parse("n_inner = [0]", Mode::GaussConvergence).is_err());
        assert!(parse("threshold = 1.5", Mode::GaussConvergence).is_err());
        assert!(parse("grid = \"log\"", Mode::GaussConvergence).is_err());
        assert!(parse("grid = [0.5, 0.2]", Mode::GaussConvergence).is_err());
        assert!(parse("grid = [0.2, 0.5]\nn_inner = [3]", Mode::GaussConvergence).is_err());
        assert!(parse("mode = \"oracle-check\"", Mode::GaussConvergence).is_err());
        assert_eq!(parse("grid = [0.2, 0.5]", Mode::GaussConvergence).unwrap().n_inner, vec![2]);
    }

    #[test]
    fn overrides_win() {
        let o = Overrides { output_dir: Some("x".into()), seed: Some(9), threshold: Some(1e-6) };
        let c = ResolvedConfig::resolve(Mode::OracleCheck, ExperimentConfig::from_toml_str("seed = 3").unwrap(), o).unwrap();
        assert_eq!((c.seed, c.threshold), (9, 1e-6));
        assert_eq!(c.output_dir, PathBuf::from("x"));
    }
}
