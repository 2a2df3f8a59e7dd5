//! Experiment configuration, read from JSON or TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::averaging::{CoefficientGrid, TabulatedAveraged};
use crate::deviation::{jacobian_fd, LimitOUSpec};
use crate::error::{Error, Result};
use crate::frozen::CloudConfig;
use crate::poisson::{HomogenizationConfig, PoissonConfig};
use crate::sde::{AveragedDynamics, FnAveraged};
use crate::system::{builtin_nonlinear, builtin_periodic_ou, builtin_quasi_periodic, NonlinearParams, SystemSpec};

use super::panel::TestFunction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    PeriodicOu {
        #[serde(default = "one")]
        c: f64,
        #[serde(default = "one")]
        kappa: f64,
        #[serde(default = "one")]
        g0: f64,
    },
    QuasiPeriodic {
        #[serde(default = "one")]
        c1: f64,
        #[serde(default = "one")]
        c2: f64,
        #[serde(default = "one")]
        kappa: f64,
        #[serde(default = "one")]
        g0: f64,
    },
    Nonlinear {
        #[serde(default = "one")]
        forcing: f64,
        #[serde(default = "one")]
        slow_noise: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::PeriodicOu {
            c: 1.0,
            kappa: 1.0,
            g0: 1.0,
        }
    }
}

impl SystemConfig {
    pub fn build(&self) -> Result<SystemSpec> {
        match *self {
            SystemConfig::PeriodicOu { c, kappa, g0 } => builtin_periodic_ou(c, kappa, g0),
            SystemConfig::QuasiPeriodic { c1, c2, kappa, g0 } => builtin_quasi_periodic(c1, c2, kappa, g0),
            SystemConfig::Nonlinear { forcing, slow_noise } => {
                builtin_nonlinear(NonlinearParams { forcing, slow_noise })
            }
        }
    }
}

/// Coefficient tables replacing missing oracles, in the [`CoefficientGrid`]
/// JSON format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSources {
    pub double_bar_f: Option<PathBuf>,
    pub bar_g: Option<PathBuf>,
    pub double_bar_sigma: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AverageSection {
    pub y_grid: Vec<f64>,
    pub t_avg: Option<f64>,
    pub n_nodes: usize,
    /// Also tabulate `Σ̄̄`.
    pub homogenized: bool,
}

impl Default for AverageSection {
    fn default() -> Self {
        Self {
            y_grid: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            t_avg: None,
            n_nodes: 64,
            homogenized: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoissonSection {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub solver: PoissonConfig,
}

impl Default for PoissonSection {
    fn default() -> Self {
        Self {
            t: 0.0,
            x: vec![1.0],
            y: vec![0.0],
            solver: PoissonConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KappaSection {
    pub y: Vec<f64>,
    pub t_list: Vec<f64>,
    /// Also estimate `κ3`; needs multiples of the node spacing in `t_list`.
    pub kappa3: bool,
    pub homogenization: HomogenizationConfig,
}

impl Default for KappaSection {
    fn default() -> Self {
        let p = 2.0 * std::f64::consts::PI;
        Self {
            y: vec![1.0],
            t_list: [0usize, 1, 2, 4, 8].iter().map(|&k| (k as f64 + 0.25) * p).collect(),
            kappa3: false,
            homogenization: HomogenizationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    /// Horizon `T` of the sweeps.
    pub horizon: f64,
    /// Strictly decreasing, in `(0, 1]`.
    pub eps_list: Vec<f64>,
    /// Moment order of strong and fluctuation errors.
    pub q: f64,
    pub n_paths: usize,
    /// Paths of the limit ensemble in weak sweeps; `n_paths` when absent.
    pub limit_paths: Option<usize>,
    /// Macro grid nodes on `[0, T]` (supremum grid and `Ȳ` step).
    pub macro_steps: usize,
    /// Micro step as a fraction of `ε`.
    pub h_rel: f64,
    /// Steps of the limit equation on `[0, T]`; a multiple of `macro_steps`.
    pub limit_steps: usize,
    /// Fast initial state; the forced mean at time 0 when absent (or zero).
    pub x0: Option<Vec<f64>>,
    pub y0: Vec<f64>,
    pub seed: u64,
    pub test_functions: Vec<TestFunction>,
    pub out_dir: PathBuf,
    pub tables: TableSources,
    pub cloud: CloudConfig,
    pub average: AverageSection,
    pub poisson: PoissonSection,
    pub kappa: KappaSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            horizon: 1.0,
            eps_list: log_spaced(1e-1, 1e-3, 5),
            q: 2.0,
            n_paths: 10_000,
            limit_paths: None,
            macro_steps: 100,
            h_rel: 0.01,
            limit_steps: 1000,
            x0: None,
            y0: vec![0.0],
            seed: 0,
            test_functions: TestFunction::default_panel(),
            out_dir: PathBuf::from("out"),
            tables: TableSources::default(),
            cloud: CloudConfig::default(),
            average: AverageSection::default(),
            poisson: PoissonSection::default(),
            kappa: KappaSection::default(),
        }
    }
}

/// `n` points from `hi` down to `lo`, equally spaced in `log10`.
pub fn log_spaced(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.log10(), lo.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

impl ExperimentConfig {
    /// Parse by file extension: `.toml` as TOML, anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.eps_list.is_empty() {
            return bad("eps_list is empty".into());
        }
        if self.eps_list.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return bad(format!("eps_list {:?} must lie in (0, 1]", self.eps_list));
        }
        if self.eps_list.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("eps_list {:?} must be strictly decreasing", self.eps_list));
        }
        if self.n_paths < 100 || self.limit_paths.is_some_and(|n| n < 100) {
            return bad("at least 100 paths are required".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon {} must be positive", self.horizon));
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return bad(format!("q {} must be positive", self.q));
        }
        if self.macro_steps == 0 || self.limit_steps == 0 || !self.limit_steps.is_multiple_of(self.macro_steps) {
            return bad("limit_steps must be a positive multiple of macro_steps".into());
        }
        if !(self.h_rel > 0.0 && self.h_rel <= 1.0) {
            return bad(format!("h_rel {} must lie in (0, 1]", self.h_rel));
        }
        for f in &self.test_functions {
            f.validate()?;
        }
        self.cloud.validate()
    }

    pub fn system(&self) -> Result<SystemSpec> {
        let sys = self.system.build()?;
        if self.y0.len() != sys.d2() {
            return Err(Error::Config(format!(
                "y0 has {} entries, system needs {}",
                self.y0.len(),
                sys.d2()
            )));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != sys.d1() {
                return Err(Error::Config(format!(
                    "x0 has {} entries, system needs {}",
                    x0.len(),
                    sys.d1()
                )));
            }
        }
        Ok(sys)
    }

    pub fn x0(&self, sys: &SystemSpec) -> Vec<f64> {
        match (&self.x0, &sys.oracles.invariant_mean) {
            (Some(x), _) => x.clone(),
            (None, Some(m)) => m(0.0, &self.y0),
            (None, None) => vec![0.0; sys.d1()],
        }
    }

    /// Averaged dynamics from oracles, else from the configured tables.
    pub fn averaged(&self, sys: &SystemSpec) -> Result<Box<dyn AveragedDynamics>> {
        if let Ok(a) = FnAveraged::from_oracles(sys) {
            return Ok(Box::new(a));
        }
        match (&self.tables.double_bar_f, &self.tables.bar_g) {
            (Some(f), Some(g)) => Ok(Box::new(TabulatedAveraged::new(
                CoefficientGrid::load_json(f)?,
                CoefficientGrid::load_json(g)?,
            )?)),
            _ => Err(Error::MissingCoefficients(format!(
                "{} has no averaged oracles and no tables were configured",
                sys.name()
            ))),
        }
    }

    /// Limit coefficients from oracles, else from the configured tables
    /// (Jacobians by central differences over one table cell).
    pub fn limit_spec(&self, sys: &SystemSpec) -> Result<LimitOUSpec> {
        let spec = match LimitOUSpec::from_oracles(sys) {
            Ok(s) => s,
            Err(_) => {
                let (Some(f), Some(g), Some(s)) = (
                    &self.tables.double_bar_f,
                    &self.tables.bar_g,
                    &self.tables.double_bar_sigma,
                ) else {
                    return Err(Error::MissingCoefficients(format!(
                        "{} needs double_bar_f, bar_g and double_bar_sigma tables",
                        sys.name()
                    )));
                };
                tabulated_limit(
                    CoefficientGrid::load_json(f)?,
                    CoefficientGrid::load_json(g)?,
                    CoefficientGrid::load_json(s)?,
                )?
            }
        };
        let probes: Vec<Vec<f64>> = [-2.0, -0.5, 0.0, 0.5, 2.0]
            .iter()
            .map(|d| self.y0.iter().map(|y| y + d).collect())
            .collect();
        Ok(spec.freeze_if_constant(&probes, 1e-8))
    }
}

fn tabulated_limit(f: CoefficientGrid, g: CoefficientGrid, s: CoefficientGrid) -> Result<LimitOUSpec> {
    if f.shape != (1, 1) || g.shape.0 != 1 || s.shape != (1, 1) {
        return Err(Error::Config("tables must describe one slow dimension".into()));
    }
    let m2 = g.shape.1;
    let h = f
        .y_grid
        .windows(2)
        .chain(g.y_grid.windows(2))
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
        / 2.0;
    let interp = |t: &CoefficientGrid, y: f64, n: usize| {
        let mut out = vec![0.0; n];
        t.interpolate(y, &mut out);
        out
    };
    let f2 = f.clone();
    let g2 = g.clone();
    Ok(LimitOUSpec::new(
        1,
        m2,
        std::sync::Arc::new(move |y| {
            jacobian_fd(&|z: &[f64]| Ok(interp(&f2, z[0], 1)), y, h).expect("table interpolation is finite")
        }),
        std::sync::Arc::new(move |y| {
            let j = jacobian_fd(&|z: &[f64]| Ok(interp(&g2, z[0], m2)), y, h).expect("table interpolation is finite");
            (0..m2)
                .map(|k| nalgebra::DMatrix::from_element(1, 1, j[(k, 0)]))
                .collect()
        }),
        std::sync::Arc::new(move |y| nalgebra::DMatrix::from_element(1, 1, interp(&s, y[0], 1)[0])),
    ))
}
