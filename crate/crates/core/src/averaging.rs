//! Averaged coefficients: `F̄(t,y)` against `μ_t^y`, the time averages `F̄̄(y)`
//! and `Ḡ(y)`, and the residual curves `κ1(T)`, `κ2(T)`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen::{flow_reduce, CloudConfig, FlowSchedule, ParticleCloud, Start};
use crate::rate::{fit_rate, RateFit, RatePoint};
use crate::sde::AveragedDynamics;
use crate::stats::{Moments, VecEstimate};
use crate::system::SystemSpec;

/// Particle average of `F(t, ·, y)` over a cloud at `(t, y)`.
pub fn estimate_bar_f(sys: &SystemSpec, t: f64, y: &[f64], cloud: &ParticleCloud) -> Result<VecEstimate> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if cloud.t != t || cloud.y != y {
        return Err(Error::invalid(
            "cloud",
            format!("cloud is at (t={}, y={:?}), not (t={t}, y={y:?})", cloud.t, cloud.y),
        ));
    }
    let d2 = sys.d2();
    let mut out = vec![0.0; d2];
    let mut m = vec![Moments::default(); d2];
    for x in cloud.iter() {
        sys.coefficients().slow_drift(t, x, y, &mut out);
        for (m, v) in m.iter_mut().zip(&out) {
            m.push(*v);
        }
    }
    Ok(VecEstimate::from_moments(&m))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoubleAverageConfig {
    /// Averaging window; defaults to one period for periodic systems.
    pub t_avg: Option<f64>,
    pub t_start: f64,
    /// Trapezoid intervals over the window.
    pub n_nodes: usize,
    pub cloud: CloudConfig,
}

impl Default for DoubleAverageConfig {
    fn default() -> Self {
        Self {
            t_avg: None,
            t_start: 0.0,
            n_nodes: 64,
            cloud: CloudConfig::default(),
        }
    }
}

fn resolve_window(sys: &SystemSpec, t_avg: Option<f64>) -> Result<f64> {
    let t = match (t_avg, sys.period) {
        (Some(t), _) => t,
        (None, Some(p)) => p,
        (None, None) => {
            return Err(Error::invalid(
                "t_avg",
                format!("{} declares no period; an averaging window is required", sys.name()),
            ))
        }
    };
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid("t_avg", format!("{t} must be positive")));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleAverage {
    pub value: VecEstimate,
    /// `|trapezoid(n) − trapezoid(n/2)|` per component; `None` for odd `n`.
    pub quadrature_error: Option<Vec<f64>>,
    pub t_avg: f64,
    pub n_nodes: usize,
}

impl DoubleAverage {
    /// Monte Carlo and quadrature errors added in quadrature.
    pub fn combined_se(&self, i: usize) -> f64 {
        let q = self.quadrature_error.as_ref().map_or(0.0, |q| q[i]);
        self.value.se[i].hypot(q)
    }
}

struct WindowAcc {
    buf: Vec<f64>,
    fine: Vec<f64>,
    coarse: Vec<f64>,
    value: Vec<Moments>,
    diff: Vec<Moments>,
}

/// `(1/T)∫ F̄(t, y) dt` over `[t_start, t_start + T]` by the trapezoid rule,
/// with every node taken from one particle flow. The standard error comes from
/// per-particle time averages, so it accounts for correlation across nodes.
pub fn estimate_double_bar_f(sys: &SystemSpec, y: &[f64], cfg: &DoubleAverageConfig) -> Result<DoubleAverage> {
    cfg.cloud.validate()?;
    let t_avg = resolve_window(sys, cfg.t_avg)?;
    let n = cfg.n_nodes;
    if n < 2 {
        return Err(Error::invalid("n_nodes", "need at least 2 intervals"));
    }
    let nodes: Vec<f64> = (0..=n).map(|j| cfg.t_start + t_avg * j as f64 / n as f64).collect();
    let schedule = FlowSchedule::new(cfg.t_start - cfg.cloud.burn_in, &nodes, cfg.cloud.dt)?;
    let mut node_of = vec![usize::MAX; schedule.times.len()];
    for (j, &k) in schedule.marks.iter().enumerate() {
        node_of[k] = j;
    }
    let even = n.is_multiple_of(2);
    let d2 = sys.d2();
    let coef = sys.coefficients();
    let acc = flow_reduce(
        sys,
        y,
        Start::StandardNormal,
        cfg.cloud.seed,
        cfg.cloud.n_particles,
        &schedule,
        || WindowAcc {
            buf: vec![0.0; d2],
            fine: vec![0.0; d2],
            coarse: vec![0.0; d2],
            value: vec![Moments::default(); d2],
            diff: vec![Moments::default(); d2],
        },
        |acc, _i, k, t, x| {
            let j = node_of[k];
            if j == usize::MAX {
                return;
            }
            coef.slow_drift(t, x, y, &mut acc.buf);
            let end = j == 0 || j == n;
            let w = if end { 0.5 } else { 1.0 } / n as f64;
            let wc = if j % 2 == 1 {
                0.0
            } else if end {
                1.0 / n as f64
            } else {
                2.0 / n as f64
            };
            for c in 0..d2 {
                acc.fine[c] += w * acc.buf[c];
                acc.coarse[c] += wc * acc.buf[c];
            }
            if j == n {
                for c in 0..d2 {
                    acc.value[c].push(acc.fine[c]);
                    acc.diff[c].push(acc.fine[c] - acc.coarse[c]);
                }
                acc.fine.fill(0.0);
                acc.coarse.fill(0.0);
            }
        },
        |a, b| {
            for c in 0..d2 {
                a.value[c].merge(&b.value[c]);
                a.diff[c].merge(&b.diff[c]);
            }
        },
    )?;
    Ok(DoubleAverage {
        value: VecEstimate::from_moments(&acc.value),
        quadrature_error: even.then(|| acc.diff.iter().map(|m| m.mean.abs()).collect()),
        t_avg,
        n_nodes: n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarG {
    pub value: DMatrix<f64>,
    /// Time average of `|G(t, y) − Ḡ(y)|²_HS` over the window.
    pub residual: f64,
}

fn trapezoid_weights(n: usize) -> impl Iterator<Item = f64> {
    (0..=n).map(move |j| if j == 0 || j == n { 0.5 } else { 1.0 } / n as f64)
}

/// `Ḡ(y)` as the time average of `G(t, y)` over `[0, t_avg]`, the minimizer
/// of the mean squared Hilbert–Schmidt distance, and the attained residual.
pub fn estimate_bar_g(sys: &SystemSpec, y: &[f64], t_avg: f64, n_nodes: usize) -> Result<BarG> {
    if !(t_avg > 0.0 && t_avg.is_finite()) {
        return Err(Error::invalid("t_avg", format!("{t_avg} must be positive")));
    }
    if n_nodes < 1 {
        return Err(Error::invalid("n_nodes", "must be positive"));
    }
    let samples: Vec<DMatrix<f64>> = (0..=n_nodes)
        .map(|j| sys.g(t_avg * j as f64 / n_nodes as f64, y))
        .collect();
    // offset by the first sample so a constant G is reproduced exactly
    let mut mean = samples[0].clone();
    for (g, w) in samples.iter().zip(trapezoid_weights(n_nodes)) {
        mean += (g - &samples[0]) * w;
    }
    let residual = samples
        .iter()
        .zip(trapezoid_weights(n_nodes))
        .map(|(g, w)| w * (g - &mean).norm_squared())
        .sum();
    Ok(BarG { value: mean, residual })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KappaConfig {
    pub cloud: CloudConfig,
    /// Quadrature nodes per unit time for the deterministic `κ2` integrals.
    pub nodes_per_unit: f64,
}

impl Default for KappaConfig {
    fn default() -> Self {
        Self {
            cloud: CloudConfig::default(),
            nodes_per_unit: 64.0 / (2.0 * PI),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaCurves {
    pub y: Vec<f64>,
    /// Points with `x = T`; censored below twice their standard error.
    pub kappa1: Vec<RatePoint>,
    pub kappa2: Vec<RatePoint>,
    pub kappa1_fit: Option<RateFit>,
    pub kappa2_fit: Option<RateFit>,
    /// How `F̄̄(y)` was obtained: `oracle`, `period` or `longest-window`.
    pub reference: String,
}

/// Norm of a vector estimate divided by `scale`, with a delta-method error.
pub(crate) fn norm_estimate(m: &[Moments], scale: f64) -> (f64, f64) {
    let norm = m.iter().map(|m| m.mean * m.mean).sum::<f64>().sqrt();
    let se = if norm > 0.0 {
        m.iter().map(|m| (m.mean / norm * m.se()).powi(2)).sum::<f64>().sqrt()
    } else {
        m.iter().map(|m| m.se().powi(2)).sum::<f64>().sqrt()
    };
    (norm / scale, se / scale)
}

struct KappaAcc {
    buf: Vec<f64>,
    prev: Vec<f64>,
    prev_t: f64,
    integral: Vec<f64>,
    at_marks: Vec<Vec<f64>>,
    moments: Vec<Vec<Moments>>,
}

/// Sample `κ1(T)` and `κ2(T)` at each `T` in `t_list`. The `κ1` residual uses the
/// `F̄̄` oracle when present, else the average over one period, else the
/// longest window.
pub fn estimate_kappa_curves(sys: &SystemSpec, y: &[f64], t_list: &[f64], cfg: &KappaConfig) -> Result<KappaCurves> {
    cfg.cloud.validate()?;
    if t_list.len() < 3 {
        return Err(Error::TooFewPoints(t_list.len()));
    }
    if t_list[0] <= 0.0 || t_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("t_list", "must be positive and strictly increasing"));
    }
    let d2 = sys.d2();
    let t_max = *t_list.last().unwrap();
    let (reference, ref_window) = match (&sys.oracles.double_bar_f, sys.period) {
        (Some(_), _) => ("oracle", None),
        (None, Some(p)) => ("period", Some(p)),
        (None, None) => ("longest-window", Some(t_max)),
    };
    let oracle_ref = sys.oracles.double_bar_f.as_ref().map(|f| f(y));

    // breakpoints: 0, the window ends, and the reference window
    let mut windows: Vec<f64> = t_list.to_vec();
    if let Some(w) = ref_window {
        windows.push(w);
    }
    let mut breakpoints = vec![0.0];
    breakpoints.extend(windows.iter().copied());
    let mut order: Vec<usize> = (0..breakpoints.len()).collect();
    order.sort_by(|&a, &b| breakpoints[a].total_cmp(&breakpoints[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| breakpoints[i]).collect();
    let schedule = FlowSchedule::new(-cfg.cloud.burn_in, &sorted, cfg.cloud.dt)?;
    // schedule index of each original breakpoint
    let mut index_of = vec![0usize; breakpoints.len()];
    for (pos, &orig) in order.iter().enumerate() {
        index_of[orig] = schedule.marks[pos];
    }
    let start_k = index_of[0];
    let window_k: Vec<usize> = index_of[1..].to_vec();
    let last_k = *window_k.iter().max().unwrap();
    let n_windows = windows.len();
    let n_t = t_list.len();
    let coef = sys.coefficients();

    let acc = flow_reduce(
        sys,
        y,
        Start::StandardNormal,
        cfg.cloud.seed,
        cfg.cloud.n_particles,
        &schedule,
        || KappaAcc {
            buf: vec![0.0; d2],
            prev: vec![0.0; d2],
            prev_t: 0.0,
            integral: vec![0.0; d2],
            at_marks: vec![vec![0.0; d2]; n_windows],
            moments: vec![vec![Moments::default(); d2]; n_t],
        },
        |acc, _i, k, t, x| {
            if k < start_k {
                return;
            }
            coef.slow_drift(t, x, y, &mut acc.buf);
            if k == start_k {
                acc.integral.fill(0.0);
            } else {
                let h = t - acc.prev_t;
                for c in 0..d2 {
                    acc.integral[c] += 0.5 * h * (acc.prev[c] + acc.buf[c]);
                }
            }
            acc.prev.copy_from_slice(&acc.buf);
            acc.prev_t = t;
            for (w, &wk) in window_k.iter().enumerate() {
                if wk == k {
                    acc.at_marks[w].copy_from_slice(&acc.integral);
                }
            }
            if k == last_k {
                for (j, &t_j) in t_list.iter().enumerate() {
                    for c in 0..d2 {
                        let avg = acc.at_marks[j][c] / t_j;
                        let r = match &oracle_ref {
                            Some(r) => r[c],
                            None => acc.at_marks[n_t][c] / ref_window.unwrap(),
                        };
                        acc.moments[j][c].push(avg - r);
                    }
                }
            }
        },
        |a, b| {
            for (ma, mb) in a.moments.iter_mut().zip(&b.moments) {
                for (x, y) in ma.iter_mut().zip(mb) {
                    x.merge(y);
                }
            }
        },
    )?;

    let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let kappa1: Vec<RatePoint> = t_list
        .iter()
        .zip(&acc.moments)
        .map(|(&t, m)| {
            let (v, se) = norm_estimate(m, 1.0 + y_norm);
            RatePoint::new(t, v, se)
        })
        .collect();

    let g_window = ref_window.unwrap_or(t_max);
    let nodes = |t: f64| ((t * cfg.nodes_per_unit).ceil() as usize).max(64);
    let g_bar = estimate_bar_g(sys, y, g_window, nodes(g_window))?.value;
    let kappa2: Vec<RatePoint> = t_list
        .iter()
        .map(|&t| {
            let n = nodes(t);
            let r: f64 = trapezoid_weights(n)
                .enumerate()
                .map(|(j, w)| w * (sys.g(t * j as f64 / n as f64, y) - &g_bar).norm_squared())
                .sum();
            RatePoint::new(t, (r / (1.0 + y_norm * y_norm)).sqrt(), 0.0)
        })
        .collect();

    Ok(KappaCurves {
        y: y.to_vec(),
        kappa1_fit: fit_rate(&kappa1).ok(),
        kappa2_fit: fit_rate(&kappa2).ok(),
        kappa1,
        kappa2,
        reference: reference.to_string(),
    })
}

/// A coefficient tabulated on a one-dimensional slow grid, as exchanged in
/// JSON files. `values[i]` is the row-major `shape.0 × shape.1` value at
/// `y_grid[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientGrid {
    pub quantity: String,
    pub y_grid: Vec<f64>,
    pub shape: (usize, usize),
    pub values: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
}

impl CoefficientGrid {
    pub fn validate(&self) -> Result<()> {
        let len = self.shape.0 * self.shape.1;
        if self.y_grid.len() < 2 || self.y_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "{}: y_grid needs ≥2 increasing nodes",
                self.quantity
            )));
        }
        if self.values.len() != self.y_grid.len()
            || self.stderr.len() != self.y_grid.len()
            || self.values.iter().chain(&self.stderr).any(|v| v.len() != len)
        {
            return Err(Error::Config(format!("{}: table shape mismatch", self.quantity)));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let g: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        g.validate()?;
        Ok(g)
    }

    /// Piecewise-linear interpolation, linearly extrapolated beyond the ends.
    pub fn interpolate(&self, y: f64, out: &mut [f64]) {
        let g = &self.y_grid;
        let i = match g.partition_point(|&v| v <= y) {
            0 => 0,
            p if p >= g.len() => g.len() - 2,
            p => p - 1,
        };
        let w = (y - g[i]) / (g[i + 1] - g[i]);
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.values[i][c] * (1.0 - w) + self.values[i + 1][c] * w;
        }
    }
}

/// `F̄̄` on a grid of slow states (`d2 = 1`), one double average per node with
/// common random numbers.
pub fn tabulate_double_bar_f(sys: &SystemSpec, y_grid: &[f64], cfg: &DoubleAverageConfig) -> Result<CoefficientGrid> {
    if sys.d2() != 1 {
        return Err(Error::invalid("system", "tables support one slow dimension"));
    }
    let mut values = Vec::new();
    let mut stderr = Vec::new();
    for &y in y_grid {
        let a = estimate_double_bar_f(sys, &[y], cfg)?;
        stderr.push(vec![a.combined_se(0)]);
        values.push(a.value.value);
    }
    let grid = CoefficientGrid {
        quantity: "double_bar_F".into(),
        y_grid: y_grid.to_vec(),
        shape: (1, 1),
        values,
        stderr,
    };
    grid.validate()?;
    Ok(grid)
}

/// `Ḡ` on a grid of slow states (`d2 = 1`).
pub fn tabulate_bar_g(sys: &SystemSpec, y_grid: &[f64], t_avg: f64, n_nodes: usize) -> Result<CoefficientGrid> {
    if sys.d2() != 1 {
        return Err(Error::invalid("system", "tables support one slow dimension"));
    }
    let m2 = sys.dims().slow_noise;
    let mut values = Vec::new();
    for &y in y_grid {
        let g = estimate_bar_g(sys, &[y], t_avg, n_nodes)?.value;
        values.push((0..m2).map(|j| g[(0, j)]).collect());
    }
    let grid = CoefficientGrid {
        quantity: "bar_G".into(),
        y_grid: y_grid.to_vec(),
        shape: (1, m2),
        stderr: vec![vec![0.0; m2]; y_grid.len()],
        values,
    };
    grid.validate()?;
    Ok(grid)
}

/// Averaged dynamics interpolated from `F̄̄` and `Ḡ` tables.
#[derive(Clone, Debug)]
pub struct TabulatedAveraged {
    pub drift: CoefficientGrid,
    pub diffusion: CoefficientGrid,
}

impl TabulatedAveraged {
    pub fn new(drift: CoefficientGrid, diffusion: CoefficientGrid) -> Result<Self> {
        drift.validate()?;
        diffusion.validate()?;
        if drift.shape != (1, 1) || diffusion.shape.0 != 1 {
            return Err(Error::Config("tables must describe one slow dimension".into()));
        }
        Ok(Self { drift, diffusion })
    }
}

impl AveragedDynamics for TabulatedAveraged {
    fn dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        self.diffusion.shape.1
    }
    fn drift(&self, y: &[f64], out: &mut [f64]) {
        self.drift.interpolate(y[0], out)
    }
    fn diffusion(&self, y: &[f64], out: &mut [f64]) {
        self.diffusion.interpolate(y[0], out)
    }
}
