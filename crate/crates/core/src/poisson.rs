//! Feynman–Kac solution of the time-inhomogeneous Poisson equation
//! `∂tΦ + L0 Φ = −f` with `Φ(t,x,y) = ∫_t^∞ E f(r, X^y_{t,r}(x), y) dr`, and the
//! homogenized diffusion `Σ̄Σ̄*(t,y) = 2∫(F − F̄)Φ* dμ_t^y` with its time average.
//!
//! Path integrals are truncated at `T = ln(C_margin/tol)/δ̂`; the reported tail
//! bound `C_margin·e^{−δ̂T}/δ̂` assumes the unknown mixing constant is at most
//! `C_margin`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::averaging::{estimate_bar_f, norm_estimate};
use crate::error::{Error, Result};
use crate::frozen::{
    estimate_invariant_cloud, evolve_cloud_through, flow_reduce, probe_mixing_rate, CloudConfig, FlowSchedule,
    MixingConfig, ParticleCloud, Start,
};
use crate::rate::{fit_rate, RateFit, RatePoint};
use crate::stats::{Moments, VecEstimate};
use crate::system::{FullVec, SystemSpec, TimeSlowVec};

pub type SourceFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Offset applied to a seed for the independent centering flows.
const CENTERING_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// How the source is made centered: `f = raw − c(t, y)`.
#[derive(Clone)]
pub enum Centering {
    /// `c = 0`; the raw function is taken to be centered already.
    Assumed,
    /// `c` given in closed form.
    Oracle(TimeSlowVec),
    /// `c(t, y) = ∫ raw dμ_t^y` estimated on an independent particle flow.
    Estimated,
}

#[derive(Clone)]
pub struct PoissonSource {
    pub dim: usize,
    pub raw: SourceFn,
    pub centering: Centering,
}

impl PoissonSource {
    pub fn assumed_centered(dim: usize, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            dim,
            raw: Arc::new(f),
            centering: Centering::Assumed,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::assumed_centered(dim, |_, _, _, out| out.fill(0.0))
    }

    /// `raw − ∫ raw dμ_t^y` with the mean estimated by particles.
    pub fn estimated(dim: usize, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            dim,
            raw: Arc::new(f),
            centering: Centering::Estimated,
        }
    }

    fn slow_drift_raw(sys: &SystemSpec) -> SourceFn {
        let s = sys.clone();
        Arc::new(move |t, x, y, out| s.coefficients().slow_drift(t, x, y, out))
    }

    /// `F − F̄`, centered by the `bar_f` oracle when present, else estimated.
    pub fn centered_slow_drift(sys: &SystemSpec) -> Self {
        Self {
            dim: sys.d2(),
            raw: Self::slow_drift_raw(sys),
            centering: match &sys.oracles.bar_f {
                Some(f) => Centering::Oracle(f.clone()),
                None => Centering::Estimated,
            },
        }
    }

    /// `F − F̄` with the mean always estimated by particles.
    pub fn estimated_slow_drift(sys: &SystemSpec) -> Self {
        Self {
            dim: sys.d2(),
            raw: Self::slow_drift_raw(sys),
            centering: Centering::Estimated,
        }
    }

    /// Raw slow drift `F` without centering.
    pub fn raw_slow_drift(sys: &SystemSpec) -> Self {
        Self {
            dim: sys.d2(),
            raw: Self::slow_drift_raw(sys),
            centering: Centering::Assumed,
        }
    }

    /// Centering values at each schedule time, row-major `times × dim`, or
    /// `None` when no centering applies.
    fn centering_table(
        &self,
        sys: &SystemSpec,
        y: &[f64],
        schedule: &FlowSchedule,
        cloud: &CloudConfig,
        seed: u64,
    ) -> Result<Option<Vec<f64>>> {
        let dim = self.dim;
        match &self.centering {
            Centering::Assumed => Ok(None),
            Centering::Oracle(f) => Ok(Some(schedule.times.iter().flat_map(|&t| f(t, y)).collect())),
            Centering::Estimated => {
                cloud.validate()?;
                let t0 = schedule.times[0];
                let cs = FlowSchedule::new(t0 - cloud.burn_in, &schedule.times, cloud.dt)?;
                let n_times = schedule.times.len();
                let mut slot = vec![usize::MAX; cs.times.len()];
                for (j, &k) in cs.marks.iter().enumerate() {
                    slot[k] = j;
                }
                let raw = &self.raw;
                // running means reproduce a constant integrand exactly
                let means = flow_reduce(
                    sys,
                    y,
                    Start::StandardNormal,
                    seed.wrapping_add(CENTERING_SEED_OFFSET),
                    cloud.n_particles,
                    &cs,
                    || (vec![Moments::default(); n_times * dim], vec![0.0; dim]),
                    |acc, _i, k, t, x| {
                        let j = slot[k];
                        if j != usize::MAX {
                            raw(t, x, y, &mut acc.1);
                            for c in 0..dim {
                                acc.0[j * dim + c].push(acc.1[c]);
                            }
                        }
                    },
                    |a, b| {
                        for (a, b) in a.0.iter_mut().zip(&b.0) {
                            a.merge(b);
                        }
                    },
                )?;
                Ok(Some(means.0.into_iter().map(|m| m.mean).collect()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoissonConfig {
    pub n_paths: usize,
    pub dt: f64,
    /// Truncation horizon; derived from the mixing rate when absent.
    pub t_trunc: Option<f64>,
    pub tol: f64,
    pub c_margin: f64,
    /// Mixing rate; probed when absent.
    pub delta_hat: Option<f64>,
    pub mixing: MixingConfig,
    pub mixing_lags: Vec<f64>,
    /// Particles for estimated centering and the centering check.
    pub centering_cloud: CloudConfig,
    pub verify_centering: bool,
    pub seed: u64,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            dt: 0.005,
            t_trunc: None,
            tol: 1e-4,
            c_margin: 10.0,
            delta_hat: None,
            mixing: MixingConfig::default(),
            mixing_lags: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            centering_cloud: CloudConfig {
                n_particles: 4_000,
                ..CloudConfig::default()
            },
            verify_centering: true,
            seed: 0,
        }
    }
}

/// Truncation horizon, mixing rate and tail bound for a solve at `(t, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub t_trunc: f64,
    pub delta_hat: f64,
    pub tail_bound: f64,
}

pub fn resolve_horizon(sys: &SystemSpec, t: f64, y: &[f64], cfg: &PoissonConfig) -> Result<Horizon> {
    if !(cfg.tol > 0.0 && cfg.c_margin > cfg.tol) {
        return Err(Error::invalid("tol", "need 0 < tol < c_margin"));
    }
    let delta_hat = match cfg.delta_hat {
        Some(d) if d > 0.0 => d,
        Some(d) => return Err(Error::invalid("delta_hat", format!("{d} must be positive"))),
        None => probe_mixing_rate(sys, y, t, &cfg.mixing_lags, &cfg.mixing)?.delta_hat,
    };
    let t_trunc = match cfg.t_trunc {
        Some(tt) if tt > 0.0 => tt,
        Some(tt) => return Err(Error::invalid("t_trunc", format!("{tt} must be positive"))),
        None => (cfg.c_margin / cfg.tol).ln() / delta_hat,
    };
    Ok(Horizon {
        t_trunc,
        delta_hat,
        tail_bound: cfg.c_margin * (-delta_hat * t_trunc).exp() / delta_hat,
    })
}

struct PathAcc {
    values: Vec<f64>,
    integral: Vec<f64>,
    prev: Vec<f64>,
    buf: Vec<f64>,
    prev_t: f64,
}

/// Per-path trapezoid integrals of the centered source over the schedule,
/// row-major `n_paths × dim`.
#[allow(clippy::too_many_arguments)]
fn path_integrals(
    sys: &SystemSpec,
    source: &PoissonSource,
    y: &[f64],
    start: Start,
    schedule: &FlowSchedule,
    centering: Option<&[f64]>,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let dim = source.dim;
    let last = schedule.n_steps();
    let raw = &source.raw;
    let acc = flow_reduce(
        sys,
        y,
        start,
        seed,
        n_paths,
        schedule,
        || PathAcc {
            values: Vec::new(),
            integral: vec![0.0; dim],
            prev: vec![0.0; dim],
            buf: vec![0.0; dim],
            prev_t: 0.0,
        },
        |acc, _i, k, t, x| {
            raw(t, x, y, &mut acc.buf);
            if let Some(c) = centering {
                for (b, c) in acc.buf.iter_mut().zip(&c[k * dim..(k + 1) * dim]) {
                    *b -= c;
                }
            }
            if k == 0 {
                acc.integral.fill(0.0);
            } else {
                let h = t - acc.prev_t;
                for c in 0..dim {
                    acc.integral[c] += 0.5 * h * (acc.prev[c] + acc.buf[c]);
                }
            }
            acc.prev.copy_from_slice(&acc.buf);
            acc.prev_t = t;
            if k == last {
                acc.values.extend_from_slice(&acc.integral);
            }
        },
        |a, b| a.values.extend(b.values),
    )?;
    Ok(acc.values)
}

fn moments_of(values: &[f64], dim: usize) -> Vec<Moments> {
    let mut m = vec![Moments::default(); dim];
    for row in values.chunks_exact(dim) {
        for (m, v) in m.iter_mut().zip(row) {
            m.push(*v);
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonValue {
    pub value: VecEstimate,
    pub horizon: Horizon,
}

impl PoissonValue {
    /// `max(k·SE, tail bound)` for component `i`.
    pub fn tolerance(&self, i: usize, k: f64) -> f64 {
        (k * self.value.se[i]).max(self.horizon.tail_bound)
    }
}

/// Monte Carlo value of `Φ(t, x, y)` for a centered source.
pub fn solve_poisson(
    sys: &SystemSpec,
    source: &PoissonSource,
    t: f64,
    x: &[f64],
    y: &[f64],
    cfg: &PoissonConfig,
) -> Result<PoissonValue> {
    solve_from(sys, source, t, Start::Point(x), y, cfg)
}

/// Average of `Φ(t, ·, y)` over a cloud at time `t` (one path per particle).
/// For a centered source the result vanishes up to Monte Carlo error.
pub fn average_poisson_over_cloud(
    sys: &SystemSpec,
    source: &PoissonSource,
    cloud: &ParticleCloud,
    cfg: &PoissonConfig,
) -> Result<PoissonValue> {
    let cfg = PoissonConfig {
        n_paths: cloud.len(),
        ..cfg.clone()
    };
    solve_from(sys, source, cloud.t, Start::Cloud(cloud), &cloud.y, &cfg)
}

fn solve_from(
    sys: &SystemSpec,
    source: &PoissonSource,
    t: f64,
    start: Start,
    y: &[f64],
    cfg: &PoissonConfig,
) -> Result<PoissonValue> {
    if source.dim == 0 {
        return Err(Error::invalid("source", "zero dimension"));
    }
    let horizon = resolve_horizon(sys, t, y, cfg)?;
    if cfg.verify_centering {
        let samples: Vec<f64> = (0..5).map(|j| t + horizon.t_trunc * j as f64 / 4.0).collect();
        let report = check_centering(sys, source, &samples, y, &cfg.centering_cloud)?;
        if let Some((t_bad, z)) = report.worst() {
            if !report.pass {
                return Err(Error::RejectedSource { t: t_bad, z });
            }
        }
    }
    let schedule = FlowSchedule::new(t, &[t + horizon.t_trunc], cfg.dt)?;
    let centering = source.centering_table(sys, y, &schedule, &cfg.centering_cloud, cfg.seed)?;
    let values = path_integrals(
        sys,
        source,
        y,
        start,
        &schedule,
        centering.as_deref(),
        cfg.n_paths,
        cfg.seed,
    )?;
    Ok(PoissonValue {
        value: VecEstimate::from_moments(&moments_of(&values, source.dim)),
        horizon,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenteringReport {
    pub times: Vec<f64>,
    pub means: Vec<VecEstimate>,
    /// Largest `|mean/SE|` over components at each time.
    pub z: Vec<f64>,
    pub pass: bool,
}

impl CenteringReport {
    pub fn worst(&self) -> Option<(f64, f64)> {
        self.times
            .iter()
            .zip(&self.z)
            .map(|(&t, &z)| (t, z))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn z_score(value: f64, se: f64) -> f64 {
    if se > 0.0 {
        (value / se).abs()
    } else if value.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Cloud averages of the centered source at each sample time and their
/// z-scores; passes iff every `|z| ≤ 5`. Estimated centering is computed on
/// the same cloud.
pub fn check_centering(
    sys: &SystemSpec,
    source: &PoissonSource,
    t_samples: &[f64],
    y: &[f64],
    cloud_cfg: &CloudConfig,
) -> Result<CenteringReport> {
    cloud_cfg.validate()?;
    if t_samples.is_empty() {
        return Err(Error::invalid("t_samples", "empty"));
    }
    let mut sorted = t_samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let clouds = evolve_cloud_through(
        sys,
        y,
        Start::StandardNormal,
        sorted[0] - cloud_cfg.burn_in,
        &sorted,
        cloud_cfg.n_particles,
        cloud_cfg.dt,
        cloud_cfg.seed,
    )?;
    let dim = source.dim;
    let mut means = Vec::new();
    let mut z = Vec::new();
    for cloud in &clouds {
        let t = cloud.t;
        let mut raw_vals = vec![0.0; cloud.len() * dim];
        for (i, x) in cloud.iter().enumerate() {
            (source.raw)(t, x, y, &mut raw_vals[i * dim..(i + 1) * dim]);
        }
        let center: Vec<f64> = match &source.centering {
            Centering::Assumed => vec![0.0; dim],
            Centering::Oracle(f) => f(t, y),
            Centering::Estimated => moments_of(&raw_vals, dim).iter().map(|m| m.mean).collect(),
        };
        for row in raw_vals.chunks_exact_mut(dim) {
            for (v, c) in row.iter_mut().zip(&center) {
                *v -= c;
            }
        }
        let est = VecEstimate::from_moments(&moments_of(&raw_vals, dim));
        z.push(
            est.value
                .iter()
                .zip(&est.se)
                .map(|(&v, &s)| z_score(v, s))
                .fold(0.0, f64::max),
        );
        means.push(est);
    }
    let pass = z.iter().all(|&z| z <= 5.0);
    Ok(CenteringReport {
        times: sorted,
        means,
        z,
        pass,
    })
}

/// An approximation of `Φ` that can be evaluated on finite-difference
/// stencils. Every call returns the same number of per-sample values, and
/// sample `i` uses the same random numbers in every call.
pub trait PhiHat: Sync {
    fn dim(&self) -> usize;
    /// Row-major `n_samples × dim`.
    fn samples(&self, t: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>>;
    /// The same estimator with a halved time step, for a discretization check.
    fn refined(&self) -> Option<Box<dyn PhiHat + '_>> {
        None
    }
}

/// Closed-form `Φ` (one exact sample).
pub struct AnalyticPhi {
    pub dim: usize,
    pub phi: FullVec,
}

impl AnalyticPhi {
    pub fn from_oracle(sys: &SystemSpec) -> Result<Self> {
        let phi = sys
            .oracles
            .phi
            .clone()
            .ok_or_else(|| Error::MissingCoefficients(format!("{} has no Poisson oracle", sys.name())))?;
        Ok(Self { dim: sys.d2(), phi })
    }
}

impl PhiHat for AnalyticPhi {
    fn dim(&self) -> usize {
        self.dim
    }
    fn samples(&self, t: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok((self.phi)(t, x, y))
    }
}

/// Feynman–Kac `Φ̂` with a fixed horizon and fixed seeds (common random
/// numbers across evaluation points).
pub struct McPoissonPhi {
    pub sys: SystemSpec,
    pub source: PoissonSource,
    pub n_paths: usize,
    pub dt: f64,
    pub t_trunc: f64,
    pub centering_cloud: CloudConfig,
    pub seed: u64,
}

impl McPoissonPhi {
    pub fn new(sys: &SystemSpec, source: PoissonSource, t_trunc: f64, cfg: &PoissonConfig) -> Self {
        Self {
            sys: sys.clone(),
            source,
            n_paths: cfg.n_paths,
            dt: cfg.dt,
            t_trunc,
            centering_cloud: cfg.centering_cloud,
            seed: cfg.seed,
        }
    }
}

impl PhiHat for McPoissonPhi {
    fn dim(&self) -> usize {
        self.source.dim
    }

    fn samples(&self, t: f64, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let schedule = FlowSchedule::new(t, &[t + self.t_trunc], self.dt)?;
        let centering = self
            .source
            .centering_table(&self.sys, y, &schedule, &self.centering_cloud, self.seed)?;
        path_integrals(
            &self.sys,
            &self.source,
            y,
            Start::Point(x),
            &schedule,
            centering.as_deref(),
            self.n_paths,
            self.seed,
        )
    }

    fn refined(&self) -> Option<Box<dyn PhiHat + '_>> {
        Some(Box::new(McPoissonPhi {
            sys: self.sys.clone(),
            source: self.source.clone(),
            dt: self.dt / 2.0,
            ..*self
        }))
    }
}

impl Clone for McPoissonPhi {
    fn clone(&self) -> Self {
        Self {
            sys: self.sys.clone(),
            source: self.source.clone(),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualOptions {
    pub h_t: f64,
    pub h_x: f64,
    /// Also evaluate with doubled steps and report the difference.
    pub richardson: bool,
    /// Also evaluate the refined estimator, when it has one.
    pub refine_dt: bool,
    /// Particles for `F̄(t, y)` when the source centering is estimated.
    pub center_cloud: CloudConfig,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            h_t: 1e-5,
            h_x: 1e-3,
            richardson: true,
            refine_dt: true,
            center_cloud: CloudConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// `∂tΦ̂ + b·∇Φ̂ + ½ tr(σσ*∇²Φ̂) + f` per component.
    pub residual: Vec<f64>,
    pub mc_se: Vec<f64>,
    pub fd_error: Vec<f64>,
    pub refinement_error: Vec<f64>,
    pub source_se: Vec<f64>,
    /// All error terms added in quadrature.
    pub error_bar: Vec<f64>,
}

/// Per-sample stencil residual without the source term: mean and SE.
fn stencil(
    sys: &SystemSpec,
    phi: &dyn PhiHat,
    t: f64,
    x: &[f64],
    y: &[f64],
    h_t: f64,
    h_x: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d1 = x.len();
    let dim = phi.dim();
    let b = sys.b(t, x, y);
    let a = sys.fast_generator_diffusion(t, x, y);
    let shifted = |dx: &[(usize, f64)]| {
        let mut z = x.to_vec();
        for &(i, h) in dx {
            z[i] += h;
        }
        z
    };
    let p0 = phi.samples(t, x, y)?;
    let n = p0.len();
    let same = |v: &Vec<f64>| -> Result<()> {
        if v.len() != n {
            Err(Error::invalid("phi_hat", "sample counts differ across the stencil"))
        } else if v.iter().any(|v| !v.is_finite()) {
            Err(Error::NonFinite("phi_hat stencil evaluation".into()))
        } else {
            Ok(())
        }
    };
    same(&p0)?;
    let mut r = vec![0.0; n];
    let tp = phi.samples(t + h_t, x, y)?;
    let tm = phi.samples(t - h_t, x, y)?;
    same(&tp)?;
    same(&tm)?;
    for s in 0..n {
        r[s] += (tp[s] - tm[s]) / (2.0 * h_t);
    }
    for i in 0..d1 {
        let pp = phi.samples(t, &shifted(&[(i, h_x)]), y)?;
        let pm = phi.samples(t, &shifted(&[(i, -h_x)]), y)?;
        same(&pp)?;
        same(&pm)?;
        for s in 0..n {
            r[s] +=
                b[i] * (pp[s] - pm[s]) / (2.0 * h_x) + 0.5 * a[(i, i)] * (pp[s] - 2.0 * p0[s] + pm[s]) / (h_x * h_x);
        }
        for j in (i + 1)..d1 {
            if a[(i, j)] == 0.0 {
                continue;
            }
            let v: Vec<Vec<f64>> = [(h_x, h_x), (h_x, -h_x), (-h_x, h_x), (-h_x, -h_x)]
                .iter()
                .map(|&(hi, hj)| phi.samples(t, &shifted(&[(i, hi), (j, hj)]), y))
                .collect::<Result<_>>()?;
            for w in &v {
                same(w)?;
            }
            // a_ij appears twice in the trace
            for s in 0..n {
                r[s] += a[(i, j)] * (v[0][s] - v[1][s] - v[2][s] + v[3][s]) / (4.0 * h_x * h_x);
            }
        }
    }
    let m = moments_of(&r, dim);
    Ok((m.iter().map(|m| m.mean).collect(), m.iter().map(|m| m.se()).collect()))
}

/// Finite-difference residual of the Poisson equation for `phi` at one point.
#[allow(clippy::too_many_arguments)]
pub fn verify_poisson_residual(
    sys: &SystemSpec,
    phi: &dyn PhiHat,
    source: &PoissonSource,
    t: f64,
    x: &[f64],
    y: &[f64],
    opts: &ResidualOptions,
) -> Result<ResidualReport> {
    if !(opts.h_t > 0.0 && opts.h_x > 0.0) {
        return Err(Error::invalid("h", "finite-difference steps must be positive"));
    }
    let dim = source.dim;
    let mut f = vec![0.0; dim];
    (source.raw)(t, x, y, &mut f);
    let mut source_se = vec![0.0; dim];
    match &source.centering {
        Centering::Assumed => {}
        Centering::Oracle(c) => {
            for (f, c) in f.iter_mut().zip(c(t, y)) {
                *f -= c;
            }
        }
        Centering::Estimated => {
            let cloud = estimate_invariant_cloud(sys, t, y, &opts.center_cloud)?;
            let mut m = vec![Moments::default(); dim];
            let mut buf = vec![0.0; dim];
            for p in cloud.iter() {
                (source.raw)(t, p, y, &mut buf);
                for (m, v) in m.iter_mut().zip(&buf) {
                    m.push(*v);
                }
            }
            for c in 0..dim {
                f[c] -= m[c].mean;
                source_se[c] = m[c].se();
            }
        }
    }
    let (base, mc_se) = stencil(sys, phi, t, x, y, opts.h_t, opts.h_x)?;
    let fd_error = if opts.richardson {
        let (coarse, _) = stencil(sys, phi, t, x, y, 2.0 * opts.h_t, 2.0 * opts.h_x)?;
        base.iter().zip(&coarse).map(|(a, b)| (a - b).abs()).collect()
    } else {
        vec![0.0; dim]
    };
    let refinement_error = match (opts.refine_dt, phi.refined()) {
        (true, Some(fine)) => {
            let (r, _) = stencil(sys, fine.as_ref(), t, x, y, opts.h_t, opts.h_x)?;
            base.iter().zip(&r).map(|(a, b)| (a - b).abs()).collect()
        }
        _ => vec![0.0; dim],
    };
    let residual: Vec<f64> = base.iter().zip(&f).map(|(r, f)| r + f).collect();
    let error_bar = (0..dim)
        .map(|c| (mc_se[c].powi(2) + fd_error[c].powi(2) + refinement_error[c].powi(2) + source_se[c].powi(2)).sqrt())
        .collect();
    Ok(ResidualReport {
        residual,
        mc_se,
        fd_error,
        refinement_error,
        source_se,
        error_bar,
    })
}

/// How `Φ` is obtained at cloud particles in [`estimate_sigma_sq`].
pub enum PhiMethod<'a> {
    /// The system's closed-form `Φ`.
    Oracle,
    /// One forward path per particle; its source integral is an unbiased
    /// sample of `Φ` at the particle.
    Pathwise(&'a PoissonConfig),
    /// Mean of an estimator's samples at every particle.
    Evaluator(&'a dyn PhiHat),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSq {
    /// Symmetric, PSD-projected `Σ̄Σ̄*(t, y)`.
    pub value: DMatrix<f64>,
    pub se: DMatrix<f64>,
    /// Before projection.
    pub min_eigenvalue: f64,
    pub clamped: bool,
}

/// Clamp negative eigenvalues of a symmetric matrix that lie within
/// `tolerance` of zero; larger violations are errors.
pub fn psd_project(m: &DMatrix<f64>, tolerance: f64) -> Result<(DMatrix<f64>, f64, bool)> {
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok((m.clone(), min, false));
    }
    if min < -tolerance {
        return Err(Error::HomogenizationFailure {
            min_eigenvalue: min,
            tolerance,
        });
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let p = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok(((&p + p.transpose()) * 0.5, min, true))
}

/// Symmetric PSD square root by eigendecomposition, negative eigenvalues
/// clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn symmetric_moments(u: &[f64], phi: &[f64], m: &mut [Moments]) {
    let d = u.len();
    for i in 0..d {
        for j in 0..d {
            m[i * d + j].push(u[i] * phi[j] + phi[i] * u[j]);
        }
    }
}

fn sigma_from_moments(m: &[Moments], d: usize) -> Result<SigmaSq> {
    let mut value = DMatrix::from_fn(d, d, |i, j| m[i * d + j].mean);
    value = (&value + value.transpose()) * 0.5;
    let se = DMatrix::from_fn(d, d, |i, j| m[i * d + j].se());
    let (value, min_eigenvalue, clamped) = psd_project(&value, 3.0 * se.max())?;
    Ok(SigmaSq {
        value,
        se,
        min_eigenvalue,
        clamped,
    })
}

/// `Σ̄Σ̄*(t, y) = M + M*` with `M` the cloud average of `(F − F̄)Φ*`; `F̄` is the
/// cloud mean of `F`.
pub fn estimate_sigma_sq(
    sys: &SystemSpec,
    t: f64,
    y: &[f64],
    cloud: &ParticleCloud,
    method: PhiMethod,
) -> Result<SigmaSq> {
    let d = sys.d2();
    let f_bar = estimate_bar_f(sys, t, y, cloud)?.value;
    let n = cloud.len();
    let mut u = vec![0.0; n * d];
    for (i, x) in cloud.iter().enumerate() {
        sys.coefficients().slow_drift(t, x, y, &mut u[i * d..(i + 1) * d]);
        for c in 0..d {
            u[i * d + c] -= f_bar[c];
        }
    }
    let phi: Vec<f64> = if u.iter().all(|&v| v == 0.0) {
        vec![0.0; n * d]
    } else {
        match method {
            PhiMethod::Oracle => {
                let p = sys
                    .oracles
                    .phi
                    .as_ref()
                    .ok_or_else(|| Error::MissingCoefficients(format!("{} has no Poisson oracle", sys.name())))?;
                cloud.iter().flat_map(|x| p(t, x, y)).collect()
            }
            PhiMethod::Pathwise(cfg) => {
                let horizon = resolve_horizon(sys, t, y, cfg)?;
                let source = PoissonSource::centered_slow_drift(sys);
                let schedule = FlowSchedule::new(t, &[t + horizon.t_trunc], cfg.dt)?;
                let centering = source.centering_table(sys, y, &schedule, &cfg.centering_cloud, cfg.seed)?;
                path_integrals(
                    sys,
                    &source,
                    y,
                    Start::Cloud(cloud),
                    &schedule,
                    centering.as_deref(),
                    n,
                    cfg.seed,
                )?
            }
            PhiMethod::Evaluator(ph) => {
                let mut out = Vec::with_capacity(n * d);
                for x in cloud.iter() {
                    let s = ph.samples(t, x, y)?;
                    out.extend(moments_of(&s, d).iter().map(|m| m.mean));
                }
                out
            }
        }
    };
    let mut m = vec![Moments::default(); d * d];
    for i in 0..n {
        symmetric_moments(&u[i * d..(i + 1) * d], &phi[i * d..(i + 1) * d], &mut m);
    }
    sigma_from_moments(&m, d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HomogenizationConfig {
    /// Averaging window; one period by default.
    pub t_avg: Option<f64>,
    pub n_nodes: usize,
    pub cloud: CloudConfig,
    pub poisson: PoissonConfig,
    /// Windows at which to sample `κ3`; multiples of the node spacing.
    pub kappa_times: Vec<f64>,
}

impl Default for HomogenizationConfig {
    fn default() -> Self {
        Self {
            t_avg: None,
            n_nodes: 64,
            cloud: CloudConfig::default(),
            poisson: PoissonConfig::default(),
            kappa_times: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomogenizedDiffusion {
    pub y: Vec<f64>,
    pub double_bar_sigma_sq: DMatrix<f64>,
    pub se: DMatrix<f64>,
    /// Symmetric PSD square root of `double_bar_sigma_sq`.
    pub double_bar_sigma: DMatrix<f64>,
    pub clamped: bool,
    pub node_times: Vec<f64>,
    /// Cloud estimates of `Σ̄Σ̄*(t_j, y)` at the nodes.
    pub node_values: Vec<DMatrix<f64>>,
    pub horizon: Horizon,
    pub kappa3: Vec<RatePoint>,
    pub kappa3_fit: Option<RateFit>,
    /// `oracle` or `window`.
    pub reference: String,
}

/// Time average of `Σ̄Σ̄*(t, y)` over whole multiples of `t_avg` from one particle flow, with
/// the forward source integrals giving a pathwise `Φ` sample at every node,
/// and the `κ3` residual curve.
pub fn estimate_double_bar_sigma(
    sys: &SystemSpec,
    y: &[f64],
    cfg: &HomogenizationConfig,
) -> Result<HomogenizedDiffusion> {
    cfg.cloud.validate()?;
    let t_avg = match (cfg.t_avg, sys.period) {
        (Some(t), _) | (None, Some(t)) => t,
        (None, None) => return Err(Error::invalid("t_avg", "required for non-periodic systems")),
    };
    if !(t_avg > 0.0) || cfg.n_nodes < 1 {
        return Err(Error::invalid("t_avg", "window and node count must be positive"));
    }
    let d = sys.d2();
    let spacing = t_avg / cfg.n_nodes as f64;
    let node_index = |t: f64| -> Result<usize> {
        let j = (t / spacing).round();
        if j < 1.0 || (j * spacing - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::invalid(
                "kappa_times",
                format!("{t} is not a positive multiple of {spacing}"),
            ));
        }
        Ok(j as usize)
    };
    let kappa_nodes: Vec<usize> = cfg.kappa_times.iter().map(|&t| node_index(t)).collect::<Result<_>>()?;
    // nodes past t_avg only feed the κ3 curve
    let n_nodes_total = kappa_nodes.iter().copied().max().unwrap_or(0).max(cfg.n_nodes);

    let horizon = resolve_horizon(sys, 0.0, y, &cfg.poisson)?;
    let sub = (spacing / cfg.cloud.dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let h = spacing / sub as f64;
    let trunc_steps = (horizon.t_trunc / h).ceil() as usize;
    let horizon = Horizon {
        t_trunc: trunc_steps as f64 * h,
        tail_bound: cfg.poisson.c_margin * (-horizon.delta_hat * trunc_steps as f64 * h).exp() / horizon.delta_hat,
        ..horizon
    };
    let total_steps = n_nodes_total * sub + trunc_steps;
    let t_end = total_steps as f64 * h;
    let schedule = FlowSchedule::new(-cfg.cloud.burn_in, &[0.0, t_end], h.min(cfg.cloud.dt))?;
    let k0 = schedule.marks[0];
    if schedule.n_steps() - k0 != total_steps {
        return Err(Error::invalid("dt", "flow grid does not align with the node spacing"));
    }

    // centering of the source along the window
    let source = PoissonSource::centered_slow_drift(sys);
    let window_sched = FlowSchedule {
        times: schedule.times[k0..].to_vec(),
        marks: vec![0, total_steps],
    };
    let centering = source.centering_table(sys, y, &window_sched, &cfg.poisson.centering_cloud, cfg.poisson.seed)?;
    let centering = centering.as_deref();

    let kappa_ref_oracle = sys.oracles.double_bar_sigma_sq.as_ref().map(|f| f(y));
    let n_kappa = kappa_nodes.len();
    // reference over the longest whole number of windows inside the flow
    let n_avg = (n_nodes_total / cfg.n_nodes) * cfg.n_nodes;
    let coef = sys.coefficients();
    let trapezoid = move |products: &[f64], upto: usize, out: &mut [f64]| {
        out.fill(0.0);
        let w_end = 0.5 / upto as f64;
        for j in 0..=upto {
            let w = if j == 0 || j == upto { w_end } else { 1.0 / upto as f64 };
            for (o, p) in out.iter_mut().zip(&products[j * d * d..(j + 1) * d * d]) {
                *o += w * p;
            }
        }
    };

    struct Acc {
        cum: Vec<f64>,
        u: Vec<f64>,
        buf: Vec<f64>,
        prev: Vec<f64>,
        prods: Vec<f64>,
        tmp: Vec<f64>,
        tmp_ref: Vec<f64>,
        node: Vec<Moments>,
        avg: Vec<Moments>,
        kappa: Vec<Vec<Moments>>,
    }
    let acc = flow_reduce(
        sys,
        y,
        Start::StandardNormal,
        cfg.cloud.seed,
        cfg.cloud.n_particles,
        &schedule,
        || Acc {
            cum: vec![0.0; (total_steps + 1) * d],
            u: vec![0.0; (n_nodes_total + 1) * d],
            buf: vec![0.0; d],
            prev: vec![0.0; d],
            prods: vec![0.0; (n_nodes_total + 1) * d * d],
            tmp: vec![0.0; d * d],
            tmp_ref: vec![0.0; d * d],
            node: vec![Moments::default(); (n_nodes_total + 1) * d * d],
            avg: vec![Moments::default(); d * d],
            kappa: vec![vec![Moments::default(); d * d]; n_kappa],
        },
        |acc, _i, k, t, x| {
            if k < k0 {
                return;
            }
            let s = k - k0;
            coef.slow_drift(t, x, y, &mut acc.buf);
            if let Some(c) = centering {
                for (b, c) in acc.buf.iter_mut().zip(&c[s * d..(s + 1) * d]) {
                    *b -= c;
                }
            }
            for c in 0..d {
                acc.cum[s * d + c] = if s == 0 {
                    0.0
                } else {
                    acc.cum[(s - 1) * d + c] + 0.5 * h * (acc.prev[c] + acc.buf[c])
                };
            }
            acc.prev.copy_from_slice(&acc.buf);
            if s % sub == 0 && s / sub <= n_nodes_total {
                let j = s / sub;
                acc.u[j * d..(j + 1) * d].copy_from_slice(&acc.buf);
            }
            if s == total_steps {
                for j in 0..=n_nodes_total {
                    let a = j * sub;
                    let b = a + trunc_steps;
                    for p in 0..d {
                        for q in 0..d {
                            let ip = acc.cum[b * d + p] - acc.cum[a * d + p];
                            let iq = acc.cum[b * d + q] - acc.cum[a * d + q];
                            let v = acc.u[j * d + p] * iq + ip * acc.u[j * d + q];
                            acc.prods[(j * d + p) * d + q] = v;
                            acc.node[(j * d + p) * d + q].push(v);
                        }
                    }
                }
                trapezoid(&acc.prods, n_avg, &mut acc.tmp_ref);
                for (m, v) in acc.avg.iter_mut().zip(&acc.tmp_ref) {
                    m.push(*v);
                }
                for (kk, &jn) in kappa_nodes.iter().enumerate() {
                    trapezoid(&acc.prods, jn, &mut acc.tmp);
                    for e in 0..d * d {
                        let r = match &kappa_ref_oracle {
                            Some(o) => o[(e / d, e % d)],
                            None => acc.tmp_ref[e],
                        };
                        acc.kappa[kk][e].push(acc.tmp[e] - r);
                    }
                }
            }
        },
        |a, b| {
            for (x, y) in a.node.iter_mut().zip(&b.node) {
                x.merge(y);
            }
            for (x, y) in a.avg.iter_mut().zip(&b.avg) {
                x.merge(y);
            }
            for (ka, kb) in a.kappa.iter_mut().zip(&b.kappa) {
                for (x, y) in ka.iter_mut().zip(kb) {
                    x.merge(y);
                }
            }
        },
    )?;

    let sigma = sigma_from_moments(&acc.avg, d)?;
    let node_values = (0..=n_nodes_total)
        .map(|j| {
            let m = DMatrix::from_fn(d, d, |p, q| acc.node[(j * d + p) * d + q].mean);
            (&m + m.transpose()) * 0.5
        })
        .collect();
    let y_sq: f64 = y.iter().map(|v| v * v).sum();
    let kappa3: Vec<RatePoint> = cfg
        .kappa_times
        .iter()
        .zip(&acc.kappa)
        .map(|(&t, m)| {
            // Frobenius norm of the symmetric residual
            let (v, se) = norm_estimate(m, 1.0 + y_sq);
            RatePoint::new(t, v, se)
        })
        .collect();
    Ok(HomogenizedDiffusion {
        y: y.to_vec(),
        double_bar_sigma: psd_sqrt(&sigma.value),
        double_bar_sigma_sq: sigma.value,
        se: sigma.se,
        clamped: sigma.clamped,
        node_times: (0..=n_nodes_total).map(|j| j as f64 * spacing).collect(),
        node_values,
        horizon,
        kappa3_fit: fit_rate(&kappa3).ok(),
        kappa3,
        reference: if kappa_ref_oracle.is_some() { "oracle" } else { "window" }.into(),
    })
}

/// `Σ̄̄` tabulated on a one-dimensional slow grid.
pub fn tabulate_double_bar_sigma(
    sys: &SystemSpec,
    y_grid: &[f64],
    cfg: &HomogenizationConfig,
) -> Result<crate::averaging::CoefficientGrid> {
    if sys.d2() != 1 {
        return Err(Error::invalid("system", "tables support one slow dimension"));
    }
    let mut values = Vec::new();
    let mut stderr = Vec::new();
    for &y in y_grid {
        let h = estimate_double_bar_sigma(sys, &[y], cfg)?;
        let s = h.double_bar_sigma[(0, 0)];
        values.push(vec![s]);
        // delta method for the square root
        stderr.push(vec![if s > 0.0 {
            h.se[(0, 0)] / (2.0 * s)
        } else {
            h.se[(0, 0)].sqrt()
        }]);
    }
    let grid = crate::averaging::CoefficientGrid {
        quantity: "double_bar_Sigma".into(),
        y_grid: y_grid.to_vec(),
        shape: (1, 1),
        values,
        stderr,
    };
    grid.validate()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::builtin_periodic_ou;

    fn quick() -> PoissonConfig {
        PoissonConfig {
            n_paths: 500,
            dt: 0.01,
            delta_hat: Some(1.0),
            verify_centering: false,
            ..Default::default()
        }
    }

    #[test]
    fn zero_source_gives_zero() {
        let sys = builtin_periodic_ou(1.0, 1.0, 0.0).unwrap();
        let v = solve_poisson(&sys, &PoissonSource::zero(1), 0.0, &[1.0], &[0.0], &quick()).unwrap();
        assert_eq!(v.value.value, vec![0.0]);
        assert_eq!(v.value.se, vec![0.0]);
    }

    #[test]
    fn horizon_follows_margin_rule() {
        let sys = builtin_periodic_ou(1.0, 1.0, 0.0).unwrap();
        let cfg = PoissonConfig {
            delta_hat: Some(2.0),
            ..Default::default()
        };
        let h = resolve_horizon(&sys, 0.0, &[0.0], &cfg).unwrap();
        assert!((h.t_trunc - (1e5f64).ln() / 2.0).abs() < 1e-12);
        assert!((h.tail_bound - 1e-4 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn psd_projection_rules() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.01]);
        let (p, min, clamped) = psd_project(&m, 0.05).unwrap();
        assert!(clamped);
        assert_eq!(min, -0.01);
        assert!(p.symmetric_eigen().eigenvalues.iter().all(|&v| v >= -1e-15));
        assert!(matches!(
            psd_project(&m, 0.001),
            Err(Error::HomogenizationFailure { .. })
        ));
    }

    #[test]
    fn square_root_roundtrip() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&m);
        assert!((&s * s.transpose() - &m).abs().max() < 1e-12);
    }
}
