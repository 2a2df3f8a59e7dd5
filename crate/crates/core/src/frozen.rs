//! The frozen fast process `dX = b(t, X, y)dt + σ(t, X, y)dW¹` in real time,
//! particle approximations of its evolution system of invariant measures, the
//! two-parameter semigroup and an empirical mixing-rate probe.
//!
//! Particle `i` of a flow with seed `s` is driven by `PathNoise(s, i)`: its
//! `FAST` stream for the dynamics and its `INITIAL` stream for a standard
//! normal starting point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{Gaussians, NoiseStream, PathNoise, PurposeTag};
use crate::stats::{par_blocks, EnsembleMoments, Estimate, Moments, BLOCK};
use crate::system::{Coefficients, SystemSpec};

/// Uniformly weighted particles approximating `μ_t^y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud {
    pub t: f64,
    pub y: Vec<f64>,
    pub dim: usize,
    /// Row-major `n × dim`.
    pub particles: Vec<f64>,
}

impl ParticleCloud {
    pub fn new(t: f64, y: Vec<f64>, dim: usize, particles: Vec<f64>) -> Result<Self> {
        if dim == 0 || particles.is_empty() || !particles.len().is_multiple_of(dim) {
            return Err(Error::EmptyCloud);
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cloud particle".into()));
        }
        Ok(Self { t, y, dim, particles })
    }

    pub fn len(&self) -> usize {
        self.particles.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.particles.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.len() as f64; self.len()]
    }

    pub fn moments(&self) -> EnsembleMoments {
        EnsembleMoments::from_flat(&self.particles, self.dim)
    }

    /// Particle average of a scalar function with its standard error.
    pub fn average(&self, f: impl Fn(&[f64]) -> f64) -> Estimate {
        let mut m = Moments::default();
        self.iter().for_each(|x| m.push(f(x)));
        m.into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudConfig {
    pub n_particles: usize,
    /// Length of the forward simulation that forgets the initial spread.
    pub burn_in: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            burn_in: 20.0,
            dt: 0.005,
            seed: 0,
        }
    }
}

impl CloudConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::EmptyCloud);
        }
        if !(self.burn_in > 0.0 && self.burn_in.is_finite()) {
            return Err(Error::invalid("burn_in", format!("{} must be positive", self.burn_in)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt", format!("{} must be positive", self.dt)));
        }
        Ok(())
    }
}

/// Where the particles of a flow start.
#[derive(Clone, Copy, Debug)]
pub enum Start<'a> {
    /// Every particle at the same point.
    Point(&'a [f64]),
    /// Particle `i` at particle `i mod n` of the cloud.
    Cloud(&'a ParticleCloud),
    /// Independent `N(0, I)` draws from the `INITIAL` streams.
    StandardNormal,
}

/// Increasing simulation times containing a set of breakpoints, with no step
/// longer than `max_dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSchedule {
    pub times: Vec<f64>,
    /// Index into `times` of each breakpoint, in input order.
    pub marks: Vec<usize>,
}

impl FlowSchedule {
    pub fn new(start: f64, breakpoints: &[f64], max_dt: f64) -> Result<Self> {
        if !(max_dt > 0.0) {
            return Err(Error::invalid("dt", format!("{max_dt} must be positive")));
        }
        let mut times = vec![start];
        let mut marks = Vec::with_capacity(breakpoints.len());
        let mut last = start;
        for &b in breakpoints {
            if !b.is_finite() || b < last {
                return Err(Error::invalid(
                    "breakpoints",
                    "must be finite and non-decreasing from the start time",
                ));
            }
            if b > last {
                let n = ((b - last) / max_dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
                let h = (b - last) / n as f64;
                for k in 1..n {
                    times.push(last + k as f64 * h);
                }
                times.push(b);
                last = b;
            }
            marks.push(times.len() - 1);
        }
        Ok(Self { times, marks })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// Euler–Maruyama stepper of the frozen equation with buffers.
pub(crate) struct FrozenStepper<'a> {
    coef: &'a dyn Coefficients,
    pub(crate) y: Vec<f64>,
    b: Vec<f64>,
    sigma: Vec<f64>,
    dw: Vec<f64>,
}

impl<'a> FrozenStepper<'a> {
    pub(crate) fn new(sys: &'a SystemSpec, y: &[f64]) -> Self {
        let d = sys.dims();
        Self {
            coef: sys.coefficients(),
            y: y.to_vec(),
            b: vec![0.0; d.fast],
            sigma: vec![0.0; d.fast * d.fast_noise],
            dw: vec![0.0; d.fast_noise],
        }
    }

    /// Draw one increment of length `dt` from `gauss`, then advance `x`.
    #[inline]
    pub(crate) fn step(&mut self, t: f64, dt: f64, x: &mut [f64], gauss: &mut Gaussians) {
        gauss.fill_scaled(dt.sqrt(), &mut self.dw);
        self.step_with(t, dt, x);
    }

    /// Advance `x` with the increment currently stored in the buffer.
    #[inline]
    fn step_with(&mut self, t: f64, dt: f64, x: &mut [f64]) {
        self.coef.fast_drift(t, x, &self.y, &mut self.b);
        self.coef.fast_diffusion(t, x, &self.y, &mut self.sigma);
        let m = self.dw.len();
        for (i, xi) in x.iter_mut().enumerate() {
            let mut acc = self.b[i] * dt;
            for j in 0..m {
                acc += self.sigma[i * m + j] * self.dw[j];
            }
            *xi += acc;
        }
    }
}

fn check_state(x: &[f64], step: usize, t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step, t })
    }
}

pub(crate) fn initial_state(start: &Start, seed: u64, i: usize, out: &mut [f64]) {
    match start {
        Start::Point(x) => out.copy_from_slice(x),
        Start::Cloud(c) => out.copy_from_slice(c.particle(i % c.len())),
        Start::StandardNormal => {
            let mut g = PathNoise::new(seed, i as u64).stream(PurposeTag::INITIAL).gaussians();
            g.fill_scaled(1.0, out);
        }
    }
}

/// Evolve `n` particles along `schedule`, calling `observe(acc, i, k, t, x)` at
/// every schedule index `k` (including 0) for particle `i`. Per-block
/// accumulators are merged in block order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn flow_reduce<A, N, O, M>(
    sys: &SystemSpec,
    y: &[f64],
    start: Start,
    seed: u64,
    n: usize,
    schedule: &FlowSchedule,
    new_acc: N,
    observe: O,
    mut merge: M,
) -> Result<A>
where
    A: Send,
    N: Fn() -> A + Sync + Send,
    O: Fn(&mut A, usize, usize, f64, &[f64]) + Sync + Send,
    M: FnMut(&mut A, A),
{
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    if y.len() != sys.d2() {
        return Err(Error::invalid("y", "dimension mismatch"));
    }
    if let Start::Point(x) = start {
        if x.len() != sys.d1() {
            return Err(Error::invalid("x0", "dimension mismatch"));
        }
    }
    let d1 = sys.d1();
    let parts = par_blocks(n, BLOCK, |range| -> Result<A> {
        let mut acc = new_acc();
        let mut stepper = FrozenStepper::new(sys, y);
        let mut x = vec![0.0; d1];
        for i in range {
            initial_state(&start, seed, i, &mut x);
            let mut gauss = PathNoise::new(seed, i as u64).stream(PurposeTag::FAST).gaussians();
            observe(&mut acc, i, 0, schedule.times[0], &x);
            for k in 0..schedule.n_steps() {
                let t = schedule.times[k];
                let t_next = schedule.times[k + 1];
                stepper.step(t, t_next - t, &mut x, &mut gauss);
                check_state(&x, k + 1, t_next)?;
                observe(&mut acc, i, k + 1, t_next, &x);
            }
        }
        Ok(acc)
    });
    let mut iter = parts.into_iter();
    let mut acc = iter.next().ok_or(Error::EmptyCloud)??;
    for p in iter {
        merge(&mut acc, p?);
    }
    Ok(acc)
}

/// Endpoint `X^y_{s,t}(x0)` of one Euler–Maruyama path with step at most `dt`.
pub fn simulate_frozen(
    sys: &SystemSpec,
    s: f64,
    t: f64,
    y: &[f64],
    x0: &[f64],
    dt: f64,
    noise: NoiseStream,
) -> Result<Vec<f64>> {
    if t < s {
        return Err(Error::invalid("t", format!("{t} precedes s = {s}")));
    }
    if x0.len() != sys.d1() || y.len() != sys.d2() {
        return Err(Error::invalid("state", "dimension mismatch"));
    }
    let mut x = x0.to_vec();
    if t == s {
        return Ok(x);
    }
    let schedule = FlowSchedule::new(s, &[t], dt)?;
    let mut stepper = FrozenStepper::new(sys, y);
    let mut gauss = noise.gaussians();
    for k in 0..schedule.n_steps() {
        let (a, b) = (schedule.times[k], schedule.times[k + 1]);
        stepper.step(a, b - a, &mut x, &mut gauss);
        check_state(&x, k + 1, b)?;
    }
    Ok(x)
}

/// Clouds at each of `times` along one particle flow started at `t_start`.
#[allow(clippy::too_many_arguments)]
pub fn evolve_cloud_through(
    sys: &SystemSpec,
    y: &[f64],
    start: Start,
    t_start: f64,
    times: &[f64],
    n_particles: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<ParticleCloud>> {
    let schedule = FlowSchedule::new(t_start, times, dt)?;
    let d1 = sys.d1();
    let n_marks = times.len();
    // mark index lookup per schedule index
    let mut mark_of = vec![usize::MAX; schedule.times.len()];
    for (j, &k) in schedule.marks.iter().enumerate() {
        mark_of[k] = j;
    }
    let mark_of = &mark_of;
    let blocks = flow_reduce(
        sys,
        y,
        start,
        seed,
        n_particles,
        &schedule,
        || vec![Vec::new(); n_marks],
        |acc: &mut Vec<Vec<f64>>, _i, k, _t, x| {
            let j = mark_of[k];
            if j != usize::MAX {
                acc[j].extend_from_slice(x);
                // duplicate breakpoints share a schedule index
                let mut jj = j + 1;
                while jj < n_marks && schedule.marks[jj] == k {
                    acc[jj].extend_from_slice(x);
                    jj += 1;
                }
            }
        },
        |a, b| {
            for (a, b) in a.iter_mut().zip(b) {
                a.extend(b);
            }
        },
    )?;
    blocks
        .into_iter()
        .zip(times)
        .map(|(p, &t)| ParticleCloud::new(t, y.to_vec(), d1, p))
        .collect()
}

/// Approximate `μ_t^y` by evolving `N(0, I)` particles from `t − burn_in`.
pub fn estimate_invariant_cloud(sys: &SystemSpec, t: f64, y: &[f64], cfg: &CloudConfig) -> Result<ParticleCloud> {
    cfg.validate()?;
    let mut clouds = evolve_cloud_through(
        sys,
        y,
        Start::StandardNormal,
        t - cfg.burn_in,
        &[t],
        cfg.n_particles,
        cfg.dt,
        cfg.seed,
    )?;
    Ok(clouds.remove(0))
}

/// Transport `cloud` from its time to `t`. Use a seed different from the one
/// that produced the cloud.
pub fn push_forward(sys: &SystemSpec, cloud: &ParticleCloud, t: f64, dt: f64, seed: u64) -> Result<ParticleCloud> {
    if t < cloud.t {
        return Err(Error::invalid("t", format!("{t} precedes the cloud time {}", cloud.t)));
    }
    if t == cloud.t {
        return Ok(cloud.clone());
    }
    let mut clouds = evolve_cloud_through(sys, &cloud.y, Start::Cloud(cloud), cloud.t, &[t], cloud.len(), dt, seed)?;
    Ok(clouds.remove(0))
}

/// Monte Carlo value of `P^y_{s,t}φ = E φ(t, X^y_{s,t})` averaged over the
/// start: a point, or a cloud (then also averaging over `μ_s`).
#[allow(clippy::too_many_arguments)]
pub fn semigroup_apply(
    sys: &SystemSpec,
    s: f64,
    t: f64,
    y: &[f64],
    phi: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
    start: Start,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Estimate> {
    if t < s {
        return Err(Error::invalid("t", format!("{t} precedes s = {s}")));
    }
    let schedule = FlowSchedule::new(s, &[t], dt)?;
    let last = schedule.n_steps();
    let m = flow_reduce(
        sys,
        y,
        start,
        seed,
        n_paths,
        &schedule,
        Moments::default,
        |acc: &mut Moments, _i, k, t, x| {
            if k == last {
                acc.push(phi(t, x));
            }
        },
        |a, b| a.merge(&b),
    )?;
    Ok(m.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixingConfig {
    pub n_paths: usize,
    pub dt: f64,
    /// Distance between the two synchronously coupled starting points.
    pub separation: f64,
    pub seed: u64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            n_paths: 200,
            dt: 0.005,
            separation: 2.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingEstimate {
    pub delta_hat: f64,
    pub intercept: f64,
    pub lags: Vec<f64>,
    pub mean_distances: Vec<f64>,
    pub log_distances: Vec<f64>,
    /// Root-mean-square residual of the log-linear fit.
    pub residual: f64,
}

/// Fit `ln E|X_a − X_b| ≈ c − δ̂·lag` for two copies of the frozen process
/// started `separation` apart at `t_anchor` and driven by the same noise.
pub fn probe_mixing_rate(
    sys: &SystemSpec,
    y: &[f64],
    t_anchor: f64,
    lags: &[f64],
    cfg: &MixingConfig,
) -> Result<MixingEstimate> {
    if lags.len() < 3 {
        return Err(Error::MixingProbeFailed(format!(
            "need at least 3 lags, got {}",
            lags.len()
        )));
    }
    if lags.windows(2).any(|w| w[1] <= w[0]) || lags[0] <= 0.0 {
        return Err(Error::invalid("lags", "must be positive and strictly increasing"));
    }
    if cfg.n_paths == 0 {
        return Err(Error::EmptyCloud);
    }
    let d1 = sys.d1();
    let breakpoints: Vec<f64> = lags.iter().map(|l| t_anchor + l).collect();
    let schedule = FlowSchedule::new(t_anchor, &breakpoints, cfg.dt)?;
    let offset = 0.5 * cfg.separation / (d1 as f64).sqrt();
    let n_lags = lags.len();
    let parts = par_blocks(cfg.n_paths, BLOCK, |range| -> Result<Vec<f64>> {
        let mut sums = vec![0.0; n_lags];
        let mut a_step = FrozenStepper::new(sys, y);
        let mut b_step = FrozenStepper::new(sys, y);
        for i in range {
            let mut xa = vec![offset; d1];
            let mut xb = vec![-offset; d1];
            let mut gauss = PathNoise::new(cfg.seed, i as u64).stream(PurposeTag::FAST).gaussians();
            let mut mark = 0;
            for k in 0..schedule.n_steps() {
                let (t, t1) = (schedule.times[k], schedule.times[k + 1]);
                a_step.step(t, t1 - t, &mut xa, &mut gauss);
                b_step.dw.copy_from_slice(&a_step.dw);
                b_step.step_with(t, t1 - t, &mut xb);
                check_state(&xa, k + 1, t1)?;
                check_state(&xb, k + 1, t1)?;
                while mark < n_lags && schedule.marks[mark] == k + 1 {
                    sums[mark] += xa.iter().zip(&xb).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    mark += 1;
                }
            }
        }
        Ok(sums)
    });
    let mut totals = vec![0.0; n_lags];
    for p in parts {
        for (t, v) in totals.iter_mut().zip(p?) {
            *t += v;
        }
    }
    let mean_distances: Vec<f64> = totals.iter().map(|s| s / cfg.n_paths as f64).collect();
    if mean_distances.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::MixingProbeFailed(
            "coupled distances vanish or are not finite".into(),
        ));
    }
    let log_distances: Vec<f64> = mean_distances.iter().map(|d| d.ln()).collect();
    let n = n_lags as f64;
    let mx = lags.iter().sum::<f64>() / n;
    let my = log_distances.iter().sum::<f64>() / n;
    let sxx: f64 = lags.iter().map(|l| (l - mx).powi(2)).sum();
    let sxy: f64 = lags.iter().zip(&log_distances).map(|(l, d)| (l - mx) * (d - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (lags
        .iter()
        .zip(&log_distances)
        .map(|(l, d)| (d - intercept - slope * l).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if !(slope < 0.0) {
        return Err(Error::MixingProbeFailed(format!(
            "coupled distances do not decrease (fitted slope {slope:.3e})"
        )));
    }
    Ok(MixingEstimate {
        delta_hat: -slope,
        intercept,
        lags: lags.to_vec(),
        mean_distances,
        log_distances,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::builtin_periodic_ou;

    #[test]
    fn zero_length_flow_is_identity() {
        let sys = builtin_periodic_ou(1.0, 1.0, 0.0).unwrap();
        let x = simulate_frozen(
            &sys,
            1.3,
            1.3,
            &[0.0],
            &[0.123456789],
            0.01,
            NoiseStream::new(0, 0, PurposeTag::FAST),
        )
        .unwrap();
        assert_eq!(x, vec![0.123456789]);
    }

    #[test]
    fn schedule_hits_breakpoints_exactly() {
        let s = FlowSchedule::new(-1.0, &[0.0, 0.0, 0.25, 1.0], 0.1).unwrap();
        for (&m, &b) in s.marks.iter().zip(&[0.0, 0.0, 0.25, 1.0]) {
            assert_eq!(s.times[m], b);
        }
        assert!(s.times.windows(2).all(|w| w[1] - w[0] <= 0.1 + 1e-15));
        assert!(FlowSchedule::new(0.0, &[-1.0], 0.1).is_err());
    }

    #[test]
    fn constant_test_function_is_exact() {
        let sys = builtin_periodic_ou(1.0, 1.0, 0.0).unwrap();
        let e = semigroup_apply(&sys, 0.0, 1.0, &[0.0], &|_, _| 1.0, Start::Point(&[0.3]), 300, 0.01, 2).unwrap();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn identical_starts_fail_the_mixing_probe() {
        let sys = builtin_periodic_ou(1.0, 1.0, 0.0).unwrap();
        let cfg = MixingConfig {
            separation: 0.0,
            n_paths: 10,
            ..Default::default()
        };
        let r = probe_mixing_rate(&sys, &[0.0], 0.0, &[0.5, 1.0, 2.0], &cfg);
        assert!(matches!(r, Err(Error::MixingProbeFailed(_))));
        let r = probe_mixing_rate(&sys, &[0.0], 0.0, &[0.5, 1.0], &MixingConfig::default());
        assert!(matches!(r, Err(Error::MixingProbeFailed(_))));
    }

    #[test]
    fn rejects_bad_cloud_config() {
        let sys = builtin_periodic_ou(1.0, 1.0, 0.0).unwrap();
        let cfg = CloudConfig {
            burn_in: 0.0,
            ..Default::default()
        };
        assert!(estimate_invariant_cloud(&sys, 0.0, &[0.0], &cfg).is_err());
    }
}
