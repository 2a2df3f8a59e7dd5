//! Euler–Maruyama integration on uniform grids.
//!
//! Increment `k` of a `m`-dimensional driver uses standard normals number
//! `k·m .. k·m + m` of its [`NoiseStream`], scaled by `√dt`. Slow-driver
//! increments of the coupled system are summed per macro step in a fixed order,
//! so the averaged equation sees exactly the same Brownian path.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{Gaussians, NoiseStream, PathNoise, PurposeTag};
use crate::system::{Coefficients, Dims, SystemSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(Error::invalid("grid", format!("need t1 > t0, got [{t0}, {t1}]")));
        }
        if n_steps == 0 {
            return Err(Error::invalid("grid", "n_steps must be positive"));
        }
        Ok(Self { t0, t1, n_steps })
    }

    /// Finest uniform grid on `[t0, t1]` whose step does not exceed `max_dt`.
    pub fn with_max_step(t0: f64, t1: f64, max_dt: f64) -> Result<Self> {
        if !(max_dt > 0.0) {
            return Err(Error::invalid("dt", format!("{max_dt} must be positive")));
        }
        let n = ((t1 - t0) / max_dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Self::new(t0, t1, n)
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Same interval with every step split into `factor` substeps.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("factor", "must be positive"));
        }
        Self::new(self.t0, self.t1, self.n_steps * factor)
    }
}

/// States on a grid, stored row-major (`(n_steps + 1) × dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub dim: usize,
    pub states: Vec<f64>,
    /// Driver identity, when the trajectory came from a seeded simulation.
    pub noise: Option<PathNoise>,
}

impl Trajectory {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.grid.n_steps)
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().skip(i).step_by(self.dim).copied().collect()
    }

    /// Every `stride`-th state, on the correspondingly coarser grid.
    pub fn subsample(&self, stride: usize) -> Result<Trajectory> {
        if stride == 0 || !self.grid.n_steps.is_multiple_of(stride) {
            return Err(Error::invalid(
                "stride",
                format!("{stride} does not divide {} steps", self.grid.n_steps),
            ));
        }
        let n = self.grid.n_steps / stride;
        let mut states = Vec::with_capacity((n + 1) * self.dim);
        for k in 0..=n {
            states.extend_from_slice(self.state(k * stride));
        }
        Ok(Trajectory {
            grid: TimeGrid::new(self.grid.t0, self.grid.t1, n)?,
            dim: self.dim,
            states,
            noise: self.noise,
        })
    }
}

fn check_finite(state: &[f64], step: usize, t: f64) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step, t })
    }
}

/// `out += m · v` for a row-major `out.len() × v.len()` matrix.
#[inline]
fn add_mat_vec(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(v) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// Euler–Maruyama for `dX = drift(t, X) dt + diffusion(t, X) dW` with a
/// `noise_dim`-dimensional driver read from `noise`.
pub fn simulate_generic<D, S>(
    drift: D,
    diffusion: S,
    noise_dim: usize,
    x0: &[f64],
    grid: TimeGrid,
    noise: NoiseStream,
) -> Result<Trajectory>
where
    D: Fn(f64, &[f64], &mut [f64]),
    S: Fn(f64, &[f64], &mut [f64]),
{
    let d = x0.len();
    if d == 0 {
        return Err(Error::invalid("x0", "empty state"));
    }
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut gauss = noise.gaussians();
    let mut states = Vec::with_capacity((grid.n_steps + 1) * d);
    states.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let mut a = vec![0.0; d];
    let mut s = vec![0.0; d * noise_dim];
    let mut dw = vec![0.0; noise_dim];
    for k in 0..grid.n_steps {
        let t = grid.time(k);
        drift(t, &x, &mut a);
        diffusion(t, &x, &mut s);
        gauss.fill_scaled(sqrt_dt, &mut dw);
        for (xi, ai) in x.iter_mut().zip(&a) {
            *xi += ai * dt;
        }
        add_mat_vec(&mut x, &s, &dw);
        check_finite(&x, k + 1, grid.time(k + 1))?;
        states.extend_from_slice(&x);
    }
    Ok(Trajectory {
        grid,
        dim: d,
        states,
        noise: None,
    })
}

/// Gaussian increments of several drivers on one grid, plus trajectories
/// computed from them.
#[derive(Clone, Debug)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub noise: PathNoise,
    /// Per tag: driver dimension and `n_steps × dim` increments.
    pub increments: BTreeMap<PurposeTag, (usize, Vec<f64>)>,
    pub trajectories: BTreeMap<String, Trajectory>,
}

impl PathBundle {
    pub fn generate(noise: PathNoise, grid: TimeGrid, drivers: &[(PurposeTag, usize)]) -> Self {
        let sqrt_dt = grid.dt().sqrt();
        let increments = drivers
            .iter()
            .map(|&(tag, dim)| {
                let mut g = noise.stream(tag).gaussians();
                let mut inc = vec![0.0; grid.n_steps * dim];
                g.fill_scaled(sqrt_dt, &mut inc);
                (tag, (dim, inc))
            })
            .collect();
        Self {
            grid,
            noise,
            increments,
            trajectories: BTreeMap::new(),
        }
    }

    pub fn increment(&self, tag: PurposeTag, step: usize) -> Option<&[f64]> {
        let (dim, inc) = self.increments.get(&tag)?;
        inc.get(step * dim..(step + 1) * dim)
    }

    /// Increments of `tag` on the grid coarsened by `factor`, summed in step
    /// order.
    pub fn aggregate(&self, tag: PurposeTag, factor: usize) -> Result<Vec<f64>> {
        let (dim, inc) = self
            .increments
            .get(&tag)
            .ok_or_else(|| Error::Coupling(format!("bundle has no driver {tag:?}")))?;
        if factor == 0 || !self.grid.n_steps.is_multiple_of(factor) {
            return Err(Error::invalid("factor", "must divide the number of steps"));
        }
        let mut out = vec![0.0; self.grid.n_steps / factor * dim];
        for (k, step) in inc.chunks_exact(*dim).enumerate() {
            let macro_k = k / factor;
            for (o, v) in out[macro_k * dim..(macro_k + 1) * dim].iter_mut().zip(step) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn insert_trajectory(&mut self, name: impl Into<String>, trajectory: Trajectory) {
        self.trajectories.insert(name.into(), trajectory);
    }
}

/// One Euler–Maruyama step of the ε-scaled coupled system, with reusable
/// buffers. Shared by every runner of the multiscale equation.
pub(crate) struct MultiscaleStepper<'a> {
    coef: &'a dyn Coefficients,
    dims: Dims,
    inv_eps: f64,
    inv_sqrt_eps: f64,
    dt: f64,
    sqrt_dt: f64,
    b: Vec<f64>,
    sigma: Vec<f64>,
    pub(crate) f: Vec<f64>,
    g: Vec<f64>,
    dw1: Vec<f64>,
    pub(crate) dw2: Vec<f64>,
    fast: Gaussians,
    slow: Gaussians,
}

impl<'a> MultiscaleStepper<'a> {
    pub(crate) fn new(sys: &'a SystemSpec, eps: f64, dt: f64, noise: PathNoise) -> Self {
        let dims = sys.dims();
        Self {
            coef: sys.coefficients(),
            dims,
            inv_eps: 1.0 / eps,
            inv_sqrt_eps: 1.0 / eps.sqrt(),
            dt,
            sqrt_dt: dt.sqrt(),
            b: vec![0.0; dims.fast],
            sigma: vec![0.0; dims.fast * dims.fast_noise],
            f: vec![0.0; dims.slow],
            g: vec![0.0; dims.slow * dims.slow_noise],
            dw1: vec![0.0; dims.fast_noise],
            dw2: vec![0.0; dims.slow_noise],
            fast: noise.stream(PurposeTag::FAST).gaussians(),
            slow: noise.stream(PurposeTag::SLOW).gaussians(),
        }
    }

    /// Advance `(x, y)` from real time `t`. Afterwards `self.f` holds the slow
    /// drift at the old state and `self.dw2` the slow increment just used.
    #[inline]
    pub(crate) fn step(&mut self, t: f64, x: &mut [f64], y: &mut [f64]) {
        let s = t * self.inv_eps;
        self.coef.fast_drift(s, x, y, &mut self.b);
        self.coef.fast_diffusion(s, x, y, &mut self.sigma);
        self.coef.slow_drift(s, x, y, &mut self.f);
        self.coef.slow_diffusion(s, y, &mut self.g);
        self.fast.fill_scaled(self.sqrt_dt, &mut self.dw1);
        self.slow.fill_scaled(self.sqrt_dt, &mut self.dw2);

        let drift_scale = self.dt * self.inv_eps;
        for v in self.dw1.iter_mut() {
            *v *= self.inv_sqrt_eps;
        }
        for (xi, bi) in x.iter_mut().zip(&self.b) {
            *xi += bi * drift_scale;
        }
        add_mat_vec(x, &self.sigma, &self.dw1);
        for (yi, fi) in y.iter_mut().zip(&self.f) {
            *yi += fi * self.dt;
        }
        add_mat_vec(y, &self.g, &self.dw2);
    }

    pub(crate) fn dims(&self) -> Dims {
        self.dims
    }
}

pub(crate) fn check_eps_and_step(eps: f64, dt: f64, h_rel: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid("eps", format!("{eps} must lie in (0, 1]")));
    }
    if !(h_rel > 0.0) {
        return Err(Error::invalid("h_rel", format!("{h_rel} must be positive")));
    }
    if dt > h_rel * eps * (1.0 + 1e-9) {
        return Err(Error::Config(format!(
            "micro step {dt:e} exceeds h_rel·eps = {:e}",
            h_rel * eps
        )));
    }
    Ok(())
}

/// Number of micro steps per macro step so that the micro step is at most
/// `h_rel·eps`.
pub fn micro_steps_per_macro(macro_grid: &TimeGrid, eps: f64, h_rel: f64) -> usize {
    let target = h_rel * eps;
    ((macro_grid.dt() / target) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Coupled Euler–Maruyama for the ε-scaled system on `grid`, returning the
/// fast and slow trajectories. `W¹` and `W²` come from the `FAST` and `SLOW`
/// streams of `noise`.
pub fn simulate_multiscale(
    sys: &SystemSpec,
    eps: f64,
    x0: &[f64],
    y0: &[f64],
    grid: TimeGrid,
    noise: PathNoise,
    h_rel: f64,
) -> Result<(Trajectory, Trajectory)> {
    check_eps_and_step(eps, grid.dt(), h_rel)?;
    let dims = sys.dims();
    if x0.len() != dims.fast || y0.len() != dims.slow {
        return Err(Error::invalid("initial state", "dimension mismatch"));
    }
    let mut stepper = MultiscaleStepper::new(sys, eps, grid.dt(), noise);
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut xs = Vec::with_capacity((grid.n_steps + 1) * dims.fast);
    let mut ys = Vec::with_capacity((grid.n_steps + 1) * dims.slow);
    xs.extend_from_slice(&x);
    ys.extend_from_slice(&y);
    for k in 0..grid.n_steps {
        stepper.step(grid.time(k), &mut x, &mut y);
        check_finite(&x, k + 1, grid.time(k + 1))?;
        check_finite(&y, k + 1, grid.time(k + 1))?;
        xs.extend_from_slice(&x);
        ys.extend_from_slice(&y);
    }
    let traj = |dim, states| Trajectory {
        grid,
        dim,
        states,
        noise: Some(noise),
    };
    Ok((traj(dims.fast, xs), traj(dims.slow, ys)))
}

/// Drift and diffusion of an averaged slow equation `dȲ = F̄̄(Ȳ)dt + Ḡ(Ȳ)dW²`.
pub trait AveragedDynamics: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, y: &[f64], out: &mut [f64]);
    /// Row-major `dim × noise_dim`.
    fn diffusion(&self, y: &[f64], out: &mut [f64]);
}

type OutFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Averaged dynamics from closures.
#[derive(Clone)]
pub struct FnAveraged {
    pub dim: usize,
    pub noise_dim: usize,
    pub drift: OutFn,
    pub diffusion: OutFn,
}

impl FnAveraged {
    /// Averaged dynamics from the `double_bar_f` and `bar_g` oracles of `sys`.
    pub fn from_oracles(sys: &SystemSpec) -> Result<Self> {
        let f = sys
            .oracles
            .double_bar_f
            .clone()
            .ok_or_else(|| Error::MissingCoefficients(format!("{} has no averaged drift oracle", sys.name())))?;
        let g =
            sys.oracles.bar_g.clone().ok_or_else(|| {
                Error::MissingCoefficients(format!("{} has no averaged diffusion oracle", sys.name()))
            })?;
        let dims = sys.dims();
        Ok(Self {
            dim: dims.slow,
            noise_dim: dims.slow_noise,
            drift: Arc::new(move |y, out| out.copy_from_slice(&f(y))),
            diffusion: Arc::new(move |y, out| {
                let m = g(y);
                let cols = m.ncols();
                for i in 0..m.nrows() {
                    for j in 0..cols {
                        out[i * cols + j] = m[(i, j)];
                    }
                }
            }),
        })
    }
}

impl AveragedDynamics for FnAveraged {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn drift(&self, y: &[f64], out: &mut [f64]) {
        (self.drift)(y, out)
    }
    fn diffusion(&self, y: &[f64], out: &mut [f64]) {
        (self.diffusion)(y, out)
    }
}

/// Reads micro-step `W²` increments and sums them per macro step.
pub(crate) struct MacroIncrements {
    slow: Gaussians,
    sqrt_dt_micro: f64,
    micro_per_macro: usize,
    micro: Vec<f64>,
}

impl MacroIncrements {
    pub(crate) fn new(noise: PathNoise, micro_dt: f64, micro_per_macro: usize, dim: usize) -> Self {
        Self {
            slow: noise.stream(PurposeTag::SLOW).gaussians(),
            sqrt_dt_micro: micro_dt.sqrt(),
            micro_per_macro,
            micro: vec![0.0; dim],
        }
    }

    pub(crate) fn next(&mut self, out: &mut [f64]) {
        out.fill(0.0);
        for _ in 0..self.micro_per_macro {
            self.slow.fill_scaled(self.sqrt_dt_micro, &mut self.micro);
            for (o, v) in out.iter_mut().zip(&self.micro) {
                *o += v;
            }
        }
    }
}

/// One averaged-equation step with buffers.
pub(crate) struct AveragedStepper<'a> {
    avg: &'a dyn AveragedDynamics,
    drift: Vec<f64>,
    diffusion: Vec<f64>,
}

impl<'a> AveragedStepper<'a> {
    pub(crate) fn new(avg: &'a dyn AveragedDynamics) -> Self {
        Self {
            avg,
            drift: vec![0.0; avg.dim()],
            diffusion: vec![0.0; avg.dim() * avg.noise_dim()],
        }
    }

    #[inline]
    pub(crate) fn step(&mut self, y: &mut [f64], dt: f64, dw: &[f64]) {
        self.avg.drift(y, &mut self.drift);
        self.avg.diffusion(y, &mut self.diffusion);
        for (yi, fi) in y.iter_mut().zip(&self.drift) {
            *yi += fi * dt;
        }
        add_mat_vec(y, &self.diffusion, dw);
    }
}

/// Euler–Maruyama for the averaged equation on `macro_grid`. Its `W²`
/// increment over a macro step is the sum of the `micro_per_macro` micro
/// increments that [`simulate_multiscale`] uses on the refined grid.
pub fn simulate_averaged_coupled(
    avg: &dyn AveragedDynamics,
    y0: &[f64],
    macro_grid: TimeGrid,
    micro_per_macro: usize,
    noise: PathNoise,
) -> Result<Trajectory> {
    if y0.len() != avg.dim() {
        return Err(Error::invalid("y0", "dimension mismatch"));
    }
    let micro = macro_grid.refine(micro_per_macro)?;
    let mut incs = MacroIncrements::new(noise, micro.dt(), micro_per_macro, avg.noise_dim());
    let mut stepper = AveragedStepper::new(avg);
    let mut dw = vec![0.0; avg.noise_dim()];
    let mut y = y0.to_vec();
    let mut states = Vec::with_capacity((macro_grid.n_steps + 1) * y.len());
    states.extend_from_slice(&y);
    let dt = macro_grid.dt();
    for k in 0..macro_grid.n_steps {
        incs.next(&mut dw);
        stepper.step(&mut y, dt, &dw);
        check_finite(&y, k + 1, macro_grid.time(k + 1))?;
        states.extend_from_slice(&y);
    }
    Ok(Trajectory {
        grid: macro_grid,
        dim: y0.len(),
        states,
        noise: Some(noise),
    })
}

/// State of one coupled path at a macro node.
pub struct MacroObservation<'a> {
    pub k: usize,
    pub t: f64,
    pub x: &'a [f64],
    pub y_eps: &'a [f64],
    pub y_bar: &'a [f64],
    /// `∫₀ᵗ [F(r/ε, X, Y^ε) − F̄̄(Y^ε)] dr` (left-point rule), when tracked.
    pub fluctuation: &'a [f64],
}

/// Settings of [`run_coupled_path`].
#[derive(Clone, Copy, Debug)]
pub struct CoupledRun {
    pub eps: f64,
    pub macro_grid: TimeGrid,
    pub micro_per_macro: usize,
    pub h_rel: f64,
    pub track_fluctuation: bool,
}

impl CoupledRun {
    pub fn new(eps: f64, macro_grid: TimeGrid, h_rel: f64) -> Self {
        Self {
            eps,
            macro_grid,
            micro_per_macro: micro_steps_per_macro(&macro_grid, eps, h_rel),
            h_rel,
            track_fluctuation: false,
        }
    }
}

/// Simulate `(X^ε, Y^ε)` and `Ȳ` on a shared `W²` in one pass, calling
/// `observe` at every macro node (including `t0`). Equivalent to
/// [`simulate_multiscale`] on the refined grid plus
/// [`simulate_averaged_coupled`], bit for bit, without storing paths.
pub fn run_coupled_path(
    sys: &SystemSpec,
    avg: &dyn AveragedDynamics,
    run: &CoupledRun,
    x0: &[f64],
    y0: &[f64],
    noise: PathNoise,
    mut observe: impl FnMut(&MacroObservation),
) -> Result<()> {
    let micro = run.macro_grid.refine(run.micro_per_macro)?;
    check_eps_and_step(run.eps, micro.dt(), run.h_rel)?;
    let dims = sys.dims();
    if avg.dim() != dims.slow || avg.noise_dim() != dims.slow_noise {
        return Err(Error::invalid("averaged dynamics", "dimension mismatch with system"));
    }
    let mut stepper = MultiscaleStepper::new(sys, run.eps, micro.dt(), noise);
    let mut avg_stepper = AveragedStepper::new(avg);
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut ybar = y0.to_vec();
    let mut dw_macro = vec![0.0; dims.slow_noise];
    let mut fluct = vec![0.0; dims.slow];
    let mut fbar = vec![0.0; dims.slow];
    let micro_dt = micro.dt();
    let macro_dt = run.macro_grid.dt();
    observe(&MacroObservation {
        k: 0,
        t: run.macro_grid.t0,
        x: &x,
        y_eps: &y,
        y_bar: &ybar,
        fluctuation: &fluct,
    });
    let mut step = 0usize;
    for k in 0..run.macro_grid.n_steps {
        dw_macro.fill(0.0);
        for _ in 0..run.micro_per_macro {
            if run.track_fluctuation {
                avg.drift(&y, &mut fbar);
            }
            stepper.step(micro.time(step), &mut x, &mut y);
            step += 1;
            for (o, v) in dw_macro.iter_mut().zip(&stepper.dw2) {
                *o += v;
            }
            if run.track_fluctuation {
                for ((acc, f), fb) in fluct.iter_mut().zip(&stepper.f).zip(&fbar) {
                    *acc += (f - fb) * micro_dt;
                }
            }
        }
        let t = run.macro_grid.time(k + 1);
        check_finite(&x, step, t)?;
        check_finite(&y, step, t)?;
        avg_stepper.step(&mut ybar, macro_dt, &dw_macro);
        check_finite(&ybar, k + 1, t)?;
        observe(&MacroObservation {
            k: k + 1,
            t,
            x: &x,
            y_eps: &y,
            y_bar: &ybar,
            fluctuation: &fluct,
        });
    }
    debug_assert_eq!(stepper.dims(), dims);
    Ok(())
}
