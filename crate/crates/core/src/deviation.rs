//! Normalized deviation `Z^ε = (Y^ε − Ȳ)/ε^ϑ` and its linear limit
//! `dZ̄ = D_yF̄̄(Ȳ)Z̄ dt + D_yG(Ȳ)Z̄ dW² + Σ̄̄(Ȳ) dW̃ + Υ(Ȳ) dt`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::noise::{PathNoise, PurposeTag};
use crate::poisson::psd_sqrt;
use crate::sde::{AveragedDynamics, AveragedStepper, MacroIncrements, TimeGrid, Trajectory};
use crate::system::SystemSpec;

pub type SlowMatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type SlowMatrixListFn = Arc<dyn Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync>;
pub type SlowVectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `Z^ε` on a macro grid together with the pair it was formed from.
#[derive(Clone, Debug)]
pub struct DeviationPath {
    pub eps: f64,
    /// Normalization exponent `ϑ`; `1/2` for the central limit.
    pub theta: f64,
    pub z: Trajectory,
    pub y_eps: Trajectory,
    pub y_bar: Trajectory,
}

/// `(Y^ε − Ȳ)/√ε` pointwise. `y_eps` may live on a refinement of the grid of
/// `y_bar`; it is subsampled to the common nodes.
pub fn build_deviation(y_eps: &Trajectory, y_bar: &Trajectory, eps: f64) -> Result<DeviationPath> {
    build_deviation_with_exponent(y_eps, y_bar, eps, 0.5)
}

pub fn build_deviation_with_exponent(
    y_eps: &Trajectory,
    y_bar: &Trajectory,
    eps: f64,
    theta: f64,
) -> Result<DeviationPath> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid("eps", format!("{eps} not in (0, 1]")));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::invalid("theta", "must be positive"));
    }
    match (y_eps.noise, y_bar.noise) {
        (Some(a), Some(b)) if a == b => {}
        (Some(_), Some(_)) => return Err(Error::Coupling("paths use different noise identities".into())),
        _ => return Err(Error::Coupling("noise identity missing".into())),
    }
    if y_eps.dim != y_bar.dim {
        return Err(Error::Coupling("dimension mismatch".into()));
    }
    let (ge, gb) = (y_eps.grid, y_bar.grid);
    if ge.t0 != gb.t0 || ge.t1 != gb.t1 || ge.n_steps % gb.n_steps != 0 {
        return Err(Error::Coupling(format!(
            "grids [{}, {}]/{} and [{}, {}]/{} do not nest",
            ge.t0, ge.t1, ge.n_steps, gb.t0, gb.t1, gb.n_steps
        )));
    }
    let y_eps = y_eps.subsample(ge.n_steps / gb.n_steps)?;
    if y_eps.state(0) != y_bar.state(0) {
        return Err(Error::Coupling("initial conditions differ".into()));
    }
    let scale = eps.powf(theta);
    let states = y_eps
        .states
        .iter()
        .zip(&y_bar.states)
        .map(|(a, b)| (a - b) / scale)
        .collect();
    Ok(DeviationPath {
        eps,
        theta,
        z: Trajectory {
            grid: gb,
            dim: y_bar.dim,
            states,
            noise: y_bar.noise,
        },
        y_eps,
        y_bar: y_bar.clone(),
    })
}

/// Coefficients of the limiting equation, all evaluated along `Ȳ`.
#[derive(Clone)]
pub struct LimitOUSpec {
    pub dim: usize,
    pub slow_noise_dim: usize,
    /// `D_yF̄̄`, `dim × dim`.
    pub drift_jacobian: SlowMatrixFn,
    /// One `dim × dim` matrix `∂_y G_{·k}` per column `k` of the slow diffusion.
    pub diffusion_jacobians: SlowMatrixListFn,
    /// `Σ̄̄`, `dim × dim`; `None` for the degenerate variant without
    /// homogenized noise.
    pub homogenized: Option<SlowMatrixFn>,
    /// Additional drift `Υ`, zero by default.
    pub extra_drift: Option<SlowVectorFn>,
    /// Normalization exponent `ϑ` of the deviation this limit describes.
    pub theta: f64,
    /// Coefficients do not depend on `Ȳ`; steppers evaluate them once.
    pub constant: bool,
}

impl LimitOUSpec {
    /// Standard limit with zero extra drift and `ϑ = 1/2`.
    pub fn new(
        dim: usize,
        slow_noise_dim: usize,
        drift_jacobian: SlowMatrixFn,
        diffusion_jacobians: SlowMatrixListFn,
        homogenized: SlowMatrixFn,
    ) -> Self {
        Self {
            dim,
            slow_noise_dim,
            drift_jacobian,
            diffusion_jacobians,
            homogenized: Some(homogenized),
            extra_drift: None,
            theta: 0.5,
            constant: false,
        }
    }

    /// Limit with an additional drift `Υ`.
    pub fn with_extra_drift(mut self, upsilon: SlowVectorFn) -> Self {
        self.extra_drift = Some(upsilon);
        self
    }

    /// Variant without homogenized noise: `Σ̄̄ = 0`, drift `Ῡ`, normalization
    /// `ε^ϑ`.
    pub fn degenerate(mut self, upsilon: SlowVectorFn, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::invalid("theta", "must be positive"));
        }
        self.homogenized = None;
        self.extra_drift = Some(upsilon);
        self.theta = theta;
        Ok(self)
    }

    /// Jacobians by central differences of the `double_bar_f` and `bar_g`
    /// oracles, `Σ̄̄` as the square root of the `double_bar_sigma_sq` oracle.
    pub fn from_oracles(sys: &SystemSpec) -> Result<Self> {
        let missing = |what: &str| Error::MissingCoefficients(format!("{} has no {what} oracle", sys.name()));
        let f = sys
            .oracles
            .double_bar_f
            .clone()
            .ok_or_else(|| missing("double_bar_f"))?;
        let g = sys.oracles.bar_g.clone().ok_or_else(|| missing("bar_g"))?;
        let s = sys
            .oracles
            .double_bar_sigma_sq
            .clone()
            .ok_or_else(|| missing("double_bar_sigma_sq"))?;
        let dims = sys.dims();
        let (d2, m2) = (dims.slow, dims.slow_noise);
        let drift_jacobian: SlowMatrixFn = Arc::new(move |y| {
            jacobian_fd(&|z: &[f64]| Ok(f(z)), y, ORACLE_FD_STEP).expect("oracle evaluations are finite")
        });
        let diffusion_jacobians: SlowMatrixListFn = Arc::new(move |y| {
            (0..m2)
                .map(|k| {
                    jacobian_fd(
                        &|z: &[f64]| Ok(g(z).column(k).iter().copied().collect()),
                        y,
                        ORACLE_FD_STEP,
                    )
                    .expect("oracle evaluations are finite")
                })
                .collect()
        });
        Ok(Self::new(
            d2,
            m2,
            drift_jacobian,
            diffusion_jacobians,
            Arc::new(move |y| psd_sqrt(&s(y))),
        ))
    }

    /// Constant coefficients.
    pub fn constant(
        drift_jacobian: DMatrix<f64>,
        diffusion_jacobians: Vec<DMatrix<f64>>,
        homogenized: DMatrix<f64>,
    ) -> Self {
        let dim = drift_jacobian.nrows();
        let m2 = diffusion_jacobians.len();
        Self {
            constant: true,
            ..Self::new(
                dim,
                m2,
                Arc::new(move |_| drift_jacobian.clone()),
                Arc::new(move |_| diffusion_jacobians.clone()),
                Arc::new(move |_| homogenized.clone()),
            )
        }
    }

    /// Replace the coefficients by their values at `points[0]` when every
    /// coefficient agrees across `points` to relative tolerance `tol`.
    pub fn freeze_if_constant(self, points: &[Vec<f64>], tol: f64) -> Self {
        if self.constant || points.is_empty() {
            return self;
        }
        let close = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).abs().max() <= tol * (1.0 + a.abs().max());
        let y0 = &points[0];
        let a0 = (self.drift_jacobian)(y0);
        let g0 = (self.diffusion_jacobians)(y0);
        let h0 = self.homogenized.as_ref().map(|h| h(y0));
        let u0 = self.extra_drift.as_ref().map(|u| u(y0));
        let same = points[1..].iter().all(|y| {
            close(&a0, &(self.drift_jacobian)(y))
                && g0.iter().zip((self.diffusion_jacobians)(y)).all(|(a, b)| close(a, &b))
                && match (&h0, &self.homogenized) {
                    (Some(a), Some(h)) => close(a, &h(y)),
                    _ => true,
                }
                && match (&u0, &self.extra_drift) {
                    (Some(a), Some(u)) => a.iter().zip(u(y)).all(|(a, b)| (a - b).abs() <= tol * (1.0 + a.abs())),
                    _ => true,
                }
        });
        if !same {
            return self;
        }
        Self {
            drift_jacobian: Arc::new(move |_| a0.clone()),
            diffusion_jacobians: Arc::new(move |_| g0.clone()),
            homogenized: h0.map(|h| Arc::new(move |_: &[f64]| h.clone()) as SlowMatrixFn),
            extra_drift: u0.map(|u| Arc::new(move |_: &[f64]| u.clone()) as SlowVectorFn),
            constant: true,
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        Ok(())
    }
}

const ORACLE_FD_STEP: f64 = 1e-5;

/// Smallest Jacobian step for Monte Carlo estimated functions with standard
/// error `se`.
pub fn fd_step(se: f64) -> f64 {
    (3.0 * se).max(1e-3)
}

/// Central-difference Jacobian `∂f_i/∂y_j`. With Monte Carlo `f`, every
/// evaluation must reuse the same seeds.
pub fn jacobian_fd(f: &dyn Fn(&[f64]) -> Result<Vec<f64>>, y: &[f64], h: f64) -> Result<DMatrix<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", format!("{h} must be positive")));
    }
    let mut cols = Vec::with_capacity(y.len());
    let mut rows = None;
    for j in 0..y.len() {
        let mut yp = y.to_vec();
        let mut ym = y.to_vec();
        yp[j] += h;
        ym[j] -= h;
        let fp = f(&yp)?;
        let fm = f(&ym)?;
        if fp.len() != fm.len() || rows.is_some_and(|r| r != fp.len()) {
            return Err(Error::invalid("f", "output dimension varies"));
        }
        rows = Some(fp.len());
        let col: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("jacobian column {j}")));
        }
        cols.push(col);
    }
    let r = rows.unwrap_or(0);
    Ok(DMatrix::from_fn(r, y.len(), |i, j| cols[j][i]))
}

struct LimitCoefficients {
    a: DMatrix<f64>,
    dg: Vec<DMatrix<f64>>,
    sigma: Option<DMatrix<f64>>,
    upsilon: Option<Vec<f64>>,
}

impl LimitCoefficients {
    fn eval(spec: &LimitOUSpec, y: &[f64]) -> Self {
        Self {
            a: (spec.drift_jacobian)(y),
            dg: if spec.slow_noise_dim > 0 {
                (spec.diffusion_jacobians)(y)
            } else {
                Vec::new()
            },
            sigma: spec.homogenized.as_ref().map(|h| h(y)),
            upsilon: spec.extra_drift.as_ref().map(|u| u(y)),
        }
    }
}

/// One Euler–Maruyama step of the limit equation at `Ȳ = y_bar`.
pub(crate) struct LimitStepper<'a> {
    spec: &'a LimitOUSpec,
    cached: Option<LimitCoefficients>,
    next: Vec<f64>,
}

impl<'a> LimitStepper<'a> {
    pub(crate) fn new(spec: &'a LimitOUSpec) -> Self {
        Self {
            spec,
            cached: None,
            next: vec![0.0; spec.dim],
        }
    }

    pub(crate) fn step(&mut self, y_bar: &[f64], z: &mut [f64], dt: f64, dw2: &[f64], dw_tilde: &[f64]) {
        let d = self.spec.dim;
        let fresh;
        let c = if self.spec.constant {
            self.cached
                .get_or_insert_with(|| LimitCoefficients::eval(self.spec, y_bar))
        } else {
            fresh = LimitCoefficients::eval(self.spec, y_bar);
            &fresh
        };
        for i in 0..d {
            let mut drift: f64 = (0..d).map(|j| c.a[(i, j)] * z[j]).sum();
            if let Some(u) = &c.upsilon {
                drift += u[i];
            }
            let mut v = z[i] + drift * dt;
            for (m, w) in c.dg.iter().zip(dw2) {
                v += (0..d).map(|j| m[(i, j)] * z[j]).sum::<f64>() * w;
            }
            if let Some(sig) = &c.sigma {
                v += (0..d).map(|j| sig[(i, j)] * dw_tilde[j]).sum::<f64>();
            }
            self.next[i] = v;
        }
        z.copy_from_slice(&self.next);
    }
}

/// `Z̄` along a stored `Ȳ` path. Its `W²` increments are the sums over
/// `micro_per_macro` micro increments of the `SLOW` stream, matching
/// [`crate::sde::simulate_averaged_coupled`]; `W̃` is read from the `LIMIT`
/// stream at macro resolution.
pub fn simulate_limit_ou(
    spec: &LimitOUSpec,
    y_bar: &Trajectory,
    micro_per_macro: usize,
    noise: PathNoise,
) -> Result<Trajectory> {
    spec.validate()?;
    if y_bar.dim != spec.dim {
        return Err(Error::invalid("y_bar", "dimension mismatch"));
    }
    if micro_per_macro == 0 {
        return Err(Error::invalid("micro_per_macro", "must be positive"));
    }
    if let Some(n) = y_bar.noise {
        if n != noise {
            return Err(Error::Coupling("averaged path uses a different noise identity".into()));
        }
    }
    let grid = y_bar.grid;
    let dt = grid.dt();
    let micro_dt = dt / micro_per_macro as f64;
    let mut incs = MacroIncrements::new(noise, micro_dt, micro_per_macro, spec.slow_noise_dim);
    let mut tilde = noise.stream(PurposeTag::LIMIT).gaussians();
    let mut stepper = LimitStepper::new(spec);
    let mut dw2 = vec![0.0; spec.slow_noise_dim];
    let mut dwt = vec![0.0; spec.dim];
    let mut z = vec![0.0; spec.dim];
    let mut states = Vec::with_capacity((grid.n_steps + 1) * spec.dim);
    states.extend_from_slice(&z);
    for k in 0..grid.n_steps {
        incs.next(&mut dw2);
        tilde.fill_scaled(dt.sqrt(), &mut dwt);
        stepper.step(y_bar.state(k), &mut z, dt, &dw2, &dwt);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: k + 1,
                t: grid.time(k + 1),
            });
        }
        states.extend_from_slice(&z);
    }
    Ok(Trajectory {
        grid,
        dim: spec.dim,
        states,
        noise: Some(noise),
    })
}

/// Simulate `Ȳ` and `Z̄` together on `grid` (one `W²` increment per step) and
/// call `observe(k, t, ȳ, z̄)` at every node.
pub fn run_limit_path(
    avg: &dyn AveragedDynamics,
    spec: &LimitOUSpec,
    y0: &[f64],
    grid: TimeGrid,
    noise: PathNoise,
    mut observe: impl FnMut(usize, f64, &[f64], &[f64]),
) -> Result<()> {
    spec.validate()?;
    if avg.dim() != spec.dim || avg.noise_dim() != spec.slow_noise_dim || y0.len() != spec.dim {
        return Err(Error::invalid("limit", "dimension mismatch"));
    }
    let dt = grid.dt();
    let mut incs = MacroIncrements::new(noise, dt, 1, spec.slow_noise_dim);
    let mut tilde = noise.stream(PurposeTag::LIMIT).gaussians();
    let mut avg_stepper = AveragedStepper::new(avg);
    let mut stepper = LimitStepper::new(spec);
    let mut dw2 = vec![0.0; spec.slow_noise_dim];
    let mut dwt = vec![0.0; spec.dim];
    let mut y = y0.to_vec();
    let mut y_prev = y0.to_vec();
    let mut z = vec![0.0; spec.dim];
    observe(0, grid.t0, &y, &z);
    for k in 0..grid.n_steps {
        incs.next(&mut dw2);
        tilde.fill_scaled(dt.sqrt(), &mut dwt);
        y_prev.copy_from_slice(&y);
        avg_stepper.step(&mut y, dt, &dw2);
        stepper.step(&y_prev, &mut z, dt, &dw2, &dwt);
        let t = grid.time(k + 1);
        if y.iter().chain(&z).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k + 1, t });
        }
        observe(k + 1, t, &y, &z);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{simulate_averaged_coupled, simulate_multiscale, FnAveraged};
    use crate::system::builtin_periodic_ou;

    #[test]
    fn identical_paths_give_zero_deviation() {
        let sys = builtin_periodic_ou(1.0, 1.0, 1.0).unwrap();
        let avg = FnAveraged::from_oracles(&sys).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let noise = PathNoise::new(1, 0);
        let yb = simulate_averaged_coupled(&avg, &[0.0], g, 1, noise).unwrap();
        let d = build_deviation(&yb, &yb, 0.01).unwrap();
        assert!(d.z.states.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_eps_is_plain_difference() {
        let sys = builtin_periodic_ou(1.0, 1.0, 1.0).unwrap();
        let avg = FnAveraged::from_oracles(&sys).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let noise = PathNoise::new(1, 0);
        let fine = g.refine(20).unwrap();
        let (_, ye) = simulate_multiscale(&sys, 1.0, &[0.0], &[0.0], fine, noise, 0.05).unwrap();
        let yb = simulate_averaged_coupled(&avg, &[0.0], g, 20, noise).unwrap();
        let d = build_deviation(&ye, &yb, 1.0).unwrap();
        for k in 0..=10 {
            assert_eq!(d.z.state(k)[0], ye.state(20 * k)[0] - yb.state(k)[0]);
        }
        assert_eq!(d.z.state(0)[0], 0.0);
    }

    #[test]
    fn mismatched_noise_is_a_coupling_error() {
        let sys = builtin_periodic_ou(1.0, 1.0, 1.0).unwrap();
        let avg = FnAveraged::from_oracles(&sys).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let a = simulate_averaged_coupled(&avg, &[0.0], g, 1, PathNoise::new(1, 0)).unwrap();
        let b = simulate_averaged_coupled(&avg, &[0.0], g, 1, PathNoise::new(1, 1)).unwrap();
        assert!(matches!(build_deviation(&a, &b, 0.1), Err(Error::Coupling(_))));
    }

    #[test]
    fn jacobian_examples() {
        let j = jacobian_fd(
            &|y: &[f64]| Ok(y.iter().map(|v| -2.0 * v).collect()),
            &[0.3, -1.0],
            1e-3,
        )
        .unwrap();
        assert!((j - DMatrix::identity(2, 2) * -2.0).abs().max() < 1e-10);
        let j = jacobian_fd(&|y: &[f64]| Ok(vec![y[0] * y[0]]), &[2.0], 1e-3).unwrap();
        assert!((j[(0, 0)] - 4.0).abs() < 1e-5);
        assert_eq!(fd_step(0.01), 0.03);
        assert_eq!(fd_step(1e-6), 1e-3);
    }

    #[test]
    fn fused_limit_matches_stored_path() {
        let sys = builtin_periodic_ou(1.0, 1.0, 0.5).unwrap();
        let avg = FnAveraged::from_oracles(&sys).unwrap();
        let spec = LimitOUSpec::from_oracles(&sys).unwrap();
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let noise = PathNoise::new(4, 2);
        let yb = simulate_averaged_coupled(&avg, &[0.3], g, 1, noise).unwrap();
        let z = simulate_limit_ou(&spec, &yb, 1, noise).unwrap();
        let mut fused = Vec::new();
        run_limit_path(&avg, &spec, &[0.3], g, noise, |_, _, _, z| fused.push(z[0])).unwrap();
        assert_eq!(fused, z.states);
    }
}
