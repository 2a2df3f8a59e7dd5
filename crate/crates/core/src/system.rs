//! Slow–fast system description, analytic oracles and built-in test systems.
//!
//! A system couples a fast component `X ∈ R^{d1}` and a slow component
//! `Y ∈ R^{d2}`:
//!
//! ```text
//! dX = b(t/ε, X, Y)/ε dt + σ(t/ε, X, Y)/√ε dW¹
//! dY = F(t/ε, X, Y) dt   + G(t/ε, Y) dW²
//! ```
//!
//! Coefficients are evaluated into caller-provided buffers so the simulation
//! loops never allocate. Matrices are row-major (`d × m`).

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficient evaluators of a slow–fast system. Implementations must be pure
/// and reentrant.
pub trait Coefficients: Send + Sync {
    /// Fast drift `b(t, x, y)`, length `d1`.
    fn fast_drift(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]);
    /// Fast diffusion `σ(t, x, y)`, `d1 × m1` row-major.
    fn fast_diffusion(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]);
    /// Slow drift `F(t, x, y)`, length `d2`.
    fn slow_drift(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]);
    /// Slow diffusion `G(t, y)`, `d2 × m2` row-major.
    fn slow_diffusion(&self, t: f64, y: &[f64], out: &mut [f64]);
}

pub type StateFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type SlowStateFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

pub type TimeSlowVec = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;
pub type TimeSlowMat = Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;
pub type SlowVec = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type SlowMat = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type FullVec = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// `d1`
    pub fast: usize,
    /// `d2`
    pub slow: usize,
    /// `m1`, columns of σ
    pub fast_noise: usize,
    /// `m2`, columns of G
    pub slow_noise: usize,
}

/// Closed forms available for a test system.
#[derive(Clone, Default)]
pub struct AnalyticOracles {
    /// Mean of `μ_t^y`.
    pub invariant_mean: Option<TimeSlowVec>,
    /// Covariance of `μ_t^y`.
    pub invariant_cov: Option<TimeSlowMat>,
    /// `F̄(t, y) = ∫ F(t, x, y) μ_t^y(dx)`.
    pub bar_f: Option<TimeSlowVec>,
    /// Time-and-measure average `F̄̄(y)`.
    pub double_bar_f: Option<SlowVec>,
    /// Time-averaged slow diffusion `Ḡ(y)`.
    pub bar_g: Option<SlowMat>,
    /// Solution `Φ(t, x, y)` of the Poisson equation with source `F − F̄`.
    pub phi: Option<FullVec>,
    /// Homogenized diffusion `Σ̄̄Σ̄̄*(y)`.
    pub double_bar_sigma_sq: Option<SlowMat>,
}

impl std::fmt::Debug for AnalyticOracles {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalyticOracles")
            .field("invariant_mean", &self.invariant_mean.is_some())
            .field("invariant_cov", &self.invariant_cov.is_some())
            .field("bar_f", &self.bar_f.is_some())
            .field("double_bar_f", &self.double_bar_f.is_some())
            .field("bar_g", &self.bar_g.is_some())
            .field("phi", &self.phi.is_some())
            .field("double_bar_sigma_sq", &self.double_bar_sigma_sq.is_some())
            .finish()
    }
}

/// Complete description of one slow–fast system.
#[derive(Clone)]
pub struct SystemSpec {
    name: String,
    dims: Dims,
    coefficients: Arc<dyn Coefficients>,
    /// Declared Hölder exponent in `x` (metadata, never verified).
    pub alpha: f64,
    /// Declared Hölder exponent in `y` (metadata, never verified).
    pub beta: f64,
    /// Declared time period of all coefficients.
    pub period: Option<f64>,
    pub oracles: AnalyticOracles,
}

impl std::fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("period", &self.period)
            .field("oracles", &self.oracles)
            .finish()
    }
}

impl SystemSpec {
    pub fn new(name: impl Into<String>, dims: Dims, coefficients: Arc<dyn Coefficients>) -> Result<Self> {
        for (n, v) in [
            ("d1", dims.fast),
            ("d2", dims.slow),
            ("m1", dims.fast_noise),
            ("m2", dims.slow_noise),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter {
                    name: "dims",
                    reason: format!("{n} must be positive"),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            dims,
            coefficients,
            alpha: 1.0,
            beta: 1.0,
            period: None,
            oracles: AnalyticOracles::default(),
        })
    }

    pub fn builder(name: impl Into<String>, d1: usize, d2: usize) -> SystemBuilder {
        SystemBuilder::new(name, d1, d2)
    }

    pub fn with_regularity(mut self, alpha: f64, beta: f64) -> Result<Self> {
        for (n, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidParameter {
                    name: "regularity",
                    reason: format!("{n} = {v} must lie in (0, 1]"),
                });
            }
        }
        self.alpha = alpha;
        self.beta = beta;
        Ok(self)
    }

    pub fn with_period(mut self, period: f64) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::invalid("period", format!("{period} must be positive")));
        }
        self.period = Some(period);
        Ok(self)
    }

    pub fn with_oracles(mut self, oracles: AnalyticOracles) -> Self {
        self.oracles = oracles;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn d1(&self) -> usize {
        self.dims.fast
    }

    pub fn d2(&self) -> usize {
        self.dims.slow
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coefficients.as_ref()
    }

    pub fn b(&self, t: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.fast];
        self.coefficients.fast_drift(t, x, y, &mut out);
        out
    }

    pub fn sigma(&self, t: f64, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let mut out = vec![0.0; self.dims.fast * self.dims.fast_noise];
        self.coefficients.fast_diffusion(t, x, y, &mut out);
        DMatrix::from_row_slice(self.dims.fast, self.dims.fast_noise, &out)
    }

    pub fn f(&self, t: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.slow];
        self.coefficients.slow_drift(t, x, y, &mut out);
        out
    }

    pub fn g(&self, t: f64, y: &[f64]) -> DMatrix<f64> {
        let mut out = vec![0.0; self.dims.slow * self.dims.slow_noise];
        self.coefficients.slow_diffusion(t, y, &mut out);
        DMatrix::from_row_slice(self.dims.slow, self.dims.slow_noise, &out)
    }

    /// Diffusion matrix `a = σσ*` of the fast process.
    pub fn fast_generator_diffusion(&self, t: f64, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let s = self.sigma(t, x, y);
        &s * s.transpose()
    }
}

/// Closure-backed coefficients, see [`SystemSpec::builder`].
#[derive(Clone)]
pub struct FnCoefficients {
    pub fast_drift: StateFn,
    pub fast_diffusion: StateFn,
    pub slow_drift: StateFn,
    pub slow_diffusion: SlowStateFn,
}

impl Coefficients for FnCoefficients {
    fn fast_drift(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.fast_drift)(t, x, y, out)
    }
    fn fast_diffusion(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.fast_diffusion)(t, x, y, out)
    }
    fn slow_drift(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.slow_drift)(t, x, y, out)
    }
    fn slow_diffusion(&self, t: f64, y: &[f64], out: &mut [f64]) {
        (self.slow_diffusion)(t, y, out)
    }
}

/// Builder for closure-defined systems. Defaults: `b = −x`, `σ = √2·I`,
/// `F = 0`, `G = 0` with `m1 = d1`, `m2 = d2`.
pub struct SystemBuilder {
    name: String,
    dims: Dims,
    coefficients: FnCoefficients,
    alpha: f64,
    beta: f64,
    period: Option<f64>,
    oracles: AnalyticOracles,
}

impl SystemBuilder {
    fn new(name: impl Into<String>, d1: usize, d2: usize) -> Self {
        Self {
            name: name.into(),
            dims: Dims {
                fast: d1,
                slow: d2,
                fast_noise: d1,
                slow_noise: d2,
            },
            coefficients: FnCoefficients {
                fast_drift: Arc::new(|_, x, _, out: &mut [f64]| out.iter_mut().zip(x).for_each(|(o, x)| *o = -x)),
                fast_diffusion: Arc::new(move |_, x, _, out: &mut [f64]| {
                    let d = x.len();
                    out.fill(0.0);
                    for i in 0..d {
                        out[i * d + i] = SQRT_2;
                    }
                }),
                slow_drift: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
                slow_diffusion: Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
            },
            alpha: 1.0,
            beta: 1.0,
            period: None,
            oracles: AnalyticOracles::default(),
        }
    }

    pub fn fast_drift(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.coefficients.fast_drift = Arc::new(f);
        self
    }

    pub fn fast_diffusion(
        mut self,
        m1: usize,
        f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dims.fast_noise = m1;
        self.coefficients.fast_diffusion = Arc::new(f);
        self
    }

    pub fn slow_drift(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.coefficients.slow_drift = Arc::new(f);
        self
    }

    pub fn slow_diffusion(mut self, m2: usize, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.dims.slow_noise = m2;
        self.coefficients.slow_diffusion = Arc::new(f);
        self
    }

    pub fn regularity(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn period(mut self, period: f64) -> Self {
        self.period = Some(period);
        self
    }

    pub fn oracles(mut self, oracles: AnalyticOracles) -> Self {
        self.oracles = oracles;
        self
    }

    pub fn build(self) -> Result<SystemSpec> {
        let mut sys = SystemSpec::new(self.name, self.dims, Arc::new(self.coefficients))?
            .with_regularity(self.alpha, self.beta)?
            .with_oracles(self.oracles);
        if let Some(p) = self.period {
            sys = sys.with_period(p)?;
        }
        Ok(sys)
    }
}

/// One-dimensional fast Ornstein–Uhlenbeck process relaxing towards a sum of
/// sinusoids, coupled to a linear slow equation:
///
/// ```text
/// b = −(x − Σ a_k sin(ω_k t)),  σ = √2,  F = x − κ y,  G = g0
/// ```
///
/// Its evolution system of invariant measures is `N(m(t), 1)` where `m` is the
/// bounded solution of `ṁ = −m + Σ a_k sin(ω_k t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearForcedOu {
    /// `(amplitude, angular frequency)` pairs.
    pub forcing: Vec<(f64, f64)>,
    pub kappa: f64,
    pub g0: f64,
}

impl LinearForcedOu {
    pub fn forcing_at(&self, t: f64) -> f64 {
        self.forcing.iter().map(|&(a, w)| a * (w * t).sin()).sum()
    }

    /// `m(t) = Σ a (sin ωt − ω cos ωt) / (1 + ω²)`
    pub fn forced_mean(&self, t: f64) -> f64 {
        self.forcing
            .iter()
            .map(|&(a, w)| {
                let (s, c) = (w * t).sin_cos();
                a * (s - w * c) / (1.0 + w * w)
            })
            .sum()
    }

    pub fn forced_mean_derivative(&self, t: f64) -> f64 {
        self.forcing
            .iter()
            .map(|&(a, w)| {
                let (s, c) = (w * t).sin_cos();
                a * w * (c + w * s) / (1.0 + w * w)
            })
            .sum()
    }

    fn oracles(&self) -> AnalyticOracles {
        let kappa = self.kappa;
        let g0 = self.g0;
        let mean = {
            let me = self.clone();
            move |t: f64| me.forced_mean(t)
        };
        let m1 = mean.clone();
        let m2 = mean.clone();
        let m3 = mean;
        AnalyticOracles {
            invariant_mean: Some(Arc::new(move |t, _| vec![m1(t)])),
            invariant_cov: Some(Arc::new(|_, _| DMatrix::from_element(1, 1, 1.0))),
            bar_f: Some(Arc::new(move |t, y| vec![m2(t) - kappa * y[0]])),
            double_bar_f: Some(Arc::new(move |y| vec![-kappa * y[0]])),
            bar_g: Some(Arc::new(move |_| DMatrix::from_element(1, 1, g0))),
            phi: Some(Arc::new(move |t, x, _| vec![x[0] - m3(t)])),
            double_bar_sigma_sq: Some(Arc::new(|_| DMatrix::from_element(1, 1, 2.0))),
        }
    }

    pub fn into_system(self, name: &str) -> Result<SystemSpec> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid(
                "kappa",
                format!(
                    "{} must be positive (the averaged equation must be dissipative)",
                    self.kappa
                ),
            ));
        }
        if !(self.g0 >= 0.0 && self.g0.is_finite()) {
            return Err(Error::invalid("g0", format!("{} must be non-negative", self.g0)));
        }
        if self.forcing.iter().any(|&(a, w)| !a.is_finite() || !w.is_finite()) {
            return Err(Error::invalid("forcing", "amplitudes and frequencies must be finite"));
        }
        let oracles = self.oracles();
        let dims = Dims {
            fast: 1,
            slow: 1,
            fast_noise: 1,
            slow_noise: 1,
        };
        Ok(SystemSpec::new(name, dims, Arc::new(self))?.with_oracles(oracles))
    }
}

impl Coefficients for LinearForcedOu {
    #[inline]
    fn fast_drift(&self, t: f64, x: &[f64], _y: &[f64], out: &mut [f64]) {
        out[0] = -(x[0] - self.forcing_at(t));
    }
    #[inline]
    fn fast_diffusion(&self, _t: f64, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out[0] = SQRT_2;
    }
    #[inline]
    fn slow_drift(&self, _t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = x[0] - self.kappa * y[0];
    }
    #[inline]
    fn slow_diffusion(&self, _t: f64, _y: &[f64], out: &mut [f64]) {
        out[0] = self.g0;
    }
}

/// Periodically forced OU test system with period `2π`.
pub fn builtin_periodic_ou(c: f64, kappa: f64, g0: f64) -> Result<SystemSpec> {
    LinearForcedOu {
        forcing: vec![(c, 1.0)],
        kappa,
        g0,
    }
    .into_system("periodic_ou")?
    .with_period(2.0 * PI)
}

/// Quasi-periodically forced OU with forcing `c1 sin t + c2 sin(√2 t)`.
pub fn builtin_quasi_periodic(c1: f64, c2: f64, kappa: f64, g0: f64) -> Result<SystemSpec> {
    LinearForcedOu {
        forcing: vec![(c1, 1.0), (c2, SQRT_2)],
        kappa,
        g0,
    }
    .into_system("quasi_periodic")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearParams {
    /// Amplitude of the `tanh(y)·sin t` forcing.
    pub forcing: f64,
    /// Constant slow diffusion.
    pub slow_noise: f64,
}

impl Default for NonlinearParams {
    fn default() -> Self {
        Self {
            forcing: 1.0,
            slow_noise: 1.0,
        }
    }
}

struct Nonlinear(NonlinearParams);

impl Coefficients for Nonlinear {
    #[inline]
    fn fast_drift(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = -x[0] + self.0.forcing * y[0].tanh() * t.sin();
    }
    #[inline]
    fn fast_diffusion(&self, _t: f64, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out[0] = SQRT_2;
    }
    #[inline]
    fn slow_drift(&self, _t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = x[0].sin() - y[0];
    }
    #[inline]
    fn slow_diffusion(&self, _t: f64, _y: &[f64], out: &mut [f64]) {
        out[0] = self.0.slow_noise;
    }
}

/// Nonlinear `2π`-periodic stress system without oracles:
/// `b = −x + tanh(y) sin t`, `σ = √2`, `F = sin x − y`, `G = 1`.
pub fn builtin_nonlinear(params: NonlinearParams) -> Result<SystemSpec> {
    if !params.forcing.is_finite() || !params.slow_noise.is_finite() {
        return Err(Error::invalid("params", "must be finite"));
    }
    let dims = Dims {
        fast: 1,
        slow: 1,
        fast_noise: 1,
        slow_noise: 1,
    };
    SystemSpec::new("nonlinear", dims, Arc::new(Nonlinear(params)))?.with_period(2.0 * PI)
}

/// Result of evaluating every coefficient twice on random inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PurityReport {
    pub bit_identical: bool,
    pub finite: bool,
}

fn random_point(rng: &mut ChaCha8Rng, dims: Dims, t_span: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let t = rng.random_range(-t_span..t_span);
    let x = (0..dims.fast).map(|_| rng.random_range(-5.0..5.0)).collect();
    let y = (0..dims.slow).map(|_| rng.random_range(-5.0..5.0)).collect();
    (t, x, y)
}

fn eval_all(sys: &SystemSpec, t: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut v = sys.b(t, x, y);
    v.extend(sys.sigma(t, x, y).transpose().iter());
    v.extend(sys.f(t, x, y));
    v.extend(sys.g(t, y).transpose().iter());
    v
}

/// Evaluate every coefficient twice on `n` random inputs.
pub fn purity_probe(sys: &SystemSpec, n: usize, seed: u64) -> PurityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PurityReport {
        bit_identical: true,
        finite: true,
    };
    for _ in 0..n {
        let (t, x, y) = random_point(&mut rng, sys.dims(), 100.0);
        let a = eval_all(sys, t, &x, &y);
        let b = eval_all(sys, t, &x, &y);
        report.bit_identical &= a.iter().zip(&b).all(|(a, b)| a.to_bits() == b.to_bits());
        report.finite &= a.iter().all(|v| v.is_finite());
    }
    report
}

/// Largest `|f(t + τ) − f(t)|` over all coefficients at `n` random inputs, or
/// `None` when no period is declared.
pub fn periodicity_probe(sys: &SystemSpec, n: usize, seed: u64) -> Option<f64> {
    let tau = sys.period?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (t, x, y) = random_point(&mut rng, sys.dims(), 10.0);
        let a = eval_all(sys, t, &x, &y);
        let b = eval_all(sys, t + tau, &x, &y);
        for (a, b) in a.iter().zip(&b) {
            worst = worst.max((a - b).abs());
        }
    }
    Some(worst)
}

/// Box and resolution for [`dissipativity_probe`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DissipativityBox {
    pub x_half_width: f64,
    pub y_half_width: f64,
    pub t_range: (f64, f64),
    pub points_per_axis: usize,
}

impl Default for DissipativityBox {
    fn default() -> Self {
        Self {
            x_half_width: 10.0,
            y_half_width: 5.0,
            t_range: (0.0, 2.0 * PI),
            points_per_axis: 41,
        }
    }
}

/// Grid maximum of `⟨x, b(t,x,y)⟩ + |x|²/2`. A finite value is consistent with
/// the dissipativity part of the fast-process assumption with `c0 = 1/2`.
pub fn dissipativity_probe(sys: &SystemSpec, region: DissipativityBox) -> f64 {
    let dims = sys.dims();
    let n_axes = dims.fast + dims.slow + 1;
    let k = region.points_per_axis.max(2);
    let axis = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (k - 1) as f64;
    let total = k.pow(n_axes as u32);
    let mut worst = f64::NEG_INFINITY;
    let mut x = vec![0.0; dims.fast];
    let mut y = vec![0.0; dims.slow];
    let mut b = vec![0.0; dims.fast];
    for idx in 0..total {
        let mut rem = idx;
        let mut digit = || {
            let d = rem % k;
            rem /= k;
            d
        };
        let t = axis(region.t_range.0, region.t_range.1, digit());
        for xi in x.iter_mut() {
            *xi = axis(-region.x_half_width, region.x_half_width, digit());
        }
        for yi in y.iter_mut() {
            *yi = axis(-region.y_half_width, region.y_half_width, digit());
        }
        sys.coefficients().fast_drift(t, &x, &y, &mut b);
        let v: f64 = x.iter().zip(&b).map(|(x, b)| x * b + 0.5 * x * x).sum();
        worst = worst.max(v);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_ou_rejects_non_dissipative_kappa() {
        assert!(matches!(
            builtin_periodic_ou(1.0, 0.0, 0.0),
            Err(Error::InvalidParameter { name: "kappa", .. })
        ));
        assert!(builtin_periodic_ou(1.0, -1.0, 0.0).is_err());
        assert!(builtin_periodic_ou(1.0, 1.0, -0.5).is_err());
        assert!(builtin_quasi_periodic(1.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn unforced_mean_vanishes() {
        let sys = builtin_periodic_ou(0.0, 1.0, 0.0).unwrap();
        let mean = sys.oracles.invariant_mean.as_ref().unwrap();
        for t in [0.0, 0.3, 1.0, 4.0, 100.0] {
            assert_eq!(mean(t, &[0.0])[0], 0.0);
        }
    }

    #[test]
    fn invariant_mean_at_quarter_period() {
        let sys = builtin_periodic_ou(1.0, 1.0, 0.0).unwrap();
        let mean = sys.oracles.invariant_mean.as_ref().unwrap();
        assert!((mean(PI / 2.0, &[0.0])[0] - 0.5).abs() < 1e-15);
        assert!((mean(0.0, &[0.0])[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn mean_solves_forced_relaxation() {
        // ṁ = −m + c sin t, checked by central differences
        let ou = LinearForcedOu {
            forcing: vec![(1.0, 1.0)],
            kappa: 1.0,
            g0: 0.0,
        };
        for &t in &[0.0, 0.7, 2.0, 5.5] {
            let h = 1e-5;
            let fd = (ou.forced_mean(t + h) - ou.forced_mean(t - h)) / (2.0 * h);
            assert!((fd + ou.forced_mean(t) - t.sin()).abs() < 1e-9);
            assert!((ou.forced_mean_derivative(t) + ou.forced_mean(t) - t.sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn phi_oracle_solves_poisson_equation() {
        // ∂tΦ + L0 Φ = −(x − m(t)) for Φ = x − m(t): ∂tΦ = −ṁ, b·∂xΦ = −(x − c sin t), ∂²Φ = 0
        let ou = LinearForcedOu {
            forcing: vec![(1.0, 1.0)],
            kappa: 1.0,
            g0: 0.0,
        };
        for &(t, x) in &[(0.0, 1.0), (1.3, -0.4), (4.0, 2.5)] {
            let lhs = -ou.forced_mean_derivative(t) - (x - t.sin());
            let rhs = -(x - ou.forced_mean(t));
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn quasi_periodic_reduces_to_periodic() {
        let q = builtin_quasi_periodic(1.3, 0.0, 2.0, 0.5).unwrap();
        let p = builtin_periodic_ou(1.3, 2.0, 0.5).unwrap();
        assert!(q.period.is_none());
        for &t in &[0.0, 0.4, 3.0, 17.0] {
            let y = [0.7];
            assert_eq!(
                (q.oracles.invariant_mean.as_ref().unwrap())(t, &y),
                (p.oracles.invariant_mean.as_ref().unwrap())(t, &y)
            );
            assert_eq!(
                (q.oracles.bar_f.as_ref().unwrap())(t, &y),
                (p.oracles.bar_f.as_ref().unwrap())(t, &y)
            );
        }
    }

    #[test]
    fn unforced_quasi_periodic_is_autonomous() {
        let q = builtin_quasi_periodic(0.0, 0.0, 1.5, 0.0).unwrap();
        assert_eq!((q.oracles.double_bar_f.as_ref().unwrap())(&[2.0]), vec![-3.0]);
        assert_eq!((q.oracles.phi.as_ref().unwrap())(3.0, &[0.25], &[1.0]), vec![0.25]);
    }

    #[test]
    fn quasi_periodic_mean_at_origin() {
        let q = builtin_quasi_periodic(1.0, 1.0, 1.0, 0.0).unwrap();
        let m = (q.oracles.invariant_mean.as_ref().unwrap())(0.0, &[0.0])[0];
        assert!((m - (-0.5 - SQRT_2 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn nonlinear_values_at_origin() {
        let sys = builtin_nonlinear(NonlinearParams::default()).unwrap();
        assert_eq!(sys.b(0.0, &[0.0], &[0.0]), vec![0.0]);
        for t in [0.0, 1.0, 2.5] {
            assert_eq!(sys.f(t, &[0.0], &[0.0]), vec![0.0]);
        }
        assert!(sys.oracles.phi.is_none());
    }

    #[test]
    fn nonlinear_passes_dissipativity_probe() {
        let sys = builtin_nonlinear(NonlinearParams::default()).unwrap();
        let worst = dissipativity_probe(&sys, DissipativityBox::default());
        assert!(worst.is_finite());
        // −x²/2 + x tanh(y) sin t ≤ 1/2
        assert!(worst <= 0.5 + 1e-12);
    }

    #[test]
    fn builtins_are_pure_and_periodic() {
        let systems = [
            builtin_periodic_ou(1.0, 1.0, 0.3).unwrap(),
            builtin_quasi_periodic(1.0, 0.5, 1.0, 0.3).unwrap(),
            builtin_nonlinear(NonlinearParams::default()).unwrap(),
        ];
        for sys in &systems {
            let r = purity_probe(sys, 1000, 5);
            assert!(r.bit_identical && r.finite, "{}", sys.name());
            if let Some(dev) = periodicity_probe(sys, 100, 9) {
                assert!(dev <= 1e-12, "{}: {dev}", sys.name());
            }
        }
    }

    #[test]
    fn regularity_metadata_is_validated() {
        let sys = builtin_periodic_ou(1.0, 1.0, 0.0).unwrap();
        assert!(sys.clone().with_regularity(0.5, 1.0).is_ok());
        assert!(sys.clone().with_regularity(0.0, 1.0).is_err());
        assert!(sys.with_regularity(1.0, 1.5).is_err());
    }

    #[test]
    fn builder_defaults_are_standard_ou() {
        let sys = SystemSpec::builder("ou2", 2, 1).build().unwrap();
        assert_eq!(sys.b(0.0, &[1.0, -2.0], &[0.0]), vec![-1.0, 2.0]);
        let s = sys.sigma(0.0, &[0.0, 0.0], &[0.0]);
        assert_eq!(s[(0, 0)], SQRT_2);
        assert_eq!(s[(0, 1)], 0.0);
        assert_eq!(sys.f(0.0, &[1.0, 1.0], &[3.0]), vec![0.0]);
    }
}
