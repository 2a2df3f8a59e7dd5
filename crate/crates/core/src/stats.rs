//! Ensemble statistics and deterministic parallel reductions.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

/// Paths per parallel work unit. Blocks are merged in index order, so results
/// do not depend on the number of worker threads.
pub const BLOCK: usize = 64;

/// Run `work` on consecutive index blocks of `0..n` in parallel and return the
/// per-block results in block order.
pub fn par_blocks<T, F>(n: usize, block: usize, work: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let block = block.max(1);
    let n_blocks = n.div_ceil(block);
    (0..n_blocks)
        .into_par_iter()
        .map(|b| work(b * block..((b + 1) * block).min(n)))
        .collect()
}

/// Like [`par_blocks`] followed by an in-order fold with `merge`.
pub fn par_reduce<T, F, M>(n: usize, block: usize, work: F, mut merge: M) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    M: FnMut(&mut T, T),
{
    let mut parts = par_blocks(n, block, work).into_iter();
    let mut acc = parts.next()?;
    for p in parts {
        merge(&mut acc, p);
    }
    Some(acc)
}

/// Running mean and variance (Welford), mergeable with Chan's update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let nf = n as f64;
        self.mean += delta * other.n as f64 / nf;
        self.m2 += other.m2 + delta * delta * self.n as f64 * other.n as f64 / nf;
        self.n = n;
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Moments::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Scalar Monte Carlo estimate with standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Self { value, se }
    }

    /// Whether `target` lies within `k` standard errors (inclusive).
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se
    }
}

impl From<Moments> for Estimate {
    fn from(m: Moments) -> Self {
        Estimate::new(m.mean, m.se())
    }
}

/// Vector-valued estimate with componentwise standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecEstimate {
    pub value: Vec<f64>,
    pub se: Vec<f64>,
}

impl VecEstimate {
    pub fn from_moments(m: &[Moments]) -> Self {
        Self {
            value: m.iter().map(|m| m.mean).collect(),
            se: m.iter().map(|m| m.se()).collect(),
        }
    }

    pub fn component(&self, i: usize) -> Estimate {
        Estimate::new(self.value[i], self.se[i])
    }
}

/// Mean vector, covariance matrix and standard errors of an ensemble of
/// `dim`-vectors stored row-major in one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMoments {
    pub n: usize,
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub mean_se: Vec<f64>,
    /// Standard errors of the diagonal variances.
    pub variance_se: Vec<f64>,
}

impl EnsembleMoments {
    pub fn from_flat(samples: &[f64], dim: usize) -> Self {
        assert!(dim > 0 && samples.len().is_multiple_of(dim));
        let n = samples.len() / dim;
        let mut mean = vec![0.0; dim];
        for row in samples.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut cov: DMatrix<f64> = DMatrix::zeros(dim, dim);
        let mut m4 = vec![0.0; dim];
        for row in samples.chunks_exact(dim) {
            for i in 0..dim {
                let di = row[i] - mean[i];
                m4[i] += di.powi(4);
                for j in 0..=i {
                    cov[(i, j)] += di * (row[j] - mean[j]);
                }
            }
        }
        let denom = (n.max(2) - 1) as f64;
        for i in 0..dim {
            for j in 0..=i {
                let v = cov[(i, j)] / denom;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let nf = n as f64;
        let mean_se = (0..dim).map(|i| (cov[(i, i)] / nf).sqrt()).collect();
        let variance_se = (0..dim)
            .map(|i| {
                let s2 = cov[(i, i)];
                ((m4[i] / nf - s2 * s2).max(0.0) / nf).sqrt()
            })
            .collect();
        Self {
            n,
            mean,
            covariance: cov,
            mean_se,
            variance_se,
        }
    }
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merged_moments_equal_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let whole = Moments::from_slice(&xs);
        let mut a = Moments::from_slice(&xs[..313]);
        a.merge(&Moments::from_slice(&xs[313..]));
        assert!((whole.mean - a.mean).abs() < 1e-12);
        assert!((whole.variance() - a.variance()).abs() < 1e-10);
    }

    #[test]
    fn block_reduction_is_ordered() {
        let parts = par_blocks(1000, 64, |r| r.start);
        assert_eq!(parts, (0..1000).step_by(64).collect::<Vec<_>>());
        let total = par_reduce(1000, 7, |r| r.sum::<usize>(), |a, b| *a += b);
        assert_eq!(total, Some(499_500));
        assert_eq!(par_reduce(0, 7, |r| r.len(), |a, b| *a += b), None);
    }

    #[test]
    fn ensemble_moments_of_known_sample() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let m = EnsembleMoments::from_flat(&s, 2);
        assert_eq!(m.n, 3);
        assert_eq!(m.mean, vec![3.0, 4.0]);
        assert!((m.covariance[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((m.covariance[(0, 1)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ks_of_quantiles_is_small() {
        let n = 1000;
        let xs: Vec<f64> = (0..n)
            .map(|i| crate::noise::inverse_normal_cdf((i as f64 + 0.5) / n as f64))
            .collect();
        assert!(ks_statistic(&xs, normal_cdf) < 1e-3);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
    }
}
