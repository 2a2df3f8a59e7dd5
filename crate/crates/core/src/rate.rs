//! Log–log least-squares fits of error against a scale parameter.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    /// Scale parameter: `ε` for sweeps, `T` for κ curves.
    pub x: f64,
    pub error: f64,
    pub se: f64,
    /// Excluded from the fit because `error ≤ 2·se` (or not positive).
    pub censored: bool,
}

impl RatePoint {
    pub fn new(x: f64, error: f64, se: f64) -> Self {
        Self {
            x,
            error,
            se,
            censored: is_censored(error, se),
        }
    }
}

pub fn is_censored(error: f64, se: f64) -> bool {
    !(error > 2.0 * se && error > 0.0 && error.is_finite())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub intercept: f64,
    /// 95% confidence interval of the slope.
    pub slope_ci: (f64, f64),
    pub r_squared: f64,
    pub n_used: usize,
}

impl RateFit {
    pub fn censored_x(&self) -> Vec<f64> {
        self.points.iter().filter(|p| p.censored).map(|p| p.x).collect()
    }
}

/// Ordinary least squares of `ln error` on `ln x` over uncensored points.
pub fn fit_rate(points: &[RatePoint]) -> Result<RateFit> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| !p.censored && p.x > 0.0)
        .map(|p| (p.x.ln(), p.error.ln()))
        .collect();
    let n = used.len();
    if n < 3 {
        return Err(Error::TooFewPoints(n));
    }
    let nf = n as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = used.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = used.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = used.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::invalid("points", "all abscissae coincide"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = used.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let df = nf - 2.0;
    let slope_se = (sse / df / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::invalid("points", e.to_string()))?
        .inverse_cdf(0.975);
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(RateFit {
        points: points.to_vec(),
        slope,
        intercept,
        slope_ci: (slope - t * slope_se, slope + t * slope_se),
        r_squared,
        n_used: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn censoring_rule() {
        assert!(RatePoint::new(0.1, 0.2, 0.1).censored);
        assert!(!RatePoint::new(0.1, 0.21, 0.1).censored);
        assert!(RatePoint::new(0.1, 0.0, 0.0).censored);
    }

    #[test]
    fn two_points_are_too_few() {
        let pts = [RatePoint::new(0.1, 0.1, 0.0), RatePoint::new(0.01, 0.01, 0.0)];
        assert!(matches!(fit_rate(&pts), Err(Error::TooFewPoints(2))));
    }

    #[test]
    fn exact_power_law() {
        let pts: Vec<_> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&e| RatePoint::new(e, 3.0 * e, 0.0))
            .collect();
        let fit = fit_rate(&pts).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }
}
