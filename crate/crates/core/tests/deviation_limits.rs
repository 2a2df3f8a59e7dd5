use std::f64::consts::SQRT_2;
use std::sync::Arc;

use nalgebra::DMatrix;

use slowfast::averaging::{estimate_double_bar_f, DoubleAverageConfig};
use slowfast::deviation::*;
use slowfast::error::Error;
use slowfast::frozen::CloudConfig;
use slowfast::noise::{PathNoise, PurposeTag};
use slowfast::sde::*;
use slowfast::stats::{par_blocks, Moments, BLOCK};
use slowfast::system::*;

fn ou() -> SystemSpec {
    builtin_periodic_ou(1.0, 1.0, 1.0).unwrap()
}

fn limit_variance() -> f64 {
    // ∫₀¹ 2 e^{-2(1-s)} ds
    1.0 - (-2.0f64).exp()
}

fn variance_with_se(xs: &[f64]) -> (f64, f64) {
    let m = Moments::from_slice(xs);
    let sq = Moments::from_slice(&xs.iter().map(|v| (v - m.mean).powi(2)).collect::<Vec<_>>());
    (m.variance(), sq.se())
}

fn coupled_pair(sys: &SystemSpec, eps: f64, h_rel: f64, macro_steps: usize, path: u64) -> (Trajectory, Trajectory) {
    let avg = FnAveraged::from_oracles(sys).unwrap();
    let macro_grid = TimeGrid::new(0.0, 1.0, macro_steps).unwrap();
    let factor = micro_steps_per_macro(&macro_grid, eps, h_rel);
    let micro = macro_grid.refine(factor).unwrap();
    let noise = PathNoise::new(31, path);
    let (_, y_eps) = simulate_multiscale(sys, eps, &[0.0], &[0.0], micro, noise, h_rel).unwrap();
    let y_bar = simulate_averaged_coupled(&avg, &[0.0], macro_grid, factor, noise).unwrap();
    (y_eps, y_bar)
}

#[test]
fn deviation_is_the_scaled_difference() {
    let (y_eps, y_bar) = coupled_pair(&ou(), 0.1, 0.01, 20, 0);
    let dev = build_deviation(&y_eps, &y_bar, 0.1).unwrap();
    assert_eq!(dev.z.state(0), &[0.0]);
    let stride = y_eps.grid.n_steps / y_bar.grid.n_steps;
    for k in 0..=y_bar.grid.n_steps {
        let expected = (y_eps.state(k * stride)[0] - y_bar.state(k)[0]) / 0.1f64.sqrt();
        assert_eq!(dev.z.state(k)[0], expected);
    }
}

#[test]
fn identical_paths_and_unit_scale() {
    let (y_eps, y_bar) = coupled_pair(&ou(), 1.0, 0.01, 10, 1);
    let same = build_deviation(&y_bar, &y_bar, 0.01).unwrap();
    assert!(same.z.states.iter().all(|&v| v == 0.0));
    let unit = build_deviation(&y_eps, &y_bar, 1.0).unwrap();
    let stride = y_eps.grid.n_steps / 10;
    for k in 0..=10 {
        assert_eq!(unit.z.state(k)[0], y_eps.state(k * stride)[0] - y_bar.state(k)[0]);
    }
}

#[test]
fn mismatched_pairs_are_coupling_errors() {
    let (y_eps, _) = coupled_pair(&ou(), 0.1, 0.01, 10, 2);
    let (_, other) = coupled_pair(&ou(), 0.1, 0.01, 10, 3);
    assert!(matches!(build_deviation(&y_eps, &other, 0.1), Err(Error::Coupling(_))));
    let (y_eps, y_bar) = coupled_pair(&ou(), 0.1, 0.01, 10, 4);
    let coarse = Trajectory {
        grid: TimeGrid::new(0.0, 1.0, 3).unwrap(),
        states: y_bar.states[..4].to_vec(),
        ..y_bar.clone()
    };
    assert!(matches!(build_deviation(&y_eps, &coarse, 0.1), Err(Error::Coupling(_))));
    assert!(build_deviation(&y_eps, &y_bar, 0.0).is_err());
}

#[test]
fn deviation_variance_near_the_limit() {
    // reduced ensemble; the acceptance suite repeats this at 10⁵ paths
    let sys = ou();
    let eps = 1e-3;
    let n = 20_000;
    let z = par_blocks(n, BLOCK, |range| {
        range
            .map(|p| {
                let (y_eps, y_bar) = coupled_pair(&sys, eps, 0.05, 100, p as u64);
                build_deviation(&y_eps, &y_bar, eps).unwrap().z.last()[0]
            })
            .collect::<Vec<_>>()
    })
    .concat();
    let (v, _) = variance_with_se(&z);
    assert!((v - limit_variance()).abs() <= 0.1 * limit_variance(), "{v}");
}

#[test]
fn silent_limit_stays_at_zero() {
    let spec = LimitOUSpec::constant(
        DMatrix::from_element(1, 1, -1.0),
        vec![DMatrix::zeros(1, 1)],
        DMatrix::zeros(1, 1),
    );
    let (_, y_bar) = coupled_pair(&ou(), 0.1, 0.01, 50, 5);
    let z = simulate_limit_ou(&spec, &y_bar, 10, y_bar.noise.unwrap()).unwrap();
    assert!(z.states.iter().all(|&v| v == 0.0));
}

fn limit_endpoints(spec: &LimitOUSpec, n: usize, seed: u64) -> Vec<f64> {
    let avg = FnAveraged::from_oracles(&ou()).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
    par_blocks(n, BLOCK, |range| {
        range
            .map(|p| {
                let mut end = 0.0;
                run_limit_path(
                    &avg,
                    spec,
                    &[0.0],
                    grid,
                    PathNoise::new(seed, p as u64),
                    |_, _, _, z| end = z[0],
                )
                .unwrap();
                end
            })
            .collect::<Vec<_>>()
    })
    .concat()
}

#[test]
fn limit_variance_matches_closed_form() {
    let spec = LimitOUSpec::from_oracles(&ou()).unwrap();
    let (v, se) = variance_with_se(&limit_endpoints(&spec, 100_000, 8));
    assert!((v - limit_variance()).abs() <= 3.0 * se, "{v} ± {se}");
}

#[test]
fn extra_drift_without_homogenized_noise() {
    let spec = LimitOUSpec::from_oracles(&ou())
        .unwrap()
        .degenerate(Arc::new(|_| vec![1.0]), 1.0)
        .unwrap();
    let ends = limit_endpoints(&spec, 1_000, 9);
    let m = Moments::from_slice(&ends);
    let truth = 1.0 - (-1.0f64).exp();
    assert!(
        (m.mean - truth).abs() <= (3.0 * m.se()).max(1e-3),
        "{} ± {}",
        m.mean,
        m.se()
    );
}

#[test]
fn doubling_homogenized_noise_doubles_the_spread() {
    let spec = |s: f64| {
        LimitOUSpec::constant(
            DMatrix::from_element(1, 1, -1.0),
            vec![DMatrix::zeros(1, 1)],
            DMatrix::from_element(1, 1, s),
        )
    };
    let (v1, se1) = variance_with_se(&limit_endpoints(&spec(SQRT_2), 20_000, 10));
    let (v2, se2) = variance_with_se(&limit_endpoints(&spec(2.0 * SQRT_2), 20_000, 11));
    let (s1, s2) = (v1.sqrt(), v2.sqrt());
    // delta method for the standard deviations
    let se = (2.0 * se1 / (2.0 * s1)).hypot(se2 / (2.0 * s2));
    assert!((s2 - 2.0 * s1).abs() <= 3.0 * se, "{s1} {s2}");
}

#[test]
fn jacobians_of_closed_forms() {
    let k = 1.7;
    let j = jacobian_fd(
        &|y: &[f64]| Ok(y.iter().map(|v| -k * v).collect()),
        &[0.3, -2.0, 5.0],
        1e-3,
    )
    .unwrap();
    assert!((j - DMatrix::<f64>::identity(3, 3) * -k).abs().max() < 1e-10);
    let j = jacobian_fd(&|y: &[f64]| Ok(vec![y[0] * y[0]]), &[2.0], 1e-3).unwrap();
    assert!((j[(0, 0)] - 4.0).abs() < 1e-5);
    assert!(jacobian_fd(&|y: &[f64]| Ok(vec![(y[0] - 1.0).ln()]), &[1.0], 1e-3).is_err());
}

#[test]
fn jacobian_of_the_estimated_double_average() {
    let sys = ou();
    let cfg = DoubleAverageConfig {
        cloud: CloudConfig {
            n_particles: 4_000,
            seed: 12,
            ..Default::default()
        },
        ..Default::default()
    };
    let f = |y: &[f64]| estimate_double_bar_f(&sys, y, &cfg).map(|d| d.value.value);
    let j = jacobian_fd(&f, &[1.0], 0.25).unwrap();
    assert!((j[(0, 0)] + 1.0).abs() < 0.05, "{j}");
    assert_eq!(fd_step(0.0), 1e-3);
    assert_eq!(fd_step(0.01), 0.03);
}

#[test]
fn homogenized_driver_is_independent_of_the_slow_driver() {
    let n = 100_000;
    let noise = PathNoise::new(77, 0);
    let mut a = noise.stream(PurposeTag::SLOW).gaussians();
    let mut b = noise.stream(PurposeTag::LIMIT).gaussians();
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let (x, y) = (a.next_normal(), b.next_normal());
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    let corr = sab / (saa * sbb).sqrt();
    assert!(corr.abs() < 0.01, "{corr}");
}
