use std::f64::consts::{PI, SQRT_2};

use slowfast::system::*;

fn m_single(c: f64, omega: f64, t: f64) -> f64 {
    // bounded solution of m' = -m + c sin(omega t)
    c * ((omega * t).sin() - omega * (omega * t).cos()) / (1.0 + omega * omega)
}

fn oracle_mean(sys: &SystemSpec, t: f64, y: f64) -> f64 {
    (sys.oracles.invariant_mean.as_ref().unwrap())(t, &[y])[0]
}

#[test]
fn unforced_mean_is_zero_everywhere() {
    let sys = builtin_periodic_ou(0.0, 1.0, 1.0).unwrap();
    for k in 0..20 {
        let t = -3.0 + 0.7 * k as f64;
        assert_eq!(oracle_mean(&sys, t, 0.3), 0.0);
        let cov = (sys.oracles.invariant_cov.as_ref().unwrap())(t, &[0.3]);
        assert_eq!(cov[(0, 0)], 1.0);
    }
}

#[test]
fn forced_mean_at_quarter_period() {
    let sys = builtin_periodic_ou(1.0, 1.0, 1.0).unwrap();
    assert!((oracle_mean(&sys, PI / 2.0, 0.0) - 0.5).abs() < 1e-15);
    for k in 0..50 {
        let t = 0.13 * k as f64;
        assert!((oracle_mean(&sys, t, 1.0) - m_single(1.0, 1.0, t)).abs() < 1e-14);
    }
}

#[test]
fn forced_mean_satisfies_relaxation_ode() {
    let sys = builtin_periodic_ou(1.7, 1.0, 1.0).unwrap();
    let h = 1e-5;
    for k in 0..40 {
        let t = 0.17 * k as f64 - 2.0;
        let dm = (oracle_mean(&sys, t + h, 0.0) - oracle_mean(&sys, t - h, 0.0)) / (2.0 * h);
        let residual = dm + oracle_mean(&sys, t, 0.0) - 1.7 * t.sin();
        assert!(residual.abs() < 1e-8, "t = {t}: {residual}");
    }
}

#[test]
fn phi_solves_the_forced_poisson_equation() {
    // generator -(x - c sin t) d/dx + d²/dx², source x - m(t)
    let c = 1.0;
    let sys = builtin_periodic_ou(c, 1.0, 1.0).unwrap();
    let phi = sys.oracles.phi.clone().unwrap();
    let p = |t: f64, x: f64| phi(t, &[x], &[0.4])[0];
    let (ht, hx) = (1e-5, 1e-3);
    for &(t, x) in &[(0.0, 1.0), (1.3, -2.0), (4.0, 0.25), (-2.2, 3.0)] {
        let dt = (p(t + ht, x) - p(t - ht, x)) / (2.0 * ht);
        let dx = (p(t, x + hx) - p(t, x - hx)) / (2.0 * hx);
        let dxx = (p(t, x + hx) - 2.0 * p(t, x) + p(t, x - hx)) / (hx * hx);
        let lhs = dt - (x - c * t.sin()) * dx + dxx;
        assert!((lhs + (x - m_single(c, 1.0, t))).abs() < 1e-6, "({t}, {x}): {lhs}");
    }
}

#[test]
fn periodic_oracles_match_closed_forms() {
    let (c, kappa, g0) = (1.0, 2.0, 0.5);
    let sys = builtin_periodic_ou(c, kappa, g0).unwrap();
    let o = &sys.oracles;
    for &(t, y) in &[(0.0, 1.0), (2.0, -1.5), (5.5, 0.0)] {
        let m = m_single(c, 1.0, t);
        assert!(((o.bar_f.as_ref().unwrap())(t, &[y])[0] - (m - kappa * y)).abs() < 1e-14);
        assert!(((o.phi.as_ref().unwrap())(t, &[0.7], &[y])[0] - (0.7 - m)).abs() < 1e-14);
        assert_eq!((o.double_bar_f.as_ref().unwrap())(&[y])[0], -kappa * y);
        assert_eq!((o.bar_g.as_ref().unwrap())(&[y])[(0, 0)], g0);
        assert_eq!((o.double_bar_sigma_sq.as_ref().unwrap())(&[y])[(0, 0)], 2.0);
    }
    assert_eq!(sys.period, Some(2.0 * PI));
    assert_eq!(sys.b(0.3, &[1.0], &[0.0]), vec![-(1.0 - 0.3f64.sin())]);
    assert_eq!(sys.sigma(0.3, &[1.0], &[0.0])[(0, 0)], SQRT_2);
    assert_eq!(sys.f(0.3, &[1.0], &[2.0]), vec![1.0 - kappa * 2.0]);
    assert_eq!(sys.g(0.3, &[2.0])[(0, 0)], g0);
}

#[test]
fn non_dissipative_relaxation_is_rejected() {
    assert!(builtin_periodic_ou(1.0, 0.0, 1.0).is_err());
    assert!(builtin_periodic_ou(1.0, -1.0, 1.0).is_err());
    assert!(builtin_quasi_periodic(1.0, 1.0, 0.0, 1.0).is_err());
}

#[test]
fn quasi_periodic_without_second_tone_matches_periodic() {
    let q = builtin_quasi_periodic(1.3, 0.0, 1.0, 1.0).unwrap();
    let p = builtin_periodic_ou(1.3, 1.0, 1.0).unwrap();
    for k in 0..30 {
        let t = 0.41 * k as f64;
        let y = [0.2 * k as f64 - 3.0];
        assert!((oracle_mean(&q, t, y[0]) - oracle_mean(&p, t, y[0])).abs() < 1e-14);
        let (a, b) = (q.oracles.bar_f.as_ref().unwrap(), p.oracles.bar_f.as_ref().unwrap());
        assert!((a(t, &y)[0] - b(t, &y)[0]).abs() < 1e-14);
        let (a, b) = (q.oracles.phi.as_ref().unwrap(), p.oracles.phi.as_ref().unwrap());
        assert!((a(t, &[0.5], &y)[0] - b(t, &[0.5], &y)[0]).abs() < 1e-14);
    }
    assert!(q.period.is_none());
}

#[test]
fn quasi_periodic_autonomous_limit() {
    let q = builtin_quasi_periodic(0.0, 0.0, 1.5, 1.0).unwrap();
    for &y in &[-2.0, 0.0, 1.0] {
        assert_eq!((q.oracles.double_bar_f.as_ref().unwrap())(&[y])[0], -1.5 * y);
        assert_eq!((q.oracles.phi.as_ref().unwrap())(3.0, &[0.8], &[y])[0], 0.8);
    }
}

#[test]
fn quasi_periodic_mean_at_origin() {
    let q = builtin_quasi_periodic(1.0, 1.0, 1.0, 1.0).unwrap();
    let expected = m_single(1.0, 1.0, 0.0) + m_single(1.0, SQRT_2, 0.0);
    assert!((expected - (-0.5 - SQRT_2 / 3.0)).abs() < 1e-15);
    assert!((oracle_mean(&q, 0.0, 0.0) - expected).abs() < 1e-14);
}

#[test]
fn nonlinear_values_at_origin() {
    let sys = builtin_nonlinear(NonlinearParams::default()).unwrap();
    assert_eq!(sys.b(0.0, &[0.0], &[0.0]), vec![0.0]);
    for k in 0..10 {
        assert_eq!(sys.f(0.9 * k as f64, &[0.0], &[0.0]), vec![0.0]);
    }
    let o = &sys.oracles;
    assert!(o.invariant_mean.is_none() && o.phi.is_none() && o.double_bar_f.is_none());
}

#[test]
fn nonlinear_is_dissipative_on_the_standard_box() {
    let sys = builtin_nonlinear(NonlinearParams::default()).unwrap();
    let v = dissipativity_probe(&sys, DissipativityBox::default());
    assert!(v.is_finite());
    // ⟨x, -x + a sin t⟩ + x²/2 ≤ a²/2 for |a| ≤ 1
    assert!(v <= 0.5 + 1e-12, "{v}");
}

#[test]
fn builtins_are_pure_finite_and_periodic() {
    for sys in [
        builtin_periodic_ou(1.0, 1.0, 1.0).unwrap(),
        builtin_quasi_periodic(1.0, 0.5, 2.0, 0.3).unwrap(),
        builtin_nonlinear(NonlinearParams::default()).unwrap(),
    ] {
        let r = purity_probe(&sys, 1000, 7);
        assert!(r.bit_identical && r.finite, "{}", sys.name());
        if sys.period.is_some() {
            let drift = periodicity_probe(&sys, 1000, 7).unwrap();
            assert!(drift <= 1e-12, "{}: {drift}", sys.name());
        }
    }
}

#[test]
fn builder_validates_metadata() {
    assert!(SystemSpec::builder("a", 1, 1).regularity(0.0, 1.0).build().is_err());
    assert!(SystemSpec::builder("a", 1, 1).regularity(1.0, 1.5).build().is_err());
    assert!(SystemSpec::builder("a", 1, 1).period(-1.0).build().is_err());
    assert!(SystemSpec::builder("a", 0, 1).build().is_err());
    let s = SystemSpec::builder("a", 2, 1).regularity(0.5, 0.5).build().unwrap();
    assert_eq!(s.d1(), 2);
    let a = s.fast_generator_diffusion(0.0, &[0.0, 0.0], &[0.0]);
    assert!((a[(1, 1)] - 2.0).abs() < 1e-15 && a[(0, 1)] == 0.0);
}

#[test]
fn averaged_drift_oracle_integrates_against_the_invariant_law() {
    // three-point Gauss–Hermite rule for N(m, 1), exact up to degree five
    let nodes = [(-(3f64.sqrt()), 1.0 / 6.0), (0.0, 2.0 / 3.0), (3f64.sqrt(), 1.0 / 6.0)];
    let sys = builtin_quasi_periodic(0.8, -0.4, 1.3, 1.0).unwrap();
    let bar_f = sys.oracles.bar_f.clone().unwrap();
    let phi = sys.oracles.phi.clone().unwrap();
    for k in 0..25 {
        let (t, y) = (0.37 * k as f64, [1.0 - 0.1 * k as f64]);
        let m = oracle_mean(&sys, t, y[0]);
        let mean_f: f64 = nodes.iter().map(|&(z, w)| w * sys.f(t, &[m + z], &y)[0]).sum();
        assert!((mean_f - bar_f(t, &y)[0]).abs() < 1e-12);
        let mean_phi: f64 = nodes.iter().map(|&(z, w)| w * phi(t, &[m + z], &y)[0]).sum();
        assert!(mean_phi.abs() < 1e-12);
    }
}
