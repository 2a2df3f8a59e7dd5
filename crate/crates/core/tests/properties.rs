use std::f64::consts::PI;

use nalgebra::DMatrix;
use proptest::prelude::*;

use slowfast::deviation::build_deviation_with_exponent;
use slowfast::harness::output::write_sweep_csv;
use slowfast::harness::{SweepRow, TestFunction};
use slowfast::noise::{inverse_normal_cdf, NoiseStream, PathNoise, PurposeTag};
use slowfast::poisson::{psd_project, psd_sqrt};
use slowfast::rate::{fit_rate, RatePoint};
use slowfast::sde::{PathBundle, TimeGrid, Trajectory};
use slowfast::stats::{normal_cdf, Moments};
use slowfast::system::*;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs()))
}

fn tag() -> impl Strategy<Value = PurposeTag> {
    prop_oneof![
        Just(PurposeTag::FAST),
        Just(PurposeTag::SLOW),
        Just(PurposeTag::LIMIT),
        Just(PurposeTag::INITIAL)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_access_matches_sequential_reads(seed in any::<u64>(), path in any::<u64>(), t in tag(), idx in 0u64..300) {
        let s = NoiseStream::new(seed, path, t);
        let mut g = s.gaussians();
        let mut seq = 0.0;
        for _ in 0..=idx {
            seq = g.next_normal();
        }
        prop_assert_eq!(s.normal_at(idx), seq);
        let mut scaled = [0.0; 3];
        let mut h = s.gaussians();
        h.seek(idx);
        h.fill_scaled(0.5, &mut scaled);
        prop_assert_eq!(scaled[0], 0.5 * seq);
    }

    #[test]
    fn distinct_identities_give_distinct_streams(seed in any::<u64>(), path in 0u64..1_000_000) {
        let first = |n: PathNoise, t: PurposeTag| {
            let mut g = n.stream(t).gaussians();
            [g.next_normal(), g.next_normal(), g.next_normal()]
        };
        let a = PathNoise::new(seed, path);
        prop_assert_ne!(first(a, PurposeTag::FAST), first(a, PurposeTag::SLOW));
        prop_assert_ne!(first(a, PurposeTag::SLOW), first(a, PurposeTag::LIMIT));
        prop_assert_ne!(first(a, PurposeTag::FAST), first(PathNoise::new(seed, path + 1), PurposeTag::FAST));
        prop_assert_ne!(first(a, PurposeTag::FAST), first(PathNoise::new(seed.wrapping_add(1), path), PurposeTag::FAST));
    }

    #[test]
    fn quantile_inverts_the_cdf(p in 1e-12f64..(1.0 - 1e-12)) {
        let x = inverse_normal_cdf(p);
        prop_assert!((normal_cdf(x) - p).abs() <= 1e-8 * p.min(1.0 - p).max(1e-3), "{} {}", p, x);
        prop_assert!(close(inverse_normal_cdf(1.0 - p), -x, 1e-7));
    }

    #[test]
    fn merged_moments_equal_sequential(xs in prop::collection::vec(-1e3f64..1e3, 2..200), cut in 0usize..200) {
        let cut = cut.min(xs.len());
        let whole = Moments::from_slice(&xs);
        let mut left = Moments::from_slice(&xs[..cut]);
        left.merge(&Moments::from_slice(&xs[cut..]));
        prop_assert_eq!(left.n, whole.n);
        prop_assert!(close(left.mean, whole.mean, 1e-10));
        prop_assert!(close(left.m2, whole.m2, 1e-9));
    }

    #[test]
    fn exact_power_laws_are_recovered(slope in -3.0f64..3.0, log_c in -5.0f64..5.0, n in 3usize..8) {
        let pts: Vec<RatePoint> = (0..n)
            .map(|k| {
                let x = 10f64.powf(-(k as f64) / 2.0);
                RatePoint::new(x, log_c.exp() * x.powf(slope), 0.0)
            })
            .collect();
        let f = fit_rate(&pts).unwrap();
        prop_assert!((f.slope - slope).abs() < 1e-9);
        prop_assert!((f.intercept - log_c).abs() < 1e-9);
        prop_assert_eq!(f.n_used, n);
    }

    #[test]
    fn gram_matrices_are_left_alone_and_have_square_roots(
        d in 1usize..4,
        entries in prop::collection::vec(-2.0f64..2.0, 9),
    ) {
        let a = DMatrix::from_fn(d, d, |i, j| entries[i * 3 + j]);
        let m = &a * a.transpose();
        let (p, _, clamped) = psd_project(&m, 1e-6).unwrap();
        prop_assert!(!clamped || (p.clone() - &m).abs().max() < 1e-9);
        let r = psd_sqrt(&m);
        prop_assert!((&r - r.transpose()).abs().max() < 1e-10);
        prop_assert!((&r * &r - &m).abs().max() < 1e-8 * (1.0 + m.abs().max()));
    }

    #[test]
    fn small_negative_eigenvalues_are_clamped(lam in 0.1f64..5.0, neg in 1e-9f64..1e-4) {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![lam, -neg]));
        let (p, min, clamped) = psd_project(&m, 1e-3).unwrap();
        prop_assert!(clamped && (min + neg).abs() <= 1e-12);
        prop_assert!(p.symmetric_eigen().eigenvalues.iter().all(|&v| v >= -1e-15));
        prop_assert!(psd_project(&m, neg / 2.0).is_err());
    }

    #[test]
    fn deviation_is_a_normalized_difference(
        eps in 1e-6f64..1.0,
        theta in 0.1f64..2.0,
        stride in 1usize..5,
        vals in prop::collection::vec(-10.0f64..10.0, 2 * 21),
    ) {
        let noise = Some(PathNoise::new(0, 0));
        let coarse = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let fine = coarse.refine(stride).unwrap();
        let y_eps = Trajectory {
            grid: fine,
            dim: 2,
            states: (0..=fine.n_steps * 2 + 1).map(|i| vals[i % vals.len()]).collect(),
            noise,
        };
        let y_bar = Trajectory { grid: coarse, dim: 2, states: vals[..10].to_vec(), noise };
        let dev = build_deviation_with_exponent(&y_eps, &y_bar, eps, theta).unwrap();
        for k in 0..=4 {
            for i in 0..2 {
                let expected = (y_eps.state(k * stride)[i] - y_bar.state(k)[i]) / eps.powf(theta);
                prop_assert_eq!(dev.z.state(k)[i], expected);
            }
        }
    }

    #[test]
    fn aggregated_increments_keep_their_sum(seed in any::<u64>(), n_macro in 1usize..6, factor in 1usize..8, dim in 1usize..3) {
        let grid = TimeGrid::new(0.0, 1.0, n_macro * factor).unwrap();
        let b = PathBundle::generate(PathNoise::new(seed, 0), grid, &[(PurposeTag::SLOW, dim)]);
        let agg = b.aggregate(PurposeTag::SLOW, factor).unwrap();
        prop_assert_eq!(agg.len(), n_macro * dim);
        for k in 0..n_macro {
            for i in 0..dim {
                let mut s = 0.0;
                for j in 0..factor {
                    s += b.increment(PurposeTag::SLOW, k * factor + j).unwrap()[i];
                }
                prop_assert_eq!(agg[k * dim + i], s);
            }
        }
    }

    #[test]
    fn refined_grids_nest(n in 1usize..50, factor in 1usize..20, t1 in 0.1f64..10.0) {
        let g = TimeGrid::new(0.0, t1, n).unwrap();
        let f = g.refine(factor).unwrap();
        prop_assert_eq!(f.n_steps, n * factor);
        for k in 0..=n {
            prop_assert!(close(f.time(k * factor), g.time(k), 1e-14));
        }
    }

    #[test]
    fn sweep_csv_roundtrips_floats(rows in prop::collection::vec((1e-6f64..1.0, -1e6f64..1e6, 0.0f64..1e3, any::<bool>()), 1..10)) {
        let rows: Vec<SweepRow> = rows
            .into_iter()
            .map(|(eps, error, stderr, censored)| SweepRow { eps, q: 2.0, error, stderr, n_paths: 100, censored })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_sweep_csv(&path, &rows).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        let back: Vec<SweepRow> = r
            .records()
            .map(|rec| {
                let rec = rec.unwrap();
                SweepRow {
                    eps: rec[0].parse().unwrap(),
                    q: rec[1].parse().unwrap(),
                    error: rec[2].parse().unwrap(),
                    stderr: rec[3].parse().unwrap(),
                    n_paths: rec[4].parse().unwrap(),
                    censored: rec[5].parse().unwrap(),
                }
            })
            .collect();
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn builtin_coefficients_are_periodic_and_generators_symmetric(
        t in -10.0f64..10.0,
        x in -5.0f64..5.0,
        y in -5.0f64..5.0,
        c in -3.0f64..3.0,
    ) {
        let ou = builtin_periodic_ou(c, 1.0, 1.0).unwrap();
        let nl = builtin_nonlinear(NonlinearParams { forcing: c, slow_noise: 1.0 }).unwrap();
        for sys in [&ou, &nl] {
            let (a, b) = (sys.b(t, &[x], &[y]), sys.b(t + 2.0 * PI, &[x], &[y]));
            prop_assert!(close(a[0], b[0], 1e-12));
            let (a, b) = (sys.f(t, &[x], &[y]), sys.f(t + 2.0 * PI, &[x], &[y]));
            prop_assert!(close(a[0], b[0], 1e-12));
            let s = sys.fast_generator_diffusion(t, &[x], &[y]);
            prop_assert!((&s - s.transpose()).abs().max() == 0.0);
            prop_assert!(s.symmetric_eigen().eigenvalues.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(sys.b(t, &[x], &[y]), sys.b(t, &[x], &[y]));
        }
    }

    #[test]
    fn test_functions_stay_bounded(z in prop::collection::vec(-1e3f64..1e3, 1..4), clip in 0.1f64..10.0, w in 0.1f64..5.0) {
        let t = TestFunction::Tanh { component: 0 }.eval(&z);
        prop_assert!((-1.0..=1.0).contains(&t));
        let g = TestFunction::GaussianBump { center: 0.0, width: w }.eval(&z);
        prop_assert!((0.0..=1.0).contains(&g));
        let q = TestFunction::ClippedQuadratic { clip }.eval(&z);
        prop_assert!((0.0..=clip).contains(&q));
    }
}
