//! Property suites for the invariants the estimators are built on:
//! direction canonicalization, truncation monotonicity, criterion
//! symmetries, optimizer trace discipline, and bitwise determinism.

use ppfactor_core::distributions::{
    moment_match_instrumental, sample_matrix, Direction, EllipticalDensity, Generator,
};
use ppfactor_core::divergence::{phi, truncate_anchored, CriterionContext};
use ppfactor_core::linalg::Matrix;
use ppfactor_core::optimizer::{anneal, AnnealConfig, Sense};
use ppfactor_core::pursuit::{stop_test, ThresholdMode};
use proptest::prelude::*;

fn nonzero_coords(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, d).prop_filter("nonzero vector", |v| {
        v.iter().map(|x| x * x).sum::<f64>() > 1e-6
    })
}

proptest! {
    #[test]
    fn phi_is_nonnegative_and_vanishes_only_at_one(x in 1e-6f64..50.0) {
        let v = phi(x).unwrap();
        prop_assert!(v >= 0.0);
        if (x - 1.0).abs() > 1e-3 {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn canonical_direction_ignores_sign_and_has_unit_norm(v in nonzero_coords(4)) {
        let plus = Direction::canonical(&v).unwrap();
        let minus_coords: Vec<f64> = v.iter().map(|x| -x).collect();
        let minus = Direction::canonical(&minus_coords).unwrap();
        prop_assert_eq!(plus.coords(), minus.coords());
        let norm: f64 = plus.coords().iter().map(|x| x * x).sum::<f64>();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_is_linear_in_the_point(v in nonzero_coords(3), c in -3.0f64..3.0) {
        let dir = Direction::canonical(&v).unwrap();
        let x = [0.7, -1.3, 2.1];
        let scaled: Vec<f64> = x.iter().map(|t| c * t).collect();
        let lhs = dir.project(&scaled);
        let rhs = c * dir.project(&x);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // A deterministic floor m^{-nu} only moves down as nu grows, so the kept
    // subsample can only grow: truncation is monotone in the floor.
    #[test]
    fn truncation_is_monotone_in_the_floor(seed in 0u64..500, nu_lo in 0.02f64..0.08) {
        let d = 2;
        let g0 = EllipticalDensity::standard(d);
        let x = sample_matrix(&g0, 80, seed);
        let g = moment_match_instrumental(&x, Generator::Gaussian).unwrap();
        let y = sample_matrix(&g, 80, seed + 999);
        let nu_hi = nu_lo + 0.07;
        let loose = truncate_anchored(&x, &y, &g, nu_hi).unwrap();
        let tight = truncate_anchored(&x, &y, &g, nu_lo).unwrap();
        prop_assert!(tight.theta > loose.theta);
        prop_assert!(loose.n() >= tight.n());
    }

    // The criterion must not depend on the sign of the direction: both the
    // projection estimate and the analytic slice are even in a.
    #[test]
    fn criterion_is_antipodal_symmetric(seed in 0u64..200, v in nonzero_coords(3)) {
        let d = 3;
        let g0 = EllipticalDensity::standard(d);
        let x = sample_matrix(&g0, 60, seed);
        let g = moment_match_instrumental(&x, Generator::Gaussian).unwrap();
        let y = sample_matrix(&g, 60, seed + 999);
        let trunc = truncate_anchored(&x, &y, &g, 0.8 / 7.0).unwrap();
        let ctx = CriterionContext::for_elliptical_g(&trunc, &g).unwrap();
        let a = Direction::raw(v.clone()).unwrap();
        let neg = Direction::raw(v.iter().map(|t| -t).collect()).unwrap();
        let ka = ctx.empirical_k_ours(&a).unwrap();
        let kn = ctx.empirical_k_ours(&neg).unwrap();
        prop_assert!((ka.value - kn.value).abs() < 1e-10 * (1.0 + ka.value.abs()));
        let ha = ctx.empirical_k_huber(&a).unwrap();
        let hn = ctx.empirical_k_huber(&neg).unwrap();
        prop_assert!((ha.value - hn.value).abs() < 1e-10 * (1.0 + ha.value.abs()));
    }

    // Rescaling every observation by a common positive factor rescales the
    // moment-matched instrumental law the same way and leaves the
    // dimensionless criterion unchanged up to floating-point noise.
    #[test]
    fn criterion_is_scale_covariant(seed in 0u64..100, c in 0.5f64..2.0) {
        let d = 2;
        let g0 = EllipticalDensity::standard(d);
        let x = sample_matrix(&g0, 50, seed);
        let y0 = sample_matrix(&g0, 50, seed + 999);
        let a = Direction::canonical(&[0.8, -0.6]).unwrap();
        let run = |x: &Matrix, y: &Matrix| {
            let g = moment_match_instrumental(x, Generator::Gaussian).unwrap();
            let trunc = truncate_anchored(x, y, &g, 0.8 / 6.0).unwrap();
            let ctx = CriterionContext::for_elliptical_g(&trunc, &g).unwrap();
            ctx.empirical_k_ours(&a).unwrap().value
        };
        let base = run(&x, &y0);
        let scale = |m: &Matrix| {
            let mut out = m.clone();
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    out.set(i, j, c * m.get(i, j));
                }
            }
            out
        };
        let scaled = run(&scale(&x), &scale(&y0));
        prop_assert!(
            (base - scaled).abs() < 1e-6 * (1.0 + base.abs()),
            "base {} scaled {}", base, scaled
        );
    }

    // The annealer reports the best value seen so far, so its trace can
    // never move uphill, and the returned direction is canonical unit.
    #[test]
    fn anneal_trace_never_worsens(seed in 0u64..1000, q1 in 0.5f64..4.0, q2 in 0.5f64..4.0) {
        let objective = move |a: &[f64]| q1 * a[0] * a[0] + q2 * a[1] * a[1] + 0.25 * a[2] * a[2];
        let cfg = AnnealConfig {
            n_steps: 150,
            restarts: 1,
            polish: false,
            ..AnnealConfig::default()
        };
        let res = anneal(&objective, 3, Sense::Min, &cfg, seed).unwrap();
        for w in res.trace.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        let norm: f64 = res.best_direction.coords().iter().map(|x| x * x).sum();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        let lead = res
            .best_direction
            .coords()
            .iter()
            .find(|x| x.abs() > 1e-12)
            .copied()
            .unwrap();
        prop_assert!(lead > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // The whole evaluation stack is deterministic: rebuilding the context
    // from the same inputs reproduces the stop test bit for bit.
    #[test]
    fn stop_test_is_bitwise_deterministic(seed in 0u64..100) {
        let d = 2;
        let g0 = EllipticalDensity::standard(d);
        let x = sample_matrix(&g0, 50, seed);
        let g = moment_match_instrumental(&x, Generator::Gaussian).unwrap();
        let y = sample_matrix(&g, 50, seed + 999);
        let a = Direction::canonical(&[0.6, 0.8]).unwrap();
        let once = || {
            let trunc = truncate_anchored(&x, &y, &g, 0.8 / 6.0).unwrap();
            let ctx = CriterionContext::for_elliptical_g(&trunc, &g).unwrap();
            stop_test(&ctx, &a, 0.9, ThresholdMode::PaperConstant).unwrap()
        };
        let t1 = once();
        let t2 = once();
        prop_assert_eq!(t1.statistic.to_bits(), t2.statistic.to_bits());
        prop_assert_eq!(t1.p_value.to_bits(), t2.p_value.to_bits());
        prop_assert_eq!(t1.decision, t2.decision);
    }
}
