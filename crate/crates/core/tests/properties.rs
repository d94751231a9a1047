mod common;

use common::*;
use ordinal_impute::consensus::{build_weights, kendall_tau_b, mann_whitney_u, WeightMode, DEFAULT_EPSILON};
use ordinal_impute::data::{column_scales, round_clamp, RatingMatrix};
use ordinal_impute::dqp::impute_dqp_svas;
use ordinal_impute::estimatability::{closure_levels, is_estimatable, is_level1};
use ordinal_impute::evaluation::{impute_baseline, kendall_delta, score, BaselineMethod};
use ordinal_impute::qp::{impute_qp_as, QpOptions};
use ordinal_impute::synthetic::{connectivity_probability, generate, EdgeSampling, SynthSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(seed: u64, rows: usize, cols: usize, p: f64) -> RatingMatrix {
    random_matrix(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols, p)
}

fn columns_observed(m: &RatingMatrix) -> bool {
    (0..m.cols()).all(|j| (0..m.rows()).any(|i| m.get(i, j).is_some()))
}

fn close(a: &[(usize, usize, f64)], b: &[(usize, usize, f64)], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x.0, x.1) == (y.0, y.1) && (x.2 - y.2).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closure_matches_definition(seed: u64, rows in 1usize..9, cols in 1usize..5, p in 0.0f64..0.8) {
        let m = matrix(seed, rows, cols, p);
        let reference = reference_levels(&m);
        prop_assert_eq!(closure_levels(&m).levels_grid(), reference.clone());
        let covered = reference.iter().flatten().all(Option::is_some);
        prop_assert_eq!(is_estimatable(&m).is_estimatable, covered);
    }

    #[test]
    fn weights_symmetric_and_floored(seed: u64, rows in 2usize..20, cols in 1usize..6, p in 0.0f64..0.6) {
        let m = matrix(seed, rows, cols, p);
        let w = build_weights(&m, WeightMode::Kendall, DEFAULT_EPSILON);
        for a in 0..cols {
            for b in 0..cols {
                prop_assert_eq!(w.get(a, b), w.get(b, a));
                prop_assert!(w.get(a, b) >= DEFAULT_EPSILON);
            }
        }
    }

    #[test]
    fn qp_invariant_to_weight_scale_and_duplicates(seed: u64, rows in 3usize..12, cols in 2usize..5, c in 0.1f64..10.0) {
        let m = matrix(seed, rows, cols, 0.3);
        prop_assume!(m.missing_count() > 0 && is_estimatable(&m).is_estimatable);
        let w = build_weights(&m, WeightMode::Kendall, DEFAULT_EPSILON);
        let base = impute_qp_as(&m, &w, &QpOptions::default()).unwrap();
        let scaled = impute_qp_as(&m, &w.scaled(c), &QpOptions::default()).unwrap();
        prop_assert!(close(&base.continuous, &scaled.continuous, 1e-8));
        let reduced = impute_qp_as(&m, &w, &QpOptions { dedupe: true, ..QpOptions::default() }).unwrap();
        prop_assert!(close(&base.continuous, &reduced.continuous, 1e-8));
    }

    #[test]
    fn dqp_invariant_to_weight_scale_and_row_order(seed: u64, rows in 3usize..15, cols in 2usize..5, c in 0.1f64..10.0) {
        let m = matrix(seed, rows, cols, 0.25);
        prop_assume!(m.missing_count() > 0 && is_level1(&m).is_level1);
        let w = build_weights(&m, WeightMode::Kendall, DEFAULT_EPSILON);
        let base = impute_dqp_svas(&m, &w, true).unwrap();
        let scaled = impute_dqp_svas(&m, &w.scaled(c), true).unwrap();
        prop_assert!(close(&base.continuous, &scaled.continuous, 1e-9));
        let order: Vec<usize> = (0..rows).rev().collect();
        let flipped = impute_dqp_svas(&m.select_rows(&order), &w, true).unwrap();
        for &(i, j, v) in &base.continuous {
            prop_assert!((flipped.value_at(rows - 1 - i, j).unwrap() - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn rounded_output_stays_on_scale(seed: u64, rows in 3usize..15, cols in 2usize..5) {
        let m = matrix(seed, rows, cols, 0.3);
        prop_assume!(m.missing_count() > 0 && is_estimatable(&m).is_estimatable);
        let scale = column_scales(&m).unwrap();
        let w = build_weights(&m, WeightMode::Kendall, DEFAULT_EPSILON);
        let r = impute_qp_as(&m, &w, &QpOptions::default()).unwrap();
        for &(i, j, v) in &r.continuous {
            let x = r.rounded.get(i, j).unwrap();
            prop_assert_eq!(x, round_clamp(v, &scale, j));
            prop_assert!(x >= scale.lower[j] && x <= scale.upper[j] && x.fract() == 0.0);
        }
    }

    #[test]
    fn tau_symmetric_and_bounded(x in prop::collection::vec(1u8..6, 2..40), seed: u64) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            x.iter().map(|_| f64::from(rand::Rng::random_range(&mut rng, 1..=5u8))).collect()
        };
        let t = kendall_tau_b(&x, &y);
        prop_assert_eq!(t, kendall_tau_b(&y, &x));
        if let Some(t) = t {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&t));
        }
    }

    #[test]
    fn u_test_p_value_is_probability(g1 in prop::collection::vec(1u8..6, 1..30), g2 in prop::collection::vec(1u8..6, 1..30)) {
        let a: Vec<f64> = g1.into_iter().map(f64::from).collect();
        let b: Vec<f64> = g2.into_iter().map(f64::from).collect();
        let t = mann_whitney_u(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.p_value));
        let swapped = mann_whitney_u(&b, &a).unwrap();
        prop_assert!((t.p_value - swapped.p_value).abs() < 1e-12);
    }

    #[test]
    fn scores_ignore_order_of_deleted_cells(seed: u64, rows in 3usize..15, cols in 2usize..5) {
        let m = matrix(seed, rows, cols, 0.3);
        prop_assume!(m.missing_count() > 1 && columns_observed(&m));
        let r = impute_baseline(&m, BaselineMethod::Mode, true).unwrap();
        let truth: Vec<(usize, usize, f64)> = r.continuous.iter().map(|&(i, j, _)| (i, j, ((i + j) % 5 + 1) as f64)).collect();
        let mut reversed = truth.clone();
        reversed.reverse();
        let a = score(&r.rounded, &truth).unwrap();
        let b = score(&r.rounded, &reversed).unwrap();
        prop_assert!((a.rmse - b.rmse).abs() < 1e-12 && a.accuracy == b.accuracy && (a.mad - b.mad).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.accuracy) && a.rmse >= 0.0 && a.mad >= 0.0);
    }

    #[test]
    fn kendall_delta_bounds(seed: u64, rows in 4usize..20, cols in 2usize..5) {
        let m = matrix(seed, rows, cols, 0.3);
        prop_assume!(columns_observed(&m));
        let r = impute_baseline(&m, BaselineMethod::Mean, true).unwrap();
        if let Ok(d) = kendall_delta(&m, &r.rounded) {
            prop_assert!(d.mad_tau + 1e-12 >= d.avgd_tau.abs());
            prop_assert!(d.rmse_tau + 1e-12 >= d.mad_tau);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_is_deterministic(seed: u64, s in prop::sample::select(vec![0.3, 0.5, 0.7])) {
        let spec = SynthSpec::new(60, 4, s, 0.3, seed);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        prop_assert_eq!(a.observed, b.observed);
        prop_assert_eq!(a.truth, b.truth);
    }
}

#[test]
fn undirected_sampling_matches_exact_connectivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (p, n) in [(0.3, 8), (0.2, 12), (0.5, 5), (0.1, 20)] {
        let est = connectivity_probability(p, n, 20_000, EdgeSampling::Undirected, &mut rng).unwrap();
        let exact = exact_connectivity(n, p);
        assert!((est.value - exact).abs() < 5.0 * est.stderr.max(1e-3), "p={p} n={n}: {} vs {exact}", est.value);
    }
}
