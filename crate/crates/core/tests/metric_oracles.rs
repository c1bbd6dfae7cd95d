mod common;

use mtflow::eval::{self, confusion, dice, mcc, precision, sensitivity};
use mtflow::{Mask, ProbMap};
use proptest::prelude::*;

fn mask_pair(n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n))
}

#[test]
fn metrics_match_double_loop_oracle() {
    let mut rng = common::rng(10);
    for i in 0..1000 {
        let y = common::random_mask(16, 16, [0.0, 0.05, 0.3, 1.0][i % 4], &mut rng);
        let yhat = common::random_mask(16, 16, [0.0, 0.2, 0.8, 1.0][(i / 4) % 4], &mut rng);
        let c = confusion(&y, &yhat).unwrap();
        assert_eq!([c.tp, c.fp, c.fn_, c.tn], common::oracle_counts(&y, &yhat));
        assert_eq!([dice(&c), sensitivity(&c), precision(&c), mcc(&c)], common::oracle_metrics(&y, &yhat));
    }
}

#[test]
fn perfect_and_inverted_predictions() {
    let y = Mask::from_vec(2, 2, vec![1, 0, 0, 1]).unwrap();
    let c = confusion(&y, &y).unwrap();
    assert_eq!((dice(&c), mcc(&c)), (1.0, 1.0));
    let inv = Mask::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap();
    let c = confusion(&y, &inv).unwrap();
    assert_eq!((dice(&c), mcc(&c)), (0.0, -1.0));
}

proptest! {
    #[test]
    fn pr_auc_matches_threshold_sweep(
        labels in prop::collection::vec(0u8..2, 64),
        scores in prop::collection::vec(0u16..12, 64),
    ) {
        prop_assume!(labels.contains(&1));
        let p: Vec<f32> = scores.iter().map(|&s| f32::from(s) / 11.0).collect();
        let y = Mask::from_vec(8, 8, labels.clone()).unwrap();
        let got = eval::pr_auc(&y, &ProbMap::from_vec(8, 8, p.clone()).unwrap()).unwrap();
        prop_assert!((got - common::brute_force_pr_auc(&labels, &p)).abs() < 1e-9);
    }

    #[test]
    fn pr_auc_invariant_under_monotone_rescaling(
        labels in prop::collection::vec(0u8..2, 36),
        scores in prop::collection::vec(0.0f32..1.0, 36),
    ) {
        prop_assume!(labels.contains(&1));
        let y = Mask::from_vec(6, 6, labels).unwrap();
        let a = eval::pr_auc(&y, &ProbMap::from_vec(6, 6, scores.clone()).unwrap()).unwrap();
        let squashed: Vec<f32> = scores.iter().map(|s| s * s * 0.5).collect();
        let b = eval::pr_auc(&y, &ProbMap::from_vec(6, 6, squashed).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dice_is_one_iff_masks_agree((a, b) in mask_pair(25)) {
        let y = Mask::from_vec(5, 5, a.clone()).unwrap();
        let yhat = Mask::from_vec(5, 5, b.clone()).unwrap();
        let d = dice(&confusion(&y, &yhat).unwrap());
        prop_assert_eq!(d == 1.0, a == b);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn mcc_bounded_and_symmetric((a, b) in mask_pair(25)) {
        let y = Mask::from_vec(5, 5, a).unwrap();
        let yhat = Mask::from_vec(5, 5, b).unwrap();
        let m1 = mcc(&confusion(&y, &yhat).unwrap());
        let m2 = mcc(&confusion(&yhat, &y).unwrap());
        prop_assert!((-1.0..=1.0).contains(&m1));
        prop_assert_eq!(m1, m2);
    }
}

#[test]
fn pr_auc_undefined_without_foreground() {
    let y = Mask::zeros(4, 4);
    assert!(matches!(eval::pr_auc(&y, &ProbMap::filled(4, 4, 0.3)), Err(mtflow::Error::UndefinedPrAuc)));
}
