mod common;

use common::recount;
use proptest::prelude::*;
use stutter_probe::classifiers::{ScoreKind, ScoreVector};
use stutter_probe::eval::{aggregate, compute_metrics, ConfusionMatrix};
use stutter_probe::features::stat_pool;
use stutter_probe::fusion::{score_fuse, FusionConfig};
use stutter_probe::{Matrix, NUM_CLASSES};

fn frames() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..30, 1usize..12).prop_flat_map(|(t, d)| {
        (Just(t), Just(d), prop::collection::vec(-1e3f64..1e3, t * d))
    })
}

fn scores() -> impl Strategy<Value = ScoreVector> {
    prop::array::uniform5(0.001f64..1.0).prop_map(|v| {
        let s: f64 = v.iter().sum();
        ScoreVector::new(v.map(|x| x / s), ScoreKind::Posterior)
    })
}

fn confusion() -> impl Strategy<Value = ConfusionMatrix> {
    prop::array::uniform5(prop::array::uniform5(0u64..40))
        .prop_filter("non-empty", |c| c.iter().flatten().sum::<u64>() > 0)
        .prop_map(|counts| ConfusionMatrix { counts })
}

proptest! {
    #[test]
    fn pooling_ignores_frame_order((t, d, data) in frames(), seed in any::<u64>()) {
        let m = Matrix::new(t, d, data.clone()).unwrap();
        let mut order: Vec<usize> = (0..t).collect();
        stutter_probe::SeededRng::new(seed).shuffle(&mut order);
        let shuffled = m.select_rows(&order);
        let a = stat_pool(&m).unwrap();
        let b = stat_pool(&shuffled).unwrap();
        prop_assert_eq!(a.len(), 2 * d);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a[d..].iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn fusion_is_a_convex_combination(a in scores(), b in scores(), alpha in 0.0f64..=1.0) {
        let (label, fused) = score_fuse(&a, &b, FusionConfig::new(alpha).unwrap()).unwrap();
        prop_assert!((fused.sum() - 1.0).abs() < 1e-12);
        for c in 0..NUM_CLASSES {
            let lo = a.values[c].min(b.values[c]);
            let hi = a.values[c].max(b.values[c]);
            prop_assert!(fused.values[c] >= lo - 1e-15 && fused.values[c] <= hi + 1e-15);
        }
        prop_assert_eq!(fused.values[label.index()], fused.values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn fusion_endpoints_are_exact(a in scores(), b in scores()) {
        let one = score_fuse(&a, &b, FusionConfig::new(1.0).unwrap()).unwrap().1;
        let zero = score_fuse(&a, &b, FusionConfig::new(0.0).unwrap()).unwrap().1;
        prop_assert_eq!(one.values.map(f64::to_bits), a.values.map(f64::to_bits));
        prop_assert_eq!(zero.values.map(f64::to_bits), b.values.map(f64::to_bits));
    }

    #[test]
    fn metrics_agree_with_a_recount(cm in confusion()) {
        let r = compute_metrics(&cm, "s", None).unwrap();
        let (recalls, ta, uar) = recount(&cm.counts);
        prop_assert_eq!(r.recall, recalls);
        prop_assert!((r.total_accuracy - ta).abs() <= 1e-12);
        prop_assert!((r.uar - uar).abs() <= 1e-12);
        let total = cm.total() as f64;
        let weighted: f64 = (0..NUM_CLASSES)
            .filter_map(|c| recalls[c].map(|v| v * cm.counts[c].iter().sum::<u64>() as f64 / total))
            .sum();
        prop_assert!((r.total_accuracy - weighted).abs() <= 1e-12);
    }

    #[test]
    fn pooled_matrix_is_the_sum_of_folds(cms in prop::collection::vec(confusion(), 2..8)) {
        let reports: Vec<_> = cms
            .iter()
            .enumerate()
            .map(|(i, c)| compute_metrics(c, "s", Some(i as u32 + 1)).unwrap())
            .collect();
        let agg = aggregate(&reports, cms.len()).unwrap();
        let mut sum = ConfusionMatrix::default();
        cms.iter().for_each(|c| sum.merge(c));
        prop_assert_eq!(agg.pooled_confusion, sum);
        let mean_uar = reports.iter().map(|r| r.uar).sum::<f64>() / reports.len() as f64;
        prop_assert!((agg.uar.mean - mean_uar).abs() < 1e-9);
        prop_assert!(agg.uar.std >= 0.0);
    }
}
