mod common;

use common::{gt, micro_dataset, oracle_apr, pred, PIXELS};
use hocrf_core::eval::{
    apr_at, apr_summary, mask_iou, volume_thresholds, GroundTruthInstances, GtInstance, PredInstance,
    PredictionSet,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn micro_dataset_matches_exhaustive_oracle() {
    let (preds, gts) = micro_dataset();
    let thresholds: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
    for &t in &thresholds {
        for class in [1, 2] {
            let got = apr_at(&preds, &gts, t, class).unwrap().unwrap();
            let want = oracle_apr(&preds, &gts, t, class);
            assert!((got - want).abs() <= 1e-9, "t={t} class={class}: {got} vs {want}");
        }
    }
    let s = apr_summary(&preds, &gts, &thresholds).unwrap();
    for row in &s.rows {
        let want = (oracle_apr(&preds, &gts, row.threshold, 1) + oracle_apr(&preds, &gts, row.threshold, 2)) / 2.0;
        assert!((row.mean - want).abs() <= 1e-9);
    }
    let vol: f64 = volume_thresholds()
        .iter()
        .map(|&t| (oracle_apr(&preds, &gts, t, 1) + oracle_apr(&preds, &gts, t, 2)) / 2.0)
        .sum::<f64>()
        / 9.0;
    assert!((s.ap_vol - vol).abs() <= 1e-9);
}

#[test]
fn hand_derived_five_sixths() {
    // Class 2 ranks hit, miss (no ground truth in image 3), hit, duplicate.
    let (preds, gts) = micro_dataset();
    let ap = apr_at(&preds, &gts, 0.5, 2).unwrap().unwrap();
    assert!((ap - 5.0 / 6.0).abs() <= 1e-9, "{ap}");
    // Class 1 at 0.5: hit, hit, miss, hit, miss over three instances.
    let ap = apr_at(&preds, &gts, 0.5, 1).unwrap().unwrap();
    assert!((ap - (1.0 + 1.0 + 0.75) / 3.0).abs() <= 1e-9, "{ap}");
}

#[test]
fn perfect_predictions_score_one() {
    let (_, gts) = micro_dataset();
    let preds = PredictionSet::new(
        gts.images()
            .iter()
            .map(|g| {
                g.iter()
                    .map(|g| PredInstance {
                        class: g.class,
                        mask: g.mask.clone(),
                        score: 0.5,
                    })
                    .collect()
            })
            .collect(),
    )
    .unwrap();
    let s = apr_summary(&preds, &gts, &[0.1, 0.5, 0.9]).unwrap();
    assert!(s.rows.iter().all(|r| r.mean == 1.0));
    assert_eq!(s.ap_vol, 1.0);
}

#[test]
fn empty_predictions_score_zero_and_empty_truth_is_an_error() {
    let (_, gts) = micro_dataset();
    let s = apr_summary(&PredictionSet::empty(4), &gts, &[0.5]).unwrap();
    assert_eq!(s.rows[0].mean, 0.0);
    assert_eq!(s.ap_vol, 0.0);
    let none = GroundTruthInstances::new(vec![vec![], vec![]]).unwrap();
    assert!(apr_summary(&PredictionSet::empty(2), &none, &[0.5]).is_err());
    assert!(apr_summary(&PredictionSet::empty(4), &gts, &[]).is_err());
    assert!(apr_at(&PredictionSet::empty(4), &gts, 1.0, 1).is_err());
    assert!(apr_summary(&PredictionSet::empty(3), &gts, &[0.5]).is_err());
}

fn random_dataset(seed: u64) -> (PredictionSet, GroundTruthInstances) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..4 {
        // Disjoint ground truth from a random partition of the pixels.
        let owner: Vec<usize> = (0..PIXELS).map(|_| rng.gen_range(0..4)).collect();
        let g: Vec<GtInstance> = (1..4)
            .filter_map(|k| {
                let px: Vec<usize> = (0..PIXELS).filter(|&i| owner[i] == k).collect();
                (!px.is_empty()).then(|| gt(rng.gen_range(1..3), &px))
            })
            .collect();
        let p: Vec<PredInstance> = (0..rng.gen_range(0..5))
            .map(|_| {
                let px: Vec<usize> = (0..PIXELS).filter(|_| rng.gen_bool(0.35)).collect();
                let px = if px.is_empty() { vec![0] } else { px };
                pred(rng.gen_range(1..3), &px, rng.gen_range(0.0..1.0))
            })
            .collect();
        gts.push(g);
        preds.push(p);
    }
    if gts.iter().all(|g| g.is_empty()) {
        gts[0].push(gt(1, &[0]));
    }
    (
        PredictionSet::new(preds).unwrap(),
        GroundTruthInstances::new(gts).unwrap(),
    )
}

/// True when no prediction sees two ground truths of its class at the same
/// IoU, so the greedy and lexicographic matchings coincide.
fn tie_free(preds: &PredictionSet, gts: &GroundTruthInstances) -> bool {
    preds.images().iter().zip(gts.images()).all(|(ps, gs)| {
        ps.iter().all(|p| {
            let mut v: Vec<f64> = gs
                .iter()
                .filter(|g| g.class == p.class)
                .map(|g| mask_iou(&p.mask, &g.mask).unwrap())
                .filter(|&x| x > 0.0)
                .collect();
            v.sort_by(f64::total_cmp);
            v.windows(2).all(|w| w[0] != w[1])
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_datasets_match_oracle(seed in 0u64..100_000, t in 0.05f64..0.95) {
        let (preds, gts) = random_dataset(seed);
        prop_assume!(tie_free(&preds, &gts));
        for class in gts.classes() {
            let got = apr_at(&preds, &gts, t, class).unwrap().unwrap();
            let want = oracle_apr(&preds, &gts, t, class);
            prop_assert!((got - want).abs() <= 1e-9, "{} vs {}", got, want);
        }
    }

    #[test]
    fn apr_never_increases_with_threshold(seed in 0u64..100_000) {
        let (preds, gts) = random_dataset(seed);
        let thresholds: Vec<f64> = (1..20).map(|k| k as f64 / 20.0).collect();
        let s = apr_summary(&preds, &gts, &thresholds).unwrap();
        for w in s.rows.windows(2) {
            prop_assert!(w[1].mean <= w[0].mean + 1e-12);
            for (a, b) in w[0].per_class.iter().zip(&w[1].per_class) {
                prop_assert!(b.1 <= a.1 + 1e-12);
            }
        }
    }

    /// Only the ranking matters: a strictly increasing map of the scores
    /// leaves every AP unchanged.
    #[test]
    fn apr_depends_only_on_score_order(seed in 0u64..100_000) {
        let (preds, gts) = random_dataset(seed);
        let squashed = PredictionSet::new(
            preds
                .images()
                .iter()
                .map(|ps| {
                    ps.iter()
                        .map(|p| PredInstance { score: p.score.powi(3) * 0.5, ..p.clone() })
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        let a = apr_summary(&preds, &gts, &[0.3, 0.5, 0.7]).unwrap();
        let b = apr_summary(&squashed, &gts, &[0.3, 0.5, 0.7]).unwrap();
        prop_assert_eq!(a, b);
    }
}
