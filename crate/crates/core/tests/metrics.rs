mod common;

use mugennet::metrics::{self, MaskPair, MetricReport};
use proptest::prelude::*;
use common::{random_pair, SIDE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairs(n: usize, seed: u64) -> Vec<MaskPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (p, g) = random_pair(&mut rng, i);
            MaskPair::new(p, g, SIDE, SIDE).unwrap()
        })
        .collect()
}

#[test]
fn vectorized_metrics_match_loop_oracles() {
    for (i, pair) in pairs(200, 42).iter().enumerate() {
        let got = metrics::score(pair);
        let want = common::loop_metrics(&pair.pred, &pair.gt, SIDE, SIDE);
        for (name, a, b) in [
            ("dice", got.dice, want.dice),
            ("iou", got.iou, want.iou),
            ("mae", got.mae, want.mae),
            ("wfbeta", got.wfbeta, want.wfbeta),
            ("smeasure", got.smeasure, want.smeasure),
            ("emeasure", got.emeasure, want.emeasure),
        ] {
            assert!((a - b).abs() < 1e-6, "pair {i} {name}: {a} vs {b}");
        }
    }
}

#[test]
fn soft_confusion_matches_loop_oracle() {
    for pair in pairs(20, 3) {
        let c = metrics::confusion(&pair.pred, &pair.gt);
        let (tp, tn, fp, fnn) = common::loop_confusion(&pair.pred, &pair.gt);
        for (a, b) in [(c.tp, tp), (c.tn, tn), (c.fp, fp), (c.fn_, fnn)] {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((c.tp + c.tn + c.fp + c.fn_ - (SIDE * SIDE) as f64).abs() < 1e-9);
    }
}

#[test]
fn report_equals_mean_of_oracle_scores() {
    let ps = pairs(30, 9);
    let report = metrics::evaluate_pairs(&ps).unwrap();
    let oracle: Vec<_> = ps.iter().map(|p| common::loop_metrics(&p.pred, &p.gt, SIDE, SIDE)).collect();
    let n = oracle.len() as f64;
    let mean = |f: fn(&common::LoopReport) -> f64| oracle.iter().map(f).sum::<f64>() / n;
    assert_eq!(report.n_samples, 30);
    assert!((report.mdice - mean(|r| r.dice)).abs() < 1e-6);
    assert!((report.miou - mean(|r| r.iou)).abs() < 1e-6);
    assert!((report.mae - mean(|r| r.mae)).abs() < 1e-6);
    assert!((report.wfbeta - mean(|r| r.wfbeta)).abs() < 1e-6);
    assert!((report.smeasure - mean(|r| r.smeasure)).abs() < 1e-6);
    assert!((report.emeasure - mean(|r| r.emeasure)).abs() < 1e-6);
    assert!(report.miou <= report.mdice);
}

#[test]
fn dice_iou_identity_holds_per_pair() {
    for pair in pairs(200, 5) {
        let c = metrics::confusion(&metrics::binarize(&pair.pred), &pair.gt);
        // Integer counts: |A|+|B| = |A∪B| + |A∩B|.
        assert_eq!(2.0 * c.tp + c.fp + c.fn_, (c.tp + c.fp + c.fn_) + c.tp);
        let (iou, dice) = (metrics::iou(&pair.pred, &pair.gt), metrics::dice(&pair.pred, &pair.gt));
        assert!((dice - 2.0 * iou / (1.0 + iou)).abs() <= 4.0 * f64::EPSILON, "{dice} {iou}");
        assert!(iou <= dice);
    }
}

#[test]
fn worked_pair() {
    let pair = MaskPair::new(vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0], 1, 3).unwrap();
    assert_eq!(metrics::miou(std::slice::from_ref(&pair)).unwrap(), 1.0 / 3.0);
    assert_eq!(metrics::mdice(&[pair]).unwrap(), 0.5);
}

#[test]
fn perfect_predictions_give_ideal_report() {
    let ps: Vec<MaskPair> = pairs(10, 8)
        .into_iter()
        .map(|p| MaskPair::new(p.gt.clone(), p.gt, SIDE, SIDE).unwrap())
        .collect();
    let r = metrics::evaluate_pairs(&ps).unwrap();
    for v in [r.mdice, r.miou, r.wfbeta, r.smeasure, r.emeasure] {
        assert!((v - 1.0).abs() < 1e-12, "{r:?}");
    }
    assert_eq!(r.mae, 0.0);
    let o = common::loop_metrics(&ps[1].pred, &ps[1].gt, SIDE, SIDE);
    assert!((o.smeasure - 1.0).abs() < 1e-12 && o.mae == 0.0 && o.emeasure == 1.0);
}

#[test]
fn inverted_prediction_scores_below_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 1..20 {
        let (_, gt) = random_pair(&mut rng, i);
        if gt.iter().all(|&g| g == gt[0]) {
            continue;
        }
        let inverted: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        let random: Vec<f64> = (0..gt.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let e_inv = metrics::e_measure(&inverted, &gt);
        assert!(e_inv <= metrics::e_measure(&random, &gt));
        assert!(e_inv.abs() < 1e-12);
    }
}

#[test]
fn metrics_stay_in_range() {
    let r = metrics::evaluate_pairs(&pairs(50, 10)).unwrap();
    for v in [r.mdice, r.miou, r.smeasure, r.emeasure, r.wfbeta] {
        assert!((0.0..=1.0).contains(&v), "{r:?}");
    }
    assert!(r.mae >= 0.0);
}

#[test]
fn csv_row_layout() {
    let r = MetricReport { n_samples: 3, mdice: 0.5, miou: 1.0 / 3.0, mae: 0.25, wfbeta: 0.8, smeasure: 0.75, emeasure: 0.9 };
    assert_eq!(metrics::CSV_HEADER, "dataset,model,n,mDice,mIoU,MAE,wFbeta,Smeasure,Emeasure");
    assert_eq!(r.csv_row("synth", "mugennet"), "synth,mugennet,3,0.500000,0.333333,0.250000,0.800000,0.750000,0.900000");
}

fn permute<T: Copy>(xs: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| xs[i]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_metrics_ignore_spatial_permutation(
        pred in prop::collection::vec(0.0f64..=1.0, 64),
        gt in prop::collection::vec(prop::bool::ANY, 64),
        perm in Just((0..64usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let gt: Vec<f64> = gt.into_iter().map(f64::from).collect();
        let (pp, gp) = (permute(&pred, &perm), permute(&gt, &perm));
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        prop_assert!(close(metrics::iou(&pred, &gt), metrics::iou(&pp, &gp)));
        prop_assert!(close(metrics::dice(&pred, &gt), metrics::dice(&pp, &gp)));
        prop_assert!(close(metrics::mae(&pred, &gt), metrics::mae(&pp, &gp)));
        prop_assert!(close(metrics::weighted_fbeta(&pred, &gt), metrics::weighted_fbeta(&pp, &gp)));
        let (a, b) = (metrics::confusion(&pred, &gt), metrics::confusion(&pp, &gp));
        prop_assert!(close(a.tp, b.tp) && close(a.tn, b.tn) && close(a.fp, b.fp) && close(a.fn_, b.fn_));
    }

    #[test]
    fn s_measure_is_a_unit_score(
        pred in prop::collection::vec(0.0f64..=1.0, 36),
        gt in prop::collection::vec(prop::bool::ANY, 36),
    ) {
        let gt: Vec<f64> = gt.into_iter().map(f64::from).collect();
        let s = metrics::s_measure(&pred, &gt, 6, 6);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s), "{}", s);
    }
}
