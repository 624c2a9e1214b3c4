use ocbev::eval::{
    average_precision, average_precision_frames, error_metrics, evaluate, match_by_center_distance, DetectionBox, EvalConfig, FrameEval,
};
use proptest::prelude::*;

fn b(class: usize, score: f64, x: f64, y: f64) -> DetectionBox {
    DetectionBox {
        class,
        score,
        center: [x, y, 0.0],
        size: [1.0, 1.0, 1.0],
        yaw: 0.0,
        velocity: [0.0, 0.0],
    }
}

#[test]
fn matching_respects_class_and_threshold() {
    let gts = [b(0, 1.0, 0.0, 0.0), b(1, 1.0, 5.0, 0.0)];
    let preds = [b(1, 0.9, 0.1, 0.0), b(0, 0.5, 0.0, 1.99), b(1, 0.4, 7.0, 0.0)];
    let m = match_by_center_distance(&preds, &gts, 2.0);
    assert_eq!(m.pairs, vec![(1, 0)]);
    assert_eq!(m.unmatched_preds, vec![0, 2]);
    assert_eq!(m.unmatched_gts, vec![1]);
    // The threshold is strict.
    assert!(match_by_center_distance(&[b(1, 0.4, 7.0, 0.0)], &gts[1..], 2.0).pairs.is_empty());
}

#[test]
fn ap_with_a_miss_in_the_middle() {
    // Ranked: TP, FP, TP over two ground truths. Precision envelope at
    // recall 0.5 is 1, at recall 1 it is 2/3.
    let gts = [b(0, 1.0, 0.0, 0.0), b(0, 1.0, 10.0, 0.0)];
    let preds = [b(0, 0.9, 0.0, 0.0), b(0, 0.8, 20.0, 0.0), b(0, 0.7, 10.0, 0.0)];
    let ap = average_precision(&preds, &gts, 2.0);
    assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12, "{ap}");
}

#[test]
fn frames_are_ranked_jointly() {
    let frames = [
        FrameEval {
            preds: vec![b(0, 0.3, 0.0, 0.0)],
            gts: vec![b(0, 1.0, 0.0, 0.0)],
        },
        FrameEval {
            preds: vec![b(0, 0.9, 50.0, 0.0)],
            gts: vec![],
        },
    ];
    // The false positive outranks the only true positive.
    assert!((average_precision_frames(&frames, Some(0), 2.0) - 0.5).abs() < 1e-12);
}

#[test]
fn error_metric_means() {
    let g1 = b(0, 1.0, 0.0, 0.0);
    let p1 = DetectionBox { center: [3.0, 4.0, 9.0], ..g1.clone() };
    let g2 = DetectionBox { velocity: [1.0, 1.0], yaw: 0.5, ..g1.clone() };
    let p2 = DetectionBox { velocity: [1.0, 3.0], yaw: -0.5, ..g1.clone() };
    let e = error_metrics(&[(&p1, &g1), (&p2, &g2)]);
    assert_eq!(e.count, 2);
    assert!((e.ate - 2.5).abs() < 1e-15);
    assert!((e.aoe - 0.5).abs() < 1e-15);
    assert!((e.ave - 1.0).abs() < 1e-15);
}

#[test]
fn evaluate_reports_per_class_and_fast_objects() {
    let mut fast_gt = b(0, 1.0, 0.0, 0.0);
    fast_gt.velocity = [8.0, 0.0];
    let frames = vec![FrameEval {
        preds: vec![DetectionBox { score: 0.9, velocity: [6.0, 0.0], ..fast_gt.clone() }],
        gts: vec![fast_gt.clone(), b(1, 1.0, 5.0, 5.0)],
    }];
    let cfg = EvalConfig {
        num_classes: 3,
        ..EvalConfig::default()
    };
    let r = evaluate(&frames, &cfg);
    // Class 2 has no ground truth and is excluded; class 1 is all misses.
    assert!((r.map - 0.5).abs() < 1e-12);
    assert_eq!(r.errors.count, 1);
    assert_eq!(r.fast_errors.count, 1);
    assert!((r.fast_errors.ave - 2.0).abs() < 1e-15);
    let json = serde_json::to_string(&r).unwrap();
    let back: ocbev::eval::MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.map, r.map);
    assert!(r.table().contains("mAP"));
}

proptest! {
    #[test]
    fn matching_is_a_partial_bijection(
        preds in prop::collection::vec((0usize..2, 0.0f64..1.0, -5.0f64..5.0, -5.0f64..5.0), 0..12),
        gts in prop::collection::vec((0usize..2, -5.0f64..5.0, -5.0f64..5.0), 0..12),
        thr in 0.1f64..4.0,
    ) {
        let p: Vec<DetectionBox> = preds.iter().map(|&(c, s, x, y)| b(c, s, x, y)).collect();
        let g: Vec<DetectionBox> = gts.iter().map(|&(c, x, y)| b(c, 1.0, x, y)).collect();
        let m = match_by_center_distance(&p, &g, thr);
        prop_assert_eq!(m.pairs.len() + m.unmatched_preds.len(), p.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_gts.len(), g.len());
        for &(i, j) in &m.pairs {
            prop_assert_eq!(p[i].class, g[j].class);
            prop_assert!(p[i].planar_distance(&g[j]) < thr);
        }
        let ap = average_precision(&p, &g, thr);
        prop_assert!((0.0..=1.0).contains(&ap));
    }
}
