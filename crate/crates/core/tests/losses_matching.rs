use ocbev::autodiff::Tensor;
use ocbev::geometry::BevGrid;
use ocbev::losses_matching::{
    bce_loss, centerness_target, focal_element, focal_loss, hungarian_assign, l1_box_loss, total_loss, LossWeights, CENTERNESS_ALPHA,
    FOCAL_ALPHA, FOCAL_GAMMA,
};
use ocbev::query_enhancement::Heatmap;
use proptest::prelude::*;

#[test]
fn centerness_takes_the_maximum_over_objects() {
    let g = BevGrid::square(6, 3.0).unwrap();
    let a = g.index_to_coord(7).unwrap();
    let b = g.index_to_coord(9).unwrap();
    let t = centerness_target(&g, &[a, b], CENTERNESS_ALPHA).unwrap();
    assert_eq!(t.values[7], 1.0);
    assert_eq!(t.values[9], 1.0);
    // Cell 8 sits one meter from both centers.
    assert!((t.values[8] - (-2.5f64).exp()).abs() < 1e-15);
    assert!(centerness_target(&g, &[], CENTERNESS_ALPHA).unwrap().values.iter().all(|v| *v == 0.0));
    assert!(centerness_target(&g, &[a], 0.0).is_err());
}

#[test]
fn bce_matches_closed_form() {
    let g = BevGrid::square(2, 1.0).unwrap();
    let pred = Heatmap::new(g, vec![0.9, 0.2, 0.5, 0.0]).unwrap();
    let target = centerness_target(&g, &[g.index_to_coord(0).unwrap()], CENTERNESS_ALPHA).unwrap();
    let expected: f64 = pred
        .scores
        .iter()
        .zip(&target.values)
        .map(|(&p, &t)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 4.0;
    assert!((bce_loss(&pred, &target).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn focal_loss_is_normalized_by_positive_count() {
    let logits = Tensor::matrix(3, 2, vec![2.0, -1.0, 0.5, 0.0, -3.0, 1.5]);
    let targets = [Some(0), None, Some(1)];
    let mut sum = 0.0;
    for q in 0..3 {
        for c in 0..2 {
            sum += focal_element(logits.data[q * 2 + c], targets[q] == Some(c), FOCAL_GAMMA, FOCAL_ALPHA);
        }
    }
    let got = focal_loss(&logits, &targets, FOCAL_GAMMA, FOCAL_ALPHA).unwrap();
    assert!((got - sum / 2.0).abs() < 1e-12);
    // Closed form of one positive element.
    let p = 1.0 / (1.0 + (-2.0f64).exp());
    let pos = -FOCAL_ALPHA * (1.0 - p).powi(2) * p.ln();
    assert!((focal_element(2.0, true, FOCAL_GAMMA, FOCAL_ALPHA) - pos).abs() < 1e-12);
    assert!(focal_loss(&logits, &[Some(2), None, None], FOCAL_GAMMA, FOCAL_ALPHA).is_err());
}

#[test]
fn l1_loss_averages_components() {
    let a = [[1.0; 10], [0.0; 10]];
    let b = [[0.0; 10], [0.5; 10]];
    assert!((l1_box_loss(&a, &b).unwrap() - 0.75).abs() < 1e-15);
    assert_eq!(l1_box_loss(&[], &[]).unwrap(), 0.0);
    assert!(l1_box_loss(&a, &b[..1]).is_err());
}

#[test]
fn weighted_total() {
    let w = LossWeights::default();
    assert_eq!(total_loss(0.3, 0.0, 0.0, &w).total, 0.3);
    assert_eq!(total_loss(0.0, 0.25, 0.0, &w).total, 0.5);
    assert_eq!(total_loss(0.0, 0.0, 4.0, &w).total, 2.0);
}

#[test]
fn hungarian_edge_cases() {
    assert!(hungarian_assign(&[vec![1.0, 2.0]]).is_err(), "more ground truths than queries");
    assert!(hungarian_assign(&[vec![f64::NAN]]).is_err());
    let empty = hungarian_assign(&[vec![], vec![]]).unwrap();
    assert!(empty.pairs.is_empty());
    let a = hungarian_assign(&[vec![4.0, 1.0], vec![2.0, 0.0], vec![3.5, 5.0]]).unwrap();
    assert_eq!(a.pairs, vec![(1, 0), (0, 1)]);
    assert_eq!(a.targets(3), vec![Some(1), Some(0), None]);
}

proptest! {
    #[test]
    fn hungarian_is_invariant_to_row_shifts(
        n in 1usize..6, seed in any::<u64>(), shift in -3.0f64..3.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0..50) as f64).collect()).collect();
        // For a square matrix adding a constant to one row shifts every
        // complete assignment equally.
        let mut shifted = cost.clone();
        for v in &mut shifted[0] {
            *v += shift.round();
        }
        let a = hungarian_assign(&cost).unwrap();
        let b = hungarian_assign(&shifted).unwrap();
        prop_assert_eq!(a.total_cost(&cost) + shift.round(), b.total_cost(&shifted));
        let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        rows.sort_unstable();
        prop_assert_eq!(rows, (0..n).collect::<Vec<_>>());
    }
}
