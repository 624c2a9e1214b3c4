//! Centerness targets, detection losses and Hungarian assignment.

use serde::{Deserialize, Serialize};

use crate::autodiff::{focal_term, sigmoid, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, Point2};
use crate::network::BOX_DIM;
use crate::query_enhancement::Heatmap;

pub const CENTERNESS_ALPHA: f64 = 2.5;
pub const BCE_EPS: f64 = 1e-7;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
/// Box components entering the matching cost (velocity excluded).
pub const MATCH_BOX_DIMS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub centerness: f64,
    pub cls: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            centerness: 1.0,
            cls: 2.0,
            bbox: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenternessTarget {
    pub grid: BevGrid,
    pub values: Vec<f64>,
    pub alpha: f64,
}

/// Per cell, the maximum over objects of `exp(-alpha * |cell - center|^2)`.
pub fn centerness_target(grid: &BevGrid, centers: &[Point2], alpha: f64) -> Result<CenternessTarget> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("centerness sharpness {alpha} must be positive")));
    }
    let values = (0..grid.len())
        .map(|k| {
            let p = grid.index_to_coord(k).expect("cell in range");
            centers
                .iter()
                .map(|c| {
                    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                    (-alpha * (dx * dx + dy * dy)).exp()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(CenternessTarget {
        grid: *grid,
        values,
        alpha,
    })
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(pred: &Heatmap, target: &CenternessTarget) -> Result<f64> {
    if !pred.grid.same_layout(&target.grid) || pred.scores.len() != target.values.len() {
        return Err(Error::Shape("heatmap and target grids differ".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![pred.scores.len()], pred.scores.clone())?);
    let l = tape.bce(p, target.values.clone(), BCE_EPS);
    Ok(tape.value(l).data[0])
}

/// Sigmoid focal loss over all query/class pairs, divided by the number of
/// positives (at least 1).
pub fn focal_loss(logits: &Tensor, targets: &[Option<usize>], gamma: f64, alpha: f64) -> Result<f64> {
    if logits.shape.len() != 2 || logits.rows() != targets.len() {
        return Err(Error::Shape(format!("focal: logits {:?} for {} targets", logits.shape, targets.len())));
    }
    if targets.iter().flatten().any(|&t| t >= logits.cols()) {
        return Err(Error::IndexOutOfRange {
            index: targets.iter().flatten().copied().max().unwrap_or(0),
            len: logits.cols(),
        });
    }
    let norm = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = tape.focal(z, targets.to_vec(), gamma, alpha, norm);
    Ok(tape.value(l).data[0])
}

/// Mean absolute difference over all components of matched pairs; 0 with
/// no pairs.
pub fn l1_box_loss(pred: &[[f64; BOX_DIM]], target: &[[f64; BOX_DIM]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(pred.len(), BOX_DIM, pred.concat()));
    let l = tape.l1(a, target.concat());
    Ok(tape.value(l).data[0])
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(query, ground truth)`, sorted by ground truth.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Ground truth assigned to each of `n` queries.
    pub fn targets(&self, n: usize) -> Vec<Option<usize>> {
        let mut t = vec![None; n];
        for &(q, g) in &self.pairs {
            t[q] = Some(g);
        }
        t
    }

    /// Cost of the assignment, summed in ground-truth order.
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost[q][g]).sum()
    }
}

/// Minimum-cost assignment of every column (ground truth) of the `N x M`
/// matrix `cost` to a distinct row (query), `M <= N`.
///
/// Shortest augmenting paths with row/column potentials, O(M^2 N).
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!("{m} ground truths exceed {n} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    if m == 0 {
        return Ok(Assignment::default());
    }
    // Work on the transpose: m "workers" (ground truths) onto n "jobs"
    // (queries), 1-based with index 0 as the virtual start.
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    Ok(Assignment { pairs })
}

/// Matching cost `w_cls * focal-style class cost + w_bbox * L1` over the
/// first eight box components; rows are queries, columns ground truths.
pub fn matching_cost(
    logits: &Tensor,
    boxes: &Tensor,
    gt_classes: &[usize],
    gt_boxes: &[[f64; BOX_DIM]],
    weights: &LossWeights,
) -> Vec<Vec<f64>> {
    let n = logits.rows();
    (0..n)
        .map(|q| {
            gt_classes
                .iter()
                .zip(gt_boxes)
                .map(|(&c, b)| {
                    let z = logits.row(q)[c];
                    let p = sigmoid(z);
                    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -(p + 1e-12).ln();
                    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p + 1e-12).ln();
                    let l1: f64 = boxes.row(q)[..MATCH_BOX_DIMS]
                        .iter()
                        .zip(&b[..MATCH_BOX_DIMS])
                        .map(|(x, y)| (x - y).abs())
                        .sum();
                    weights.cls * (pos - neg) + weights.bbox * l1
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_cls: f64,
    pub l_bbox: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `total = w_c * l_c + w_cls * l_cls + w_bbox * l_bbox`, evaluated left to
/// right.
pub fn total_loss(l_c: f64, l_cls: f64, l_bbox: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_c,
        l_cls,
        l_bbox,
        total: weights.centerness * l_c + weights.cls * l_cls + weights.bbox * l_bbox,
        weights: *weights,
    }
}

/// Focal term for one logit, exposed for oracles.
pub fn focal_element(z: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    focal_term(z, positive, gamma, alpha).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn centerness_examples() {
        let g = BevGrid::square(4, 4.0).unwrap();
        let c = g.index_to_coord(5).unwrap();
        let t = centerness_target(&g, &[c], CENTERNESS_ALPHA).unwrap();
        assert_eq!(t.values[5], 1.0);
        let t = centerness_target(&g, &[[c[0] - 1.0, c[1]]], 2.5).unwrap();
        assert!((t.values[5] - (-2.5f64).exp()).abs() < 1e-12);
        let t = centerness_target(&g, &[[c[0] - 0.4, c[1] - 0.3]], 2.5).unwrap();
        assert!((t.values[5] - (-0.625f64).exp()).abs() < 1e-12);
        assert!(centerness_target(&g, &[], 2.5).unwrap().values.iter().all(|v| *v == 0.0));
        assert!(centerness_target(&g, &[], 0.0).is_err());
    }

    #[test]
    fn centerness_translation_equivariance() {
        let g = BevGrid::square(10, 10.0).unwrap();
        let centers = [[0.3, -1.2], [-3.1, 2.2]];
        let shifted: Vec<Point2> = centers.iter().map(|c| [c[0] + g.cell_size(), c[1]]).collect();
        let a = centerness_target(&g, &centers, 0.3).unwrap();
        let b = centerness_target(&g, &shifted, 0.3).unwrap();
        for row in 1..9 {
            for col in 1..8 {
                let (ka, kb) = (row * 10 + col, row * 10 + col + 1);
                assert!((a.values[ka] - b.values[kb]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bce_examples() {
        let g = BevGrid::square(2, 2.0).unwrap();
        let t = CenternessTarget {
            grid: g,
            values: vec![BCE_EPS, 1.0 - BCE_EPS, BCE_EPS, BCE_EPS],
            alpha: 2.5,
        };
        let p = Heatmap::new(g, t.values.clone()).unwrap();
        assert!(bce_loss(&p, &t).unwrap() < 1e-5);
        let zero = CenternessTarget {
            values: vec![0.0; 4],
            ..t.clone()
        };
        let half = Heatmap::new(g, vec![0.5; 4]).unwrap();
        assert!((bce_loss(&half, &zero).unwrap() - 2f64.ln()).abs() < 1e-15);
        let other = Heatmap::new(BevGrid::square(3, 2.0).unwrap(), vec![0.5; 9]).unwrap();
        assert!(bce_loss(&other, &zero).is_err());
    }

    #[test]
    fn bce_scalar_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = BevGrid::square(5, 5.0).unwrap();
        for _ in 0..20 {
            let p: Vec<f64> = (0..25).map(|_| rng.gen::<f64>()).collect();
            let t: Vec<f64> = (0..25).map(|_| rng.gen::<f64>()).collect();
            let mut want = 0.0;
            for (x, y) in p.iter().zip(&t) {
                let q = x.clamp(BCE_EPS, 1.0 - BCE_EPS);
                want += -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
            }
            want /= 25.0;
            let got = bce_loss(
                &Heatmap::new(g, p).unwrap(),
                &CenternessTarget {
                    grid: g,
                    values: t,
                    alpha: 2.5,
                },
            )
            .unwrap();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn focal_examples() {
        let l = focal_loss(&Tensor::matrix(1, 1, vec![0.0]), &[Some(0)], 2.0, 0.25).unwrap();
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.0433).abs() < 1e-4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (n, k) = (5, 3);
            let z: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let t: Vec<Option<usize>> = (0..n).map(|_| if rng.gen_bool(0.5) { Some(rng.gen_range(0..k)) } else { None }).collect();
            let npos = t.iter().flatten().count().max(1) as f64;
            let mut want = 0.0;
            let mut bce = 0.0;
            for i in 0..n {
                for j in 0..k {
                    let zz = z[i * k + j];
                    let p = 1.0 / (1.0 + (-zz).exp());
                    let pos = t[i] == Some(j);
                    let pt = if pos { p } else { 1.0 - p };
                    let at = if pos { 0.25 } else { 0.75 };
                    want += -at * (1.0 - pt).powi(2) * pt.ln();
                    bce += -pt.ln();
                }
            }
            let zt = Tensor::matrix(n, k, z);
            let got = focal_loss(&zt, &t, 2.0, 0.25).unwrap();
            assert!((got - want / npos).abs() < 1e-12);
            let degenerate = focal_loss(&zt, &t, 0.0, 0.5).unwrap();
            assert!((degenerate - 0.5 * bce / npos).abs() < 1e-9);
        }
    }

    #[test]
    fn l1_examples() {
        let a = [[0.3; BOX_DIM]];
        assert_eq!(l1_box_loss(&a, &a).unwrap(), 0.0);
        let b = [[0.4; BOX_DIM]];
        assert!((l1_box_loss(&a, &b).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(l1_box_loss(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn hungarian_examples() {
        assert_eq!(hungarian_assign(&[vec![3.0]]).unwrap().pairs, vec![(0, 0)]);
        let c = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&c), 2.0);
        assert!(hungarian_assign(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian_assign(&[vec![f64::NAN]]).is_err());
        assert!(hungarian_assign(&[vec![], vec![]]).unwrap().pairs.is_empty());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w).total, 3.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).total, 0.0);
        assert!((total_loss(0.5, 0.2, 0.4, &w).total - 1.1).abs() < 1e-15);
    }

    /// Minimum over all injective maps from columns to rows.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], g: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let m = cost[0].len();
            if g == m {
                *best = best.min(acc);
                return;
            }
            for q in 0..cost.len() {
                if !used[q] {
                    used[q] = true;
                    rec(cost, g + 1, used, acc + cost[q][g], best);
                    used[q] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
        best
    }

    proptest! {
        #[test]
        fn hungarian_matches_brute_force(n in 1usize..6, m_frac in 0.0f64..1.0, seed in any::<u64>()) {
            let m = ((n as f64 * m_frac).floor() as usize).max(1).min(n);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
            let a = hungarian_assign(&cost).unwrap();
            prop_assert_eq!(a.pairs.len(), m);
            let mut q: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
            q.sort();
            q.dedup();
            prop_assert_eq!(q.len(), m);
            prop_assert_eq!(a.total_cost(&cost), brute_force(&cost));
        }

        #[test]
        fn losses_non_negative(z in prop::collection::vec(-6.0f64..6.0, 6), t0 in 0usize..3) {
            let l = focal_loss(&Tensor::matrix(2, 3, z), &[Some(t0), None], 2.0, 0.25).unwrap();
            prop_assert!(l >= 0.0);
        }
    }
}
