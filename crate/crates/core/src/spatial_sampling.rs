//! Pillar reference points over global and adaptive local height bands, and
//! their projection into the camera rig.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraModel, HeightRange};

/// Global detection height band, meters.
pub const GLOBAL_RANGE: HeightRange = HeightRange { z_min: -5.0, z_max: 3.0 };
/// Object-dense local band before the adaptive shift, meters.
pub const LOCAL_RANGE: HeightRange = HeightRange { z_min: -2.0, z_max: 2.0 };
/// Bound on the adaptive shift of the local band, meters.
pub const DEFAULT_MAX_OFFSET: f64 = 1.0;
/// Points per pillar for each band.
pub const DEFAULT_PILLAR_POINTS: usize = 4;

/// `n` heights at the centers of `n` equal slices of `range`.
pub fn pillar_heights(range: &HeightRange, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("pillar needs at least one point".into()));
    }
    let step = range.span() / n as f64;
    Ok((0..n).map(|k| range.z_min + (k as f64 + 0.5) * step).collect())
}

/// Local band shifted by a bounded per-scene offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveHeightState {
    pub base: HeightRange,
    pub offset: f64,
    pub max_offset: f64,
}

impl AdaptiveHeightState {
    pub fn new(base: HeightRange, offset: f64, max_offset: f64) -> Result<Self> {
        if offset.abs() > max_offset {
            return Err(Error::InvalidArgument(format!(
                "height offset {offset} exceeds bound {max_offset}"
            )));
        }
        Ok(Self {
            base,
            offset,
            max_offset,
        })
    }

    pub fn range(&self) -> HeightRange {
        self.base.shifted(self.offset)
    }
}

/// One visible projection of a pillar point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraHit {
    pub camera: usize,
    /// Normalized image coordinate in `[0, 1)^2`.
    pub uv: [f64; 2],
    /// Derivative of `uv` with respect to the point's height.
    pub duv_dz: [f64; 2],
}

/// Pillar points for every BEV cell and their visible camera hits.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePointSet {
    pub grid: BevGrid,
    pub heights: Vec<f64>,
    /// `hits[cell][k]`: visible projections of pillar point `k` of `cell`.
    pub hits: Vec<Vec<Vec<CameraHit>>>,
}

impl ReferencePointSet {
    pub fn points_per_cell(&self) -> usize {
        self.heights.len()
    }

    pub fn is_visible(&self, cell: usize, k: usize) -> bool {
        !self.hits[cell][k].is_empty()
    }

    /// 3D point `k` of `cell`.
    pub fn point(&self, cell: usize, k: usize) -> [f64; 3] {
        let c = self.grid.index_to_coord(cell).expect("cell in range");
        [c[0], c[1], self.heights[k]]
    }

    pub fn visible_hits(&self, cell: usize) -> usize {
        self.hits[cell].iter().map(|h| h.len()).sum()
    }
}

/// Projects every pillar point of every cell through every camera.
pub fn build_reference_points(
    grid: &BevGrid,
    cams: &[CameraModel],
    range: &HeightRange,
    n: usize,
) -> Result<ReferencePointSet> {
    if cams.is_empty() {
        return Err(Error::InvalidArgument("reference points need at least one camera".into()));
    }
    let heights = pillar_heights(range, n)?;
    let mut hits = Vec::with_capacity(grid.len());
    for cell in 0..grid.len() {
        let c = grid.index_to_coord(cell)?;
        let per_point = heights
            .iter()
            .map(|&z| {
                let p = [c[0], c[1], z];
                cams.iter()
                    .enumerate()
                    .filter_map(|(ci, cam)| {
                        cam.project(p).map(|pr| {
                            let d = cam.pixel_dz(p);
                            CameraHit {
                                camera: ci,
                                uv: [pr.u / cam.width as f64, pr.v / cam.height as f64],
                                duv_dz: [d[0] / cam.width as f64, d[1] / cam.height as f64],
                            }
                        })
                    })
                    .collect()
            })
            .collect();
        hits.push(per_point);
    }
    Ok(ReferencePointSet {
        grid: *grid,
        heights,
        hits,
    })
}

/// Adaptive height offset `max_offset * tanh(mean_cells(bev) . w + b)`.
///
/// `bev` is cell-major `[cells, C]`, `w` is `[C, 1]`, `b` is `[1]`.
pub fn predict_height_offset(tape: &mut Tape, bev: Var, w: Var, b: Var, max_offset: f64) -> Var {
    let pooled = tape.mean_rows(bev);
    let s = tape.linear(pooled, w, Some(b));
    let t = tape.tanh(s);
    tape.scale(t, max_offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use std::f64::consts::PI;

    #[test]
    fn pillar_examples() {
        let h = pillar_heights(&GLOBAL_RANGE, 4).unwrap();
        assert_eq!(h, vec![-4.0, -2.0, 0.0, 2.0]);
        assert_eq!(pillar_heights(&HeightRange::new(-2.0, 2.0).unwrap(), 1).unwrap(), vec![0.0]);
        let shifted = AdaptiveHeightState::new(LOCAL_RANGE, 0.5, 1.0).unwrap().range();
        assert_eq!(pillar_heights(&shifted, 4).unwrap(), vec![-1.0, 0.0, 1.0, 2.0]);
        assert!(pillar_heights(&LOCAL_RANGE, 0).is_err());
        assert!(AdaptiveHeightState::new(LOCAL_RANGE, 1.5, 1.0).is_err());
    }

    #[test]
    fn pillar_properties() {
        for n in 1..12 {
            for r in [GLOBAL_RANGE, LOCAL_RANGE, HeightRange::new(-0.3, 7.1).unwrap()] {
                let h = pillar_heights(&r, n).unwrap();
                assert!(h.windows(2).all(|w| w[0] < w[1]));
                assert!(h.iter().all(|&z| z > r.z_min && z < r.z_max));
                for k in 0..n {
                    let mirrored = 2.0 * r.midpoint() - h[n - 1 - k];
                    assert!((h[k] - mirrored).abs() < 1e-12);
                }
                let dh = 0.37;
                let s = pillar_heights(&r.shifted(dh), n).unwrap();
                for (a, b) in h.iter().zip(&s) {
                    assert!((b - a - dh).abs() < 1e-12);
                }
            }
        }
    }

    fn rig(n: usize) -> Vec<CameraModel> {
        (0..n)
            .map(|i| CameraModel::level(i as f64 * PI / 3.0, [0.0, 0.0, 0.0], 70f64.to_radians(), 320, 192).unwrap())
            .collect()
    }

    #[test]
    fn reference_examples() {
        let grid = BevGrid::square(8, 16.0).unwrap();
        let cams = rig(1);
        // cell centered at (10, 0): straight ahead on the optical axis at z = 0
        let r = HeightRange::new(-1.0, 1.0).unwrap();
        let set = build_reference_points(&BevGrid::new(1, 1, [9.0, 11.0], [-1.0, 1.0]).unwrap(), &cams, &r, 1).unwrap();
        assert_eq!(set.hits[0][0].len(), 1);
        assert_eq!(set.hits[0][0][0].uv, [0.5, 0.5]);

        let set = build_reference_points(&grid, &cams, &GLOBAL_RANGE, 4).unwrap();
        let behind = grid.coord_to_index([-10.0, 0.0]).unwrap();
        assert_eq!(set.visible_hits(behind), 0);
        assert!(build_reference_points(&grid, &[], &GLOBAL_RANGE, 4).is_err());
    }

    #[test]
    fn six_camera_frustum_oracle() {
        let cams = rig(6);
        let half_fov = 35f64.to_radians();
        let grid = BevGrid::new(1, 1, [20.0 * (PI / 6.0).cos() - 0.5, 20.0 * (PI / 6.0).cos() + 0.5], [20.0 * (PI / 6.0).sin() - 0.5, 20.0 * (PI / 6.0).sin() + 0.5]).unwrap();
        let set = build_reference_points(&grid, &cams, &HeightRange::new(-0.5, 0.5).unwrap(), 1).unwrap();
        let mut seen: Vec<usize> = set.hits[0][0].iter().map(|h| h.camera).collect();
        seen.sort();
        let expected: Vec<usize> = (0..6)
            .filter(|&i| {
                let diff = crate::geometry::wrap_angle(PI / 6.0 - i as f64 * PI / 3.0);
                diff.abs() < half_fov
            })
            .collect();
        assert_eq!(seen, expected);
        assert_eq!(seen, vec![0, 1]);
    }

    #[test]
    fn visible_hits_are_in_bounds_and_monotone_in_cameras() {
        let grid = BevGrid::square(16, 30.0).unwrap();
        let three = build_reference_points(&grid, &rig(3), &GLOBAL_RANGE, 4).unwrap();
        let six = build_reference_points(&grid, &rig(6), &GLOBAL_RANGE, 4).unwrap();
        for cell in 0..grid.len() {
            for k in 0..4 {
                assert!(six.hits[cell][k].len() >= three.hits[cell][k].len());
                for h in &six.hits[cell][k] {
                    assert!(h.uv[0] >= 0.0 && h.uv[0] < 1.0 && h.uv[1] >= 0.0 && h.uv[1] < 1.0);
                }
            }
        }
    }

    #[test]
    fn height_offset_head() {
        let mut tape = Tape::new();
        let bev = tape.leaf(Tensor::matrix(3, 2, vec![0.1, -0.2, 0.4, 0.3, -0.6, 0.9]));
        let w0 = tape.leaf(Tensor::matrix(2, 1, vec![0.0, 0.0]));
        let b0 = tape.leaf(Tensor::scalar(0.0));
        let dh = predict_height_offset(&mut tape, bev, w0, b0, 1.0);
        assert_eq!(tape.value(dh).data[0], 0.0);

        let big = tape.leaf(Tensor::scalar(1e3));
        let dh = predict_height_offset(&mut tape, bev, w0, big, 1.0);
        assert!((tape.value(dh).data[0] - 1.0).abs() < 1e-12);

        let w = tape.leaf(Tensor::matrix(2, 1, vec![0.7, -1.3]));
        let b = tape.leaf(Tensor::scalar(0.05));
        let dh = predict_height_offset(&mut tape, bev, w, b, 1.0);
        let mean = [(0.1 + 0.4 - 0.6) / 3.0, (-0.2 + 0.3 + 0.9) / 3.0];
        let want = (mean[0] * 0.7 - mean[1] * 1.3 + 0.05f64).tanh();
        assert!((tape.value(dh).data[0] - want).abs() < 1e-15);
    }
}
