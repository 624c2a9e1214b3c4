//! Object-aligned temporal fusion of BEV features between a previous
//! timestamp `t'` and the current timestamp `t`.
//!
//! Ego-motion fusion copies every previous cell whose center lands inside the
//! current grid (after applying the relative pose) onto the containing current
//! cell and adds the current queries. Object-motion fusion then moves the
//! features of tracked objects to the cells predicted from their velocity,
//! overriding the ego-aligned result there.
//!
//! All fusion variants are expressed through a [`FusionPlan`], which records
//! for each current cell where its value comes from. The network reuses the
//! same plan to build the differentiable version of the operation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, PlanarPose, Point2};

/// Channel-major BEV feature map `C x H x W` with a timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    pub grid: BevGrid,
    pub channels: usize,
    pub timestamp: f64,
    values: Vec<f64>,
}

impl BevFeature {
    pub fn zeros(grid: BevGrid, channels: usize, timestamp: f64) -> Self {
        Self {
            grid,
            channels,
            timestamp,
            values: vec![0.0; channels * grid.len()],
        }
    }

    pub fn from_values(grid: BevGrid, channels: usize, timestamp: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * grid.len() {
            return Err(Error::Shape(format!(
                "expected {} values for {channels}x{}x{}, got {}",
                channels * grid.len(),
                grid.rows,
                grid.cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("BEV value at {bad}")));
        }
        Ok(Self {
            grid,
            channels,
            timestamp,
            values,
        })
    }

    /// Builds a feature from a cell-major `(H*W) x C` buffer.
    pub fn from_cell_major(grid: BevGrid, channels: usize, timestamp: f64, cells: &[f64]) -> Result<Self> {
        let n = grid.len();
        if cells.len() != n * channels {
            return Err(Error::Shape(format!(
                "expected {} cell-major values, got {}",
                n * channels,
                cells.len()
            )));
        }
        let mut values = vec![0.0; n * channels];
        for k in 0..n {
            for c in 0..channels {
                values[c * n + k] = cells[k * channels + c];
            }
        }
        Self::from_values(grid, channels, timestamp, values)
    }

    pub fn to_cell_major(&self) -> Vec<f64> {
        let n = self.grid.len();
        let mut out = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            for k in 0..n {
                out[k * self.channels + c] = self.values[c * n + k];
            }
        }
        out
    }

    /// Flattened `C x (H*W)` view; the same storage as the grid view.
    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[channel * self.grid.len() + row * self.grid.cols + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        let n = self.grid.len();
        self.values[channel * n + row * self.grid.cols + col] = value;
    }

    /// Feature vector of flat cell `k`.
    pub fn cell(&self, k: usize) -> Vec<f64> {
        let n = self.grid.len();
        (0..self.channels).map(|c| self.values[c * n + k]).collect()
    }

    pub fn set_cell(&mut self, k: usize, v: &[f64]) {
        let n = self.grid.len();
        for (c, x) in v.iter().enumerate().take(self.channels) {
            self.values[c * n + k] = *x;
        }
    }

    /// Per-cell L2 norm over channels, flat index order.
    pub fn cell_norms(&self) -> Vec<f64> {
        (0..self.grid.len())
            .map(|k| self.cell(k).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }

    fn check_compatible(&self, other: &BevFeature) -> Result<()> {
        if !self.grid.same_layout(&other.grid) || self.channels != other.channels {
            return Err(Error::Shape(format!(
                "BEV features differ: {}x{}x{} vs {}x{}x{}",
                self.channels,
                self.grid.rows,
                self.grid.cols,
                other.channels,
                other.grid.rows,
                other.grid.cols
            )));
        }
        Ok(())
    }
}

/// Pairs `(i, j)`: previous flat index `i` feeds current flat index `j`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AlignmentMapping {
    pub pairs: Vec<(usize, usize)>,
}

impl AlignmentMapping {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Default cap on the number of object-motion pairs.
pub const DEFAULT_MAX_ALIGNED_OBJECTS: usize = 30;
/// Default bound on object speed, m/s.
pub const DEFAULT_MAX_SPEED: f64 = 40.0;

/// Objects observed at `t'`: planar positions and velocities in the `t'`
/// ego frame with their source cells.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectMotionRecord {
    pub positions: Vec<Point2>,
    pub velocities: Vec<Point2>,
    pub source_indices: Vec<usize>,
}

impl ObjectMotionRecord {
    /// Validates speeds against `max_speed`; objects outside `grid` are rejected.
    pub fn new(grid: &BevGrid, positions: Vec<Point2>, velocities: Vec<Point2>, max_speed: f64) -> Result<Self> {
        if positions.len() != velocities.len() {
            return Err(Error::Shape(format!(
                "{} positions vs {} velocities",
                positions.len(),
                velocities.len()
            )));
        }
        let mut source_indices = Vec::with_capacity(positions.len());
        for (m, (p, v)) in positions.iter().zip(&velocities).enumerate() {
            if speed(v) > max_speed {
                return Err(Error::InvalidArgument(format!(
                    "object {m} speed {} exceeds {max_speed}",
                    speed(v)
                )));
            }
            let k = grid.coord_to_index(*p).ok_or_else(|| {
                Error::InvalidArgument(format!("object {m} at {p:?} is outside the grid"))
            })?;
            source_indices.push(k);
        }
        Ok(Self {
            positions,
            velocities,
            source_indices,
        })
    }

    /// Like [`ObjectMotionRecord::new`] but silently skips objects outside the
    /// grid and clamps speeds to `max_speed`.
    pub fn filtered(grid: &BevGrid, positions: &[Point2], velocities: &[Point2], max_speed: f64) -> Self {
        let mut rec = Self::default();
        for (p, v) in positions.iter().zip(velocities) {
            if let Some(k) = grid.coord_to_index(*p) {
                let s = speed(v);
                let v = if s > max_speed {
                    [v[0] * max_speed / s, v[1] * max_speed / s]
                } else {
                    *v
                };
                rec.positions.push(*p);
                rec.velocities.push(v);
                rec.source_indices.push(k);
            }
        }
        rec
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub(crate) fn speed(v: &Point2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Ego-motion overlap mapping between two grids of identical layout.
///
/// Every previous cell center is carried into the current frame by `pose`;
/// centers inside the current extent map to the containing cell. When several
/// previous cells land in one current cell the one whose transformed center is
/// nearest to that cell's center wins (ties: lower previous index).
pub fn ego_overlap_mapping(prev: &BevGrid, cur: &BevGrid, pose: &PlanarPose) -> Result<AlignmentMapping> {
    if !prev.same_layout(cur) {
        return Err(Error::Shape("ego alignment needs identical grids".into()));
    }
    let mut best: Vec<Option<(usize, f64)>> = vec![None; cur.len()];
    for i in 0..prev.len() {
        let [row, col] = [i / prev.cols, i % prev.cols];
        let p = pose.apply(prev.cell_center(row, col));
        if let Some(j) = cur.coord_to_index(p) {
            let c = cur.cell_center(j / cur.cols, j % cur.cols);
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            match best[j] {
                Some((_, bd)) if bd <= d => {}
                _ => best[j] = Some((i, d)),
            }
        }
    }
    let pairs = best
        .iter()
        .enumerate()
        .filter_map(|(j, b)| b.map(|(i, _)| (i, j)))
        .collect();
    Ok(AlignmentMapping { pairs })
}

/// Object-motion pairs `(i_src, j_tgt)`.
///
/// Positions are advanced by `velocity * dt` in the `t'` frame, dropped if
/// they leave the grid, carried into the `t` frame by `pose` and quantized.
/// Collisions on one target keep the faster object (ties: lower source index).
/// At most `cap` pairs are returned, fastest first.
pub fn predict_object_targets(
    rec: &ObjectMotionRecord,
    pose: &PlanarPose,
    dt: f64,
    grid: &BevGrid,
    cap: usize,
) -> Result<Vec<(usize, usize)>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    // (speed, i_src, j_tgt)
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for m in 0..rec.len() {
        let (p, v) = (rec.positions[m], rec.velocities[m]);
        let moved = [p[0] + v[0] * dt, p[1] + v[1] * dt];
        if grid.coord_to_index(moved).is_none() {
            continue;
        }
        let Some(j) = grid.coord_to_index(pose.apply(moved)) else {
            continue;
        };
        cands.push((speed(&v), rec.source_indices[m], j));
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut taken = vec![false; grid.len()];
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if out.len() == cap {
            break;
        }
        if !taken[j] {
            taken[j] = true;
            out.push((i, j));
        }
    }
    Ok(out)
}

/// Per-cell provenance of a fused feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellSource {
    /// Current query only (aligned part zero).
    Current,
    /// `prev[i] + cur[j]`.
    EgoAligned(usize),
    /// `prev[i]`, overriding whatever was there.
    Object(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub ego: bool,
    pub object: bool,
    pub max_aligned_objects: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            ego: true,
            object: true,
            max_aligned_objects: DEFAULT_MAX_ALIGNED_OBJECTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionPlan {
    pub cells: Vec<CellSource>,
}

impl FusionPlan {
    pub fn passthrough(n: usize) -> Self {
        Self {
            cells: vec![CellSource::Current; n],
        }
    }

    pub fn build(
        grid: &BevGrid,
        pose: &PlanarPose,
        rec: &ObjectMotionRecord,
        dt: f64,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let mut plan = Self::passthrough(grid.len());
        if cfg.ego {
            for (i, j) in ego_overlap_mapping(grid, grid, pose)?.pairs {
                plan.cells[j] = CellSource::EgoAligned(i);
            }
        }
        if cfg.object && !rec.is_empty() {
            for (i, j) in predict_object_targets(rec, pose, dt, grid, cfg.max_aligned_objects)? {
                plan.cells[j] = CellSource::Object(i);
            }
        }
        Ok(plan)
    }

    /// Applies the plan to features.
    pub fn apply(&self, prev: &BevFeature, cur: &BevFeature) -> Result<BevFeature> {
        prev.check_compatible(cur)?;
        if self.cells.len() != cur.grid.len() {
            return Err(Error::Shape("fusion plan does not match grid".into()));
        }
        let mut out = cur.clone();
        let n = cur.grid.len();
        for (j, src) in self.cells.iter().enumerate() {
            match *src {
                CellSource::Current => {}
                CellSource::EgoAligned(i) => {
                    for c in 0..cur.channels {
                        out.values[c * n + j] = prev.values[c * n + i] + cur.values[c * n + j];
                    }
                }
                CellSource::Object(i) => {
                    for c in 0..cur.channels {
                        out.values[c * n + j] = prev.values[c * n + i];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Ego-motion fusion: aligned previous features (zero where unmapped) plus
/// the current queries.
pub fn fuse_ego(prev: &BevFeature, cur: &BevFeature, pose: &PlanarPose) -> Result<BevFeature> {
    prev.check_compatible(cur)?;
    let cfg = FusionConfig {
        ego: true,
        object: false,
        max_aligned_objects: 0,
    };
    FusionPlan::build(&cur.grid, pose, &ObjectMotionRecord::default(), 1.0, &cfg)?.apply(prev, cur)
}

/// Object-motion fusion: copies `prev[i_src]` over `base[j_tgt]`.
pub fn fuse_object(
    prev: &BevFeature,
    base: &BevFeature,
    rec: &ObjectMotionRecord,
    pose: &PlanarPose,
    dt: f64,
    max_aligned_objects: usize,
) -> Result<BevFeature> {
    prev.check_compatible(base)?;
    let mut out = base.clone();
    let n = base.grid.len();
    for (i, j) in predict_object_targets(rec, pose, dt, &base.grid, max_aligned_objects)? {
        for c in 0..base.channels {
            out.values[c * n + j] = prev.values[c * n + i];
        }
    }
    Ok(out)
}

/// Ego fusion followed by object fusion; returns `cur` at sequence start.
pub fn object_aligned_temporal_fusion(
    prev: Option<&BevFeature>,
    cur: &BevFeature,
    rec: &ObjectMotionRecord,
    pose: &PlanarPose,
    dt: f64,
    cfg: &FusionConfig,
) -> Result<BevFeature> {
    let Some(prev) = prev else {
        return Ok(cur.clone());
    };
    FusionPlan::build(&cur.grid, pose, rec, dt, cfg)?.apply(prev, cur)
}
