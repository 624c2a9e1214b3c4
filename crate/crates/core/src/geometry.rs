//! Coordinate frames, BEV grid indexing, planar poses and pinhole cameras.
//!
//! Frames:
//! - ego frame: x forward, y left, z up (meters)
//! - camera frame: x right, y down, z forward
//! - BEV grid: flat index `row * cols + col`, columns run along ego x and
//!   rows along ego y; cells are half-open `[lo, hi)` on both axes.
//!
//! A [`PlanarPose`] maps point coordinates expressed in a source frame into a
//! target frame. For the relative pose between two timestamps `t' -> t`, pure
//! forward ego motion of `d` meters yields translation `(-d, 0)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub rows: usize,
    pub cols: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BevGrid {
    pub fn new(rows: usize, cols: usize, x: [f64; 2], y: [f64; 2]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("grid must have at least one cell".into()));
        }
        if !(x[1] > x[0] && y[1] > y[0]) {
            return Err(Error::InvalidArgument(format!(
                "degenerate grid extent x={x:?} y={y:?}"
            )));
        }
        let cx = (x[1] - x[0]) / cols as f64;
        let cy = (y[1] - y[0]) / rows as f64;
        if (cx - cy).abs() > 1e-9 * cx.max(cy) {
            return Err(Error::InvalidArgument(format!(
                "cells must be square, got {cx} x {cy}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            x_min: x[0],
            x_max: x[1],
            y_min: y[0],
            y_max: y[1],
        })
    }

    /// Square grid centered on the ego vehicle: `n x n` cells over `[-half, half]^2`.
    pub fn square(n: usize, half_extent: f64) -> Result<Self> {
        Self::new(n, n, [-half_extent, half_extent], [-half_extent, half_extent])
    }

    pub fn cell_size(&self) -> f64 {
        (self.x_max - self.x_min) / self.cols as f64
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_layout(&self, other: &BevGrid) -> bool {
        self == other
    }

    pub fn contains(&self, p: Point2) -> bool {
        p[0] >= self.x_min && p[0] < self.x_max && p[1] >= self.y_min && p[1] < self.y_max
    }

    /// Flat index of the cell containing `p`, or `None` outside the extent.
    pub fn coord_to_index(&self, p: Point2) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let cell = self.cell_size();
        let col = (((p[0] - self.x_min) / cell).floor() as usize).min(self.cols - 1);
        let row = (((p[1] - self.y_min) / cell).floor() as usize).min(self.rows - 1);
        Some(row * self.cols + col)
    }

    /// Center of cell `k`.
    pub fn index_to_coord(&self, k: usize) -> Result<Point2> {
        if k >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.len(),
            });
        }
        Ok(self.cell_center(k / self.cols, k % self.cols))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Point2 {
        let cell = self.cell_size();
        [
            self.x_min + (col as f64 + 0.5) * cell,
            self.y_min + (row as f64 + 0.5) * cell,
        ]
    }

    /// Metric point to normalized `(u, v)` in `[0, 1)^2` (u along x / columns).
    pub fn normalize(&self, p: Point2) -> Point2 {
        [
            (p[0] - self.x_min) / (self.x_max - self.x_min),
            (p[1] - self.y_min) / (self.y_max - self.y_min),
        ]
    }

    pub fn denormalize(&self, uv: Point2) -> Point2 {
        [
            self.x_min + uv[0] * (self.x_max - self.x_min),
            self.y_min + uv[1] * (self.y_max - self.y_min),
        ]
    }

    /// Normalized center of cell `k`.
    pub fn normalized_center(&self, k: usize) -> Point2 {
        let (row, col) = (k / self.cols, k % self.cols);
        [
            (col as f64 + 0.5) / self.cols as f64,
            (row as f64 + 0.5) / self.rows as f64,
        ]
    }
}

/// Planar rigid transform: rotation by `yaw` about z, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarPose {
    pub yaw: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for PlanarPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl PlanarPose {
    pub fn new(yaw: f64, tx: f64, ty: f64) -> Self {
        Self {
            yaw: wrap_angle(yaw),
            tx,
            ty,
        }
    }

    pub fn identity() -> Self {
        Self {
            yaw: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn rotate(&self, p: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1], s * p[0] + c * p[1]]
    }

    /// `R(yaw) * p + t`.
    pub fn apply(&self, p: Point2) -> Point2 {
        let r = self.rotate(p);
        [r[0] + self.tx, r[1] + self.ty]
    }

    pub fn inverse(&self) -> Self {
        let back = PlanarPose::new(-self.yaw, 0.0, 0.0).rotate([self.tx, self.ty]);
        Self::new(-self.yaw, -back[0], -back[1])
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PlanarPose) -> Self {
        let t = self.apply([other.tx, other.ty]);
        Self::new(self.yaw + other.yaw, t[0], t[1])
    }

    /// Relative pose mapping frame-`prev` coordinates into frame-`cur`, given
    /// both frames' poses in a common world frame (pose maps frame -> world).
    pub fn relative(world_from_cur: &PlanarPose, world_from_prev: &PlanarPose) -> Self {
        world_from_cur.inverse().compose(world_from_prev)
    }
}

/// Inclusive-exclusive height band `[z_min, z_max]` in ego-frame meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightRange {
    pub z_min: f64,
    pub z_max: f64,
}

impl HeightRange {
    pub fn new(z_min: f64, z_max: f64) -> Result<Self> {
        if !(z_min < z_max) {
            return Err(Error::InvalidArgument(format!(
                "height range needs z_min < z_max, got [{z_min}, {z_max}]"
            )));
        }
        Ok(Self { z_min, z_max })
    }

    pub fn shifted(&self, dh: f64) -> Self {
        Self {
            z_min: self.z_min + dh,
            z_max: self.z_max + dh,
        }
    }

    pub fn span(&self) -> f64 {
        self.z_max - self.z_min
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.z_min + self.z_max)
    }
}

/// Minimum camera-frame depth for a visible projection.
pub const MIN_DEPTH: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole camera with an ego->camera rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major rotation taking ego-frame vectors into the camera frame.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    ) -> Result<Self> {
        check_rotation(&rotation)?;
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidArgument("camera intrinsics must be positive".into()));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Level camera mounted at `position` (ego frame) looking along ego-frame
    /// heading `yaw`, with a horizontal field of view `hfov` (radians) and the
    /// principal point at the image center.
    pub fn level(yaw: f64, position: Point3, hfov: f64, width: usize, height: usize) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // rows: camera x (right), y (down), z (forward) in ego coordinates
        let rotation = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let translation = [
            -dot(rotation[0], position),
            -dot(rotation[1], position),
            -dot(rotation[2], position),
        ];
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        Self::new(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn to_camera(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        [
            dot(r[0], p) + self.translation[0],
            dot(r[1], p) + self.translation[1],
            dot(r[2], p) + self.translation[2],
        ]
    }

    /// Pinhole projection of an ego-frame point; `None` when behind the
    /// camera or outside the image.
    pub fn project(&self, p: Point3) -> Option<Projection> {
        self.project_camera_point(self.to_camera(p))
    }

    pub fn project_camera_point(&self, pc: Point3) -> Option<Projection> {
        if pc[2] <= MIN_DEPTH {
            return None;
        }
        let u = self.cx + self.fx * pc[0] / pc[2];
        let v = self.cy + self.fy * pc[1] / pc[2];
        if u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64 {
            Some(Projection { u, v, depth: pc[2] })
        } else {
            None
        }
    }

    /// Derivative of the pixel coordinates with respect to the ego-frame z
    /// of the projected point.
    pub fn pixel_dz(&self, p: Point3) -> [f64; 2] {
        let pc = self.to_camera(p);
        let r = &self.rotation;
        let (x, y, z) = (pc[0], pc[1], pc[2]);
        let (dx, dy, dz) = (r[0][2], r[1][2], r[2][2]);
        [
            self.fx * (dx * z - x * dz) / (z * z),
            self.fy * (dy * z - y * dz) / (z * z),
        ]
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn check_rotation(r: &[[f64; 3]; 3]) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            let d = dot(r[i], r[j]);
            let want = if i == j { 1.0 } else { 0.0 };
            if (d - want).abs() > 1e-6 {
                return Err(Error::InvalidArgument("rotation is not orthonormal".into()));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("rotation determinant {det} != 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid4() -> BevGrid {
        BevGrid::square(4, 2.0).unwrap()
    }

    #[test]
    fn coord_to_index_examples() {
        let g = grid4();
        assert_eq!(g.coord_to_index([-1.9, -1.9]), Some(0));
        assert_eq!(g.coord_to_index([2.0, 0.0]), None);
        let big = BevGrid::square(300, 51.2).unwrap();
        assert_eq!(big.coord_to_index([0.0, 0.0]), Some(45150));
    }

    #[test]
    fn index_to_coord_examples() {
        let g = grid4();
        assert_eq!(g.index_to_coord(0).unwrap(), [-1.5, -1.5]);
        assert_eq!(g.index_to_coord(15).unwrap(), [1.5, 1.5]);
        let g2 = BevGrid::new(2, 2, [0.0, 2.0], [0.0, 2.0]).unwrap();
        assert_eq!(g2.index_to_coord(1).unwrap(), [1.5, 0.5]);
        assert!(matches!(
            g.index_to_coord(16),
            Err(Error::IndexOutOfRange { index: 16, len: 16 })
        ));
    }

    #[test]
    fn rejects_non_square_cells() {
        assert!(BevGrid::new(2, 4, [0.0, 4.0], [0.0, 4.0]).is_err());
    }

    #[test]
    fn apply_planar_examples() {
        assert_eq!(PlanarPose::identity().apply([3.0, 4.0]), [3.0, 4.0]);
        let q = PlanarPose::new(PI / 2.0, 0.0, 0.0).apply([1.0, 0.0]);
        assert!(q[0].abs() < 1e-15 && (q[1] - 1.0).abs() < 1e-15);
        assert_eq!(PlanarPose::new(0.0, -1.0, 0.0).apply([1.5, 0.0]), [0.5, 0.0]);
    }

    #[test]
    fn forward_motion_yields_negative_translation() {
        let prev = PlanarPose::new(0.0, 10.0, 0.0);
        let cur = PlanarPose::new(0.0, 11.0, 0.0);
        let rel = PlanarPose::relative(&cur, &prev);
        assert!((rel.tx + 1.0).abs() < 1e-12 && rel.ty.abs() < 1e-12 && rel.yaw == 0.0);
    }

    #[test]
    fn wrap_angle_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    fn axis_camera() -> CameraModel {
        CameraModel::level(0.0, [0.0, 0.0, 0.0], PI / 2.0, 640, 480).unwrap()
    }

    #[test]
    fn projection_examples() {
        let cam = axis_camera();
        let p = cam.project([10.0, 0.0, 0.0]).unwrap();
        assert_eq!((p.u, p.v, p.depth), (cam.cx, cam.cy, 10.0));
        assert!(cam.project([-5.0, 0.0, 0.0]).is_none());

        let ident = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let cam = CameraModel::new(500.0, 500.0, 320.0, 240.0, 640, 480, ident, [0.0; 3]).unwrap();
        let p = cam.project([1.0, 0.5, 10.0]).unwrap();
        assert_eq!((p.u, p.v, p.depth), (370.0, 265.0, 10.0));
    }

    #[test]
    fn projection_outside_image_is_none() {
        let cam = axis_camera();
        // 60 degrees off-axis with a 90 degree field of view
        assert!(cam.project([1.0, 3f64.sqrt(), 0.0]).is_none());
    }

    #[test]
    fn rejects_improper_rotation() {
        let flip = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, 1, 1, flip, [0.0; 3]).is_err());
    }

    #[test]
    fn pixel_dz_matches_finite_difference() {
        let cam = CameraModel::level(0.4, [0.5, -0.2, 1.6], 1.2, 320, 192).unwrap();
        let p = [12.0, 3.0, -0.7];
        let h = 1e-6;
        let a = cam.project([p[0], p[1], p[2] + h]).unwrap();
        let b = cam.project([p[0], p[1], p[2] - h]).unwrap();
        let d = cam.pixel_dz(p);
        assert!(((a.u - b.u) / (2.0 * h) - d[0]).abs() < 1e-6);
        assert!(((a.v - b.v) / (2.0 * h) - d[1]).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn pose_inverse_round_trip(yaw in -PI..PI, tx in -100.0..100.0f64, ty in -100.0..100.0f64,
                                   px in -100.0..100.0f64, py in -100.0..100.0f64) {
            let pose = PlanarPose::new(yaw, tx, ty);
            let back = pose.inverse().apply(pose.apply([px, py]));
            prop_assert!((back[0] - px).abs() < 1e-9 && (back[1] - py).abs() < 1e-9);
            let id = pose.compose(&pose.inverse());
            prop_assert!(id.yaw.abs() < 1e-9 && id.tx.abs() < 1e-9 && id.ty.abs() < 1e-9);
        }

        #[test]
        fn pose_preserves_distances(yaw in -PI..PI, tx in -50.0..50.0f64, ty in -50.0..50.0f64,
                                    a in prop::array::uniform2(-50.0..50.0f64),
                                    b in prop::array::uniform2(-50.0..50.0f64)) {
            let pose = PlanarPose::new(yaw, tx, ty);
            let (pa, pb) = (pose.apply(a), pose.apply(b));
            let d0 = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            let d1 = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn index_round_trip(rows in 1usize..=512, cols in 1usize..=512, x0 in -60.0..0.0f64) {
            let cell = 0.37;
            let g = BevGrid::new(rows, cols, [x0, x0 + cell * cols as f64], [-3.0, -3.0 + cell * rows as f64]).unwrap();
            for k in (0..g.len()).step_by(1 + g.len() / 997) {
                prop_assert_eq!(g.coord_to_index(g.index_to_coord(k).unwrap()), Some(k));
            }
        }

        #[test]
        fn optical_axis_hits_principal_point(yaw in -PI..PI, depth in 0.01..500.0f64) {
            let pos = [0.3, -0.1, 1.5];
            let cam = CameraModel::level(yaw, pos, 1.2, 320, 192).unwrap();
            let p = [pos[0] + depth * yaw.cos(), pos[1] + depth * yaw.sin(), pos[2]];
            let pr = cam.project(p).unwrap();
            prop_assert!((pr.u - cam.cx).abs() < 1e-9 && (pr.v - cam.cy).abs() < 1e-9);
        }

        #[test]
        fn nearer_point_has_smaller_depth(t1 in 0.1..50.0f64, t2 in 0.1..50.0f64,
                                          dir in prop::array::uniform3(-1.0..1.0f64)) {
            let cam = axis_camera();
            let d = [1.0, dir[1] * 0.5, dir[2] * 0.5];
            let (a, b) = (cam.to_camera([d[0] * t1, d[1] * t1, d[2] * t1]), cam.to_camera([d[0] * t2, d[1] * t2, d[2] * t2]));
            prop_assert_eq!(t1 < t2, a[2] < b[2]);
        }
    }
}
