//! Pose and calibration metadata in a minimal nuScenes-style JSON subset,
//! and zero-based temporal queues built from it.
//!
//! Accepted documents are either a bare array of `ego_pose` records (as in
//! `ego_pose.json`) or an object with any of the tables
//!
//! ```text
//! {
//!   "ego_pose":          [{"token", "timestamp", "translation": [x, y, z], "rotation": [w, x, y, z]}],
//!   "calibrated_sensor": [{"token", "sensor_token", "translation", "rotation", "camera_intrinsic"?}],
//!   "sample_data":       [{"ego_pose_token", "calibrated_sensor_token"}]
//! }
//! ```
//!
//! Timestamps are integer microseconds. Unknown keys are ignored.
//!
//! Yaw is taken from the z-axis projection of the rotation: the unit x
//! vector is rotated by the quaternion and `yaw = atan2(r_y, r_x)`, which
//! for `q = (w, x, y, z)` is `atan2(2(wz + xy), 1 - 2(y^2 + z^2))`. Roll
//! and pitch are discarded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, PlanarPose};

/// Quaternions further than this from unit norm are renormalized.
const RENORMALIZE_TOL: f64 = 1e-12;
/// Deviation from unit norm beyond which normalization is reported.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;
/// Quaternions shorter than this carry no usable rotation.
pub const MIN_QUATERNION_NORM: f64 = 1e-9;
/// Roll or pitch beyond this many radians is reported when discarded.
pub const TILT_WARN_TOL: f64 = 1e-6;
pub const DEFAULT_QUEUE_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub token: String,
    /// Microseconds.
    pub timestamp: i64,
    pub translation: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
}

impl PoseRecord {
    pub fn yaw(&self) -> f64 {
        quaternion_yaw(self.rotation)
    }

    pub fn planar(&self) -> PlanarPose {
        PlanarPose::new(self.yaw(), self.translation[0], self.translation[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub token: String,
    pub sensor_token: String,
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
    /// Row-major 3x3 intrinsics; absent for non-camera sensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_intrinsic: Option<[[f64; 3]; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDataLink {
    pub ego_pose_token: String,
    pub calibrated_sensor_token: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub ego_pose: Vec<PoseRecord>,
    pub calibrated_sensor: Vec<CalibrationRecord>,
    pub sample_data: Vec<SampleDataLink>,
    /// Normalizations and discarded tilt, one line each.
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl Metadata {
    /// Object form of the document, parseable by [`parse_metadata`].
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Calibration tokens linked to a pose through `sample_data`; every
    /// calibration when no links are present.
    pub fn calibrations_for(&self, pose_token: &str) -> Vec<String> {
        if self.sample_data.is_empty() {
            return self.calibrated_sensor.iter().map(|c| c.token.clone()).collect();
        }
        self.sample_data
            .iter()
            .filter(|l| l.ego_pose_token == pose_token)
            .map(|l| l.calibrated_sensor_token.clone())
            .collect()
    }
}

/// `atan2(2(wz + xy), 1 - 2(y^2 + z^2))`.
pub fn quaternion_yaw(q: [f64; 4]) -> f64 {
    let [w, x, y, z] = q;
    (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
}

/// Roll and pitch of a unit quaternion (aerospace z-y-x convention).
fn quaternion_tilt(q: [f64; 4]) -> (f64, f64) {
    let [w, x, y, z] = q;
    let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
    let pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0).asin();
    (roll, pitch)
}

struct Ctx {
    warnings: Vec<String>,
    max_tilt: f64,
    tilted: usize,
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::parse(format!("{path}.{key}"), "missing required field"))
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a serde_json::Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::parse(path, "expected an object"))
}

fn as_string(v: &Value, path: &str) -> Result<String> {
    v.as_str().map(String::from).ok_or_else(|| Error::parse(path, "expected a string"))
}

fn as_number(v: &Value, path: &str) -> Result<f64> {
    let x = v.as_f64().ok_or_else(|| Error::parse(path, "expected a number"))?;
    if !x.is_finite() {
        return Err(Error::parse(path, "non-finite number"));
    }
    Ok(x)
}

fn as_array<const N: usize>(v: &Value, path: &str) -> Result<[f64; N]> {
    let a = v.as_array().ok_or_else(|| Error::parse(path, format!("expected an array of {N} numbers")))?;
    if a.len() != N {
        return Err(Error::parse(path, format!("expected {N} numbers, found {}", a.len())));
    }
    let mut out = [0.0; N];
    for (i, x) in a.iter().enumerate() {
        out[i] = as_number(x, &format!("{path}[{i}]"))?;
    }
    Ok(out)
}

fn quaternion(v: &Value, path: &str, ctx: &mut Ctx) -> Result<[f64; 4]> {
    let q = as_array::<4>(v, path)?;
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < MIN_QUATERNION_NORM {
        return Err(Error::parse(path, format!("degenerate quaternion of norm {norm}")));
    }
    if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
        ctx.warnings.push(format!("{path}: normalized quaternion of norm {norm}"));
    }
    let q = if (norm - 1.0).abs() > RENORMALIZE_TOL { q.map(|x| x / norm) } else { q };
    let (roll, pitch) = quaternion_tilt(q);
    let tilt = roll.abs().max(pitch.abs());
    if tilt > TILT_WARN_TOL {
        ctx.tilted += 1;
        ctx.max_tilt = ctx.max_tilt.max(tilt);
    }
    Ok(q)
}

fn parse_pose(v: &Value, path: &str, ctx: &mut Ctx) -> Result<PoseRecord> {
    let o = as_object(v, path)?;
    let ts = field(o, path, "timestamp")?;
    let timestamp = ts
        .as_i64()
        .ok_or_else(|| Error::parse(format!("{path}.timestamp"), "expected integer microseconds"))?;
    Ok(PoseRecord {
        token: as_string(field(o, path, "token")?, &format!("{path}.token"))?,
        timestamp,
        translation: as_array::<3>(field(o, path, "translation")?, &format!("{path}.translation"))?,
        rotation: quaternion(field(o, path, "rotation")?, &format!("{path}.rotation"), ctx)?,
    })
}

fn parse_calibration(v: &Value, path: &str, ctx: &mut Ctx) -> Result<CalibrationRecord> {
    let o = as_object(v, path)?;
    let camera_intrinsic = match o.get("camera_intrinsic") {
        None | Some(Value::Null) => None,
        Some(Value::Array(rows)) if rows.is_empty() => None,
        Some(Value::Array(rows)) => {
            let p = format!("{path}.camera_intrinsic");
            if rows.len() != 3 {
                return Err(Error::parse(&p, format!("expected 3 rows, found {}", rows.len())));
            }
            let mut k = [[0.0; 3]; 3];
            for (i, r) in rows.iter().enumerate() {
                k[i] = as_array::<3>(r, &format!("{p}[{i}]"))?;
            }
            Some(k)
        }
        Some(_) => return Err(Error::parse(format!("{path}.camera_intrinsic"), "expected a 3x3 array")),
    };
    // Sensor mounting tilt is part of the calibration, not ego motion.
    let mut quiet = Ctx {
        warnings: Vec::new(),
        max_tilt: 0.0,
        tilted: 0,
    };
    let rotation = quaternion(field(o, path, "rotation")?, &format!("{path}.rotation"), &mut quiet)?;
    ctx.warnings.extend(quiet.warnings);
    Ok(CalibrationRecord {
        token: as_string(field(o, path, "token")?, &format!("{path}.token"))?,
        sensor_token: as_string(field(o, path, "sensor_token")?, &format!("{path}.sensor_token"))?,
        translation: as_array::<3>(field(o, path, "translation")?, &format!("{path}.translation"))?,
        rotation,
        camera_intrinsic,
    })
}

fn parse_table<T>(v: Option<&Value>, name: &str, ctx: &mut Ctx, f: fn(&Value, &str, &mut Ctx) -> Result<T>) -> Result<Vec<T>> {
    match v {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items.iter().enumerate().map(|(i, x)| f(x, &format!("{name}[{i}]"), ctx)).collect(),
        Some(_) => Err(Error::parse(name, "expected an array")),
    }
}

/// Parses and validates a metadata document.
pub fn parse_metadata(doc: &str) -> Result<Metadata> {
    let root: Value = serde_json::from_str(doc).map_err(|e| Error::parse("$", e.to_string()))?;
    let mut ctx = Ctx {
        warnings: Vec::new(),
        max_tilt: 0.0,
        tilted: 0,
    };
    let mut meta = Metadata::default();
    match &root {
        Value::Array(_) => meta.ego_pose = parse_table(Some(&root), "ego_pose", &mut ctx, parse_pose)?,
        Value::Object(o) => {
            meta.ego_pose = parse_table(o.get("ego_pose"), "ego_pose", &mut ctx, parse_pose)?;
            meta.calibrated_sensor = parse_table(o.get("calibrated_sensor"), "calibrated_sensor", &mut ctx, parse_calibration)?;
            meta.sample_data = parse_table(o.get("sample_data"), "sample_data", &mut ctx, |v, p, _| {
                let o = as_object(v, p)?;
                Ok(SampleDataLink {
                    ego_pose_token: as_string(field(o, p, "ego_pose_token")?, &format!("{p}.ego_pose_token"))?,
                    calibrated_sensor_token: as_string(
                        field(o, p, "calibrated_sensor_token")?,
                        &format!("{p}.calibrated_sensor_token"),
                    )?,
                })
            })?;
        }
        _ => return Err(Error::parse("$", "expected an object or an array of ego poses")),
    }
    if ctx.tilted > 0 {
        ctx.warnings.push(format!(
            "discarded roll/pitch on {} ego poses (largest {:.3e} rad); motion is treated as planar",
            ctx.tilted, ctx.max_tilt
        ));
    }
    meta.warnings = ctx.warnings;
    Ok(meta)
}

/// How positions are made relative to the first frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroBasing {
    /// Displacements expressed in the first frame's heading.
    #[default]
    Rotate,
    /// Displacements kept in global axes.
    TranslateOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSample {
    pub token: String,
    /// Microseconds.
    pub timestamp: i64,
    pub position: [f64; 2],
    pub yaw: f64,
    pub calibration_tokens: Vec<String>,
}

impl QueueSample {
    pub fn pose(&self) -> PlanarPose {
        PlanarPose::new(self.yaw, self.position[0], self.position[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceQueue {
    pub samples: Vec<QueueSample>,
    /// `relative_poses[k]` maps the ego frame of sample `k` into that of
    /// sample `k + 1`.
    pub relative_poses: Vec<PlanarPose>,
    pub zero_basing: ZeroBasing,
    /// Set when fewer records than the requested length were available.
    pub short: bool,
    pub warnings: Vec<String>,
}

impl SequenceQueue {
    /// Last sample's pose in the first frame obtained by chaining the
    /// relative poses.
    pub fn composed_last_pose(&self) -> PlanarPose {
        let last_from_first = self
            .relative_poses
            .iter()
            .fold(PlanarPose::identity(), |acc, r| r.compose(&acc));
        last_from_first.inverse()
    }

    /// Frames in the scene-file layout (timestamps in seconds, `ego_pose`
    /// as `{yaw, x, y}`, no objects), plus tokens and calibration links.
    pub fn to_scene_json(&self) -> Value {
        let t0 = self.samples.first().map_or(0, |s| s.timestamp);
        let frames: Vec<Value> = self
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let rel = if k == 0 {
                    PlanarPose::identity()
                } else {
                    self.relative_poses[k - 1]
                };
                serde_json::json!({
                    "timestamp": (s.timestamp - t0) as f64 * 1e-6,
                    "ego_pose": {"yaw": s.yaw, "x": s.position[0], "y": s.position[1]},
                    "objects": [],
                    "relative_pose": {"yaw": rel.yaw, "x": rel.tx, "y": rel.ty},
                    "token": s.token,
                    "calibration_tokens": s.calibration_tokens,
                })
            })
            .collect();
        serde_json::json!({ "frames": frames, "zero_basing": self.zero_basing, "short": self.short })
    }
}

/// Zero-based queue over the newest `queue_len` time-sorted records.
pub fn build_sequence_queue(meta: &Metadata, records: &[PoseRecord], queue_len: usize, mode: ZeroBasing) -> Result<SequenceQueue> {
    if queue_len == 0 {
        return Err(Error::InvalidArgument("queue length must be positive".into()));
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no pose records".into()));
    }
    for (i, w) in records.windows(2).enumerate() {
        if w[1].timestamp <= w[0].timestamp {
            return Err(Error::InvalidArgument(format!(
                "records not strictly time-sorted at index {}: {} then {}",
                i + 1,
                w[0].timestamp,
                w[1].timestamp
            )));
        }
    }
    let mut warnings = Vec::new();
    let short = records.len() < queue_len;
    if short {
        warnings.push(format!("only {} records for a queue of {queue_len}", records.len()));
    }
    let window = &records[records.len().saturating_sub(queue_len)..];
    let first = window[0].planar();
    let samples = window
        .iter()
        .map(|r| {
            let p = r.planar();
            let d = [p.tx - first.tx, p.ty - first.ty];
            let position = match mode {
                ZeroBasing::Rotate => PlanarPose::new(-first.yaw, 0.0, 0.0).rotate(d),
                ZeroBasing::TranslateOnly => d,
            };
            QueueSample {
                token: r.token.clone(),
                timestamp: r.timestamp,
                position,
                yaw: wrap_angle(p.yaw - first.yaw),
                calibration_tokens: meta.calibrations_for(&r.token),
            }
        })
        .collect::<Vec<_>>();
    // Relative poses do not depend on the zero-basing; they come from the
    // global poses directly.
    let relative_poses = window
        .windows(2)
        .map(|w| PlanarPose::relative(&w[1].planar(), &w[0].planar()))
        .collect();
    Ok(SequenceQueue {
        samples,
        relative_poses,
        zero_basing: mode,
        short,
        warnings,
    })
}

/// Ego poses sorted by timestamp, keeping the first record of any repeated
/// timestamp.
pub fn sorted_poses(meta: &Metadata) -> Vec<PoseRecord> {
    let mut by_time: BTreeMap<i64, PoseRecord> = BTreeMap::new();
    for p in &meta.ego_pose {
        by_time.entry(p.timestamp).or_insert_with(|| p.clone());
    }
    by_time.into_values().collect()
}
