//! Synthetic driving scenes: ego trajectory, moving boxes, a camera rig and
//! rendered stand-in image features.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::DetectionBox;
use crate::geometry::{BevGrid, CameraModel, PlanarPose};
use crate::network::ImageFeatureSet;
use crate::tensor_io;

/// Seed of the per-class feature signatures, shared by every scene.
const SIGNATURE_SEED: u64 = 0x0CBE_5167;
/// Height of the ground plane in the ego frame, meters.
pub const GROUND_Z: f64 = -1.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub name: String,
    /// Mean `(l, w, h)`.
    pub size: [f64; 3],
    /// Speed range, m/s.
    pub speed: [f64; 2],
    /// Relative sampling weight.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub cameras: usize,
    pub hfov_deg: f64,
    pub spacing_deg: f64,
    pub image: [usize; 2],
    /// Feature map `(H_f, W_f)`.
    pub feature: [usize; 2],
    pub feature_channels: usize,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            cameras: 6,
            hfov_deg: 70.0,
            spacing_deg: 60.0,
            image: [336, 208],
            feature: [13, 21],
            feature_channels: 16,
        }
    }
}

impl RigSpec {
    pub fn build(&self) -> Result<Vec<CameraModel>> {
        if self.cameras == 0 {
            return Err(Error::InvalidArgument("rig needs at least one camera".into()));
        }
        (0..self.cameras)
            .map(|i| {
                CameraModel::level(
                    (i as f64 * self.spacing_deg).to_radians(),
                    [0.0, 0.0, 0.0],
                    self.hfov_deg.to_radians(),
                    self.image[0],
                    self.image[1],
                )
            })
            .collect()
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.feature[0], self.feature[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub dt: f64,
    pub object_count: [usize; 2],
    pub classes: Vec<ClassPrior>,
    pub ego_speed: [f64; 2],
    pub yaw_rate: [f64; 2],
    /// Frames between yaw-rate changes.
    pub yaw_rate_period: usize,
    /// Radial band, meters, around the ego pose of the frame at which each
    /// object is placed (drawn uniformly per object).
    pub spawn_radius: [f64; 2],
    pub grid_cells: usize,
    pub grid_half_extent: f64,
    pub rig: RigSpec,
    pub noise_sigma: f64,
    /// Splat sigma in feature pixels is `splat_scale * f_feat / depth`.
    pub splat_scale: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 6,
            dt: 0.5,
            object_count: [4, 10],
            classes: vec![
                ClassPrior {
                    name: "car".into(),
                    size: [4.5, 1.9, 1.6],
                    speed: [0.0, 14.0],
                    weight: 0.5,
                },
                ClassPrior {
                    name: "truck".into(),
                    size: [8.0, 2.6, 3.0],
                    speed: [0.0, 10.0],
                    weight: 0.2,
                },
                ClassPrior {
                    name: "pedestrian".into(),
                    size: [0.8, 0.8, 1.8],
                    speed: [0.0, 2.0],
                    weight: 0.3,
                },
            ],
            ego_speed: [0.0, 8.0],
            yaw_rate: [-0.2, 0.2],
            yaw_rate_period: 4,
            spawn_radius: [2.0, 9.5],
            grid_cells: 20,
            grid_half_extent: 10.0,
            rig: RigSpec::default(),
            noise_sigma: 0.05,
            splat_scale: 1.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("scene spec: {m}")));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.frames == 0 {
            return bad("frame count must be positive");
        }
        if self.object_count[0] > self.object_count[1] {
            return bad("object count range reversed");
        }
        if self.classes.is_empty() || self.classes.iter().any(|c| c.size.iter().any(|s| *s <= 0.0) || c.speed[0] > c.speed[1] || c.weight < 0.0) {
            return bad("class priors need positive sizes, ordered speeds and non-negative weights");
        }
        if self.classes.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return bad("class weights sum to zero");
        }
        if self.ego_speed[0] > self.ego_speed[1] || self.yaw_rate[0] > self.yaw_rate[1] || self.spawn_radius[0] > self.spawn_radius[1] {
            return bad("ranges must be ordered");
        }
        if self.yaw_rate_period == 0 || self.grid_cells == 0 || !(self.grid_half_extent > 0.0) {
            return bad("yaw-rate period, grid cells and extent must be positive");
        }
        if self.noise_sigma < 0.0 || self.splat_scale <= 0.0 {
            return bad("noise must be non-negative and splat scale positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<BevGrid> {
        BevGrid::square(self.grid_cells, self.grid_half_extent)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub cls: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub track_id: u64,
}

impl ObjectTruth {
    pub fn to_box(&self) -> DetectionBox {
        DetectionBox {
            class: self.cls,
            score: 1.0,
            center: self.center,
            size: self.size,
            yaw: self.yaw,
            velocity: self.velocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub timestamp: f64,
    /// World from ego.
    pub ego_pose: PlanarPose,
    /// Objects inside the BEV grid, in the ego frame.
    pub objects: Vec<ObjectTruth>,
    pub features: ImageFeatureSet,
    /// Maps the previous ego frame into this one (identity for frame 0).
    pub relative_pose: PlanarPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub frames: Vec<FrameRecord>,
}

/// World-frame object state.
struct Track {
    cls: usize,
    pos: [f64; 2],
    z: f64,
    size: [f64; 3],
    yaw: f64,
    vel: [f64; 2],
}

fn sample_class(rng: &mut ChaCha8Rng, classes: &[ClassPrior]) -> usize {
    let total: f64 = classes.iter().map(|c| c.weight).sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, c) in classes.iter().enumerate() {
        if r < c.weight {
            return i;
        }
        r -= c.weight;
    }
    classes.len() - 1
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Fixed per-class channel signatures of unit norm.
pub fn class_signatures(classes: usize, channels: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..channels).map(|_| normal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Ego poses: constant speed, yaw rate redrawn every `yaw_rate_period`
/// frames, exact arc integration between frames.
fn ego_trajectory(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<PlanarPose> {
    let speed = uniform(rng, spec.ego_speed);
    let mut pose = PlanarPose::new(uniform(rng, [-std::f64::consts::PI, std::f64::consts::PI]), 0.0, 0.0);
    let mut omega = 0.0;
    let mut out = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        if k % spec.yaw_rate_period == 0 {
            omega = uniform(rng, spec.yaw_rate);
        }
        out.push(pose);
        let dt = spec.dt;
        let (dx, dy) = if omega.abs() < 1e-9 {
            (speed * dt, 0.0)
        } else {
            let r = speed / omega;
            (r * (omega * dt).sin(), r * (1.0 - (omega * dt).cos()))
        };
        let step = PlanarPose::new(omega * dt, dx, dy);
        pose = pose.compose(&step);
    }
    out
}

/// Deterministic scene from `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let grid = spec.grid()?;
    let cams = spec.rig.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let poses = ego_trajectory(spec, &mut rng);
    let n_obj = if spec.object_count[0] == spec.object_count[1] {
        spec.object_count[0]
    } else {
        rng.gen_range(spec.object_count[0]..=spec.object_count[1])
    };
    let tracks: Vec<Track> = (0..n_obj)
        .map(|_| {
            let cls = sample_class(&mut rng, &spec.classes);
            let prior = &spec.classes[cls];
            let r = uniform(&mut rng, spec.spawn_radius);
            let bearing = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let local = [r * bearing.cos(), r * bearing.sin()];
            let size = prior.size.map(|s| s * rng.gen_range(0.9..1.1));
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let speed = uniform(&mut rng, prior.speed);
            let anchor = rng.gen_range(0..spec.frames);
            let at = poses[anchor];
            let world_yaw = at.yaw + yaw;
            let vel = [speed * world_yaw.cos(), speed * world_yaw.sin()];
            let t0 = anchor as f64 * spec.dt;
            let placed = at.apply(local);
            Track {
                cls,
                pos: [placed[0] - vel[0] * t0, placed[1] - vel[1] * t0],
                z: GROUND_Z + size[2] / 2.0,
                size,
                yaw: world_yaw,
                vel,
            }
        })
        .collect();
    let sigs = class_signatures(spec.num_classes(), spec.rig.feature_channels);
    let mut frames = Vec::with_capacity(spec.frames);
    for (k, pose) in poses.iter().enumerate() {
        let t = k as f64 * spec.dt;
        let ego_from_world = pose.inverse();
        let objects: Vec<ObjectTruth> = tracks
            .iter()
            .enumerate()
            .filter_map(|(id, tr)| {
                let w = [tr.pos[0] + tr.vel[0] * t, tr.pos[1] + tr.vel[1] * t];
                let p = ego_from_world.apply(w);
                grid.contains(p).then(|| ObjectTruth {
                    cls: tr.cls,
                    center: [p[0], p[1], tr.z],
                    size: tr.size,
                    yaw: crate::geometry::wrap_angle(tr.yaw - pose.yaw),
                    velocity: ego_from_world.rotate(tr.vel),
                    track_id: id as u64,
                })
            })
            .collect();
        let features = render_features(&objects, &cams, &spec.rig, &sigs, spec.noise_sigma, spec.splat_scale, &mut rng)?;
        let relative_pose = if k == 0 {
            PlanarPose::identity()
        } else {
            PlanarPose::relative(pose, &poses[k - 1])
        };
        frames.push(FrameRecord {
            timestamp: t,
            ego_pose: *pose,
            objects,
            features,
            relative_pose,
        });
    }
    Ok(Scene {
        spec: spec.clone(),
        frames,
    })
}

/// Gaussian splats of every visible object center plus optional noise.
///
/// Each splat carries the class signature plus the object's heading as
/// `(cos, sin)` in the last two channels, scaled by the splat intensity.
pub fn render_features(
    objects: &[ObjectTruth],
    cams: &[CameraModel],
    rig: &RigSpec,
    signatures: &[Vec<f64>],
    noise_sigma: f64,
    splat_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ImageFeatureSet> {
    let (hf, wf) = rig.feature_dims();
    let c = rig.feature_channels;
    if c < 3 {
        return Err(Error::InvalidArgument("feature maps need at least 3 channels".into()));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut maps = Vec::with_capacity(cams.len());
    for cam in cams {
        let mut data = vec![0.0; c * hf * wf];
        let sx = wf as f64 / cam.width as f64;
        let sy = hf as f64 / cam.height as f64;
        for o in objects {
            let Some(pr) = cam.project(o.center) else {
                continue;
            };
            let (px, py) = (pr.u * sx - 0.5, pr.v * sy - 0.5);
            let sigma = (splat_scale * cam.fx * sx / pr.depth).max(0.5);
            let reach = (3.0 * sigma).ceil() as isize;
            let (cx, cy) = (px.round() as isize, py.round() as isize);
            let mut channel = signatures[o.cls].clone();
            channel[c - 2] = o.yaw.cos();
            channel[c - 1] = o.yaw.sin();
            for y in (cy - reach).max(0)..=(cy + reach).min(hf as isize - 1) {
                for x in (cx - reach).max(0)..=(cx + reach).min(wf as isize - 1) {
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    let w = (-d2 / (2.0 * sigma * sigma)).exp();
                    let p = y as usize * wf + x as usize;
                    for (ch, s) in channel.iter().enumerate() {
                        data[ch * hf * wf + p] += w * s;
                    }
                }
            }
        }
        if noise_sigma > 0.0 {
            for v in &mut data {
                *v += noise_sigma * normal.sample(rng);
            }
        }
        maps.push(Tensor::new(vec![c, hf, wf], data)?);
    }
    ImageFeatureSet::new(maps)
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    yaw: f64,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    timestamp: f64,
    ego_pose: PoseJson,
    objects: Vec<ObjectTruth>,
    features: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SceneJson {
    spec: SceneSpec,
    frames: Vec<FrameJson>,
}

/// Writes `{stem}.json` and one `OCBT` file per frame and camera into `dir`.
pub fn save_scene(scene: &Scene, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut frames = Vec::with_capacity(scene.frames.len());
    for (k, f) in scene.frames.iter().enumerate() {
        let mut names = Vec::new();
        for cam in 0..f.features.cameras() {
            let name = format!("{stem}_f{k:03}_c{cam}.ocbt");
            let w = BufWriter::new(File::create(dir.join(&name))?);
            tensor_io::write_tensor_f32(w, f.features.map(cam))?;
            names.push(name);
        }
        frames.push(FrameJson {
            timestamp: f.timestamp,
            ego_pose: PoseJson {
                yaw: f.ego_pose.yaw,
                x: f.ego_pose.tx,
                y: f.ego_pose.ty,
            },
            objects: f.objects.clone(),
            features: names,
        });
    }
    let path = dir.join(format!("{stem}.json"));
    let doc = SceneJson {
        spec: scene.spec.clone(),
        frames,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &doc)?;
    Ok(path)
}

/// Reads a scene written by [`save_scene`]. Features come back at 32-bit
/// precision.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let doc: SceneJson = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut frames: Vec<FrameRecord> = Vec::with_capacity(doc.frames.len());
    for f in doc.frames {
        let maps = f
            .features
            .iter()
            .map(|n| tensor_io::read_tensor_f32(BufReader::new(File::open(dir.join(n))?)))
            .collect::<Result<Vec<_>>>()?;
        let ego_pose = PlanarPose::new(f.ego_pose.yaw, f.ego_pose.x, f.ego_pose.y);
        let relative_pose = match frames.last() {
            Some(prev) => PlanarPose::relative(&ego_pose, &prev.ego_pose),
            None => PlanarPose::identity(),
        };
        frames.push(FrameRecord {
            timestamp: f.timestamp,
            ego_pose,
            objects: f.objects,
            features: ImageFeatureSet::new(maps)?,
            relative_pose,
        });
    }
    Ok(Scene { spec: doc.spec, frames })
}
