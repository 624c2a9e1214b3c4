//! Alignment demo: fuses one frame pair and dumps before/after BEV norms
//! and a heatmap.
//!
//! Without a checkpoint the BEV features are a raster of the ground truth:
//! the cell holding an object's center carries `[1, track_id + 1,
//! class + 1, speed]` (a later object overwrites an earlier one in the same
//! cell), and the heatmap is the centerness target of the current frame.
//! With a checkpoint the features are the network's BEV for each frame
//! run on its own, and the heatmap is the network's prediction with the
//! previous BEV carried in.

use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use ocbev::autodiff::Tensor;
use ocbev::eval::DetectionBox;
use ocbev::geometry::BevGrid;
use ocbev::losses_matching::{centerness_target, CENTERNESS_ALPHA};
use ocbev::network::{FrameInput, Graph, Model};
use ocbev::simulator::{generate_scene, load_scene, FrameRecord, Scene, SceneSpec};
use ocbev::temporal_fusion::{ego_overlap_mapping, fuse_ego, fuse_object, predict_object_targets, BevFeature, DEFAULT_MAX_ALIGNED_OBJECTS};
use ocbev::tensor_io::write_tensor_f32;
use ocbev::training::{motion_record, TrainConfig, VelocitySource};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::Context;
use crate::evaluate::load_model;
use crate::pgm;
use crate::scenes::scene_files;

pub const RASTER_CHANNELS: [&str; 4] = ["occupancy", "track_id+1", "class+1", "speed"];

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Scene file (or directory, first file used); generated when absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Current frame; the pair is (frame - 1, frame).
    #[arg(long)]
    frame: Option<usize>,
    /// Generate a scene with a still ego vehicle and still objects.
    #[arg(long = "static")]
    static_world: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    max_aligned_objects: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub scene: Option<PathBuf>,
    pub frame: usize,
    pub static_world: bool,
    pub checkpoint: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub max_aligned_objects: usize,
    /// Used when no scene file is given.
    pub spec: SceneSpec,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            scene: None,
            frame: 1,
            static_world: false,
            checkpoint: None,
            model: None,
            max_aligned_objects: DEFAULT_MAX_ALIGNED_OBJECTS,
            spec: SceneSpec::default(),
        }
    }
}

pub fn static_spec(spec: &SceneSpec) -> SceneSpec {
    let mut s = spec.clone();
    s.ego_speed = [0.0, 0.0];
    s.yaw_rate = [0.0, 0.0];
    for c in &mut s.classes {
        c.speed = [0.0, 0.0];
    }
    s
}

/// Channel-major raster of the frame's objects.
pub fn rasterize(grid: &BevGrid, frame: &FrameRecord) -> Result<BevFeature> {
    let n = grid.len();
    let mut v = vec![0.0; RASTER_CHANNELS.len() * n];
    for o in &frame.objects {
        if let Some(k) = grid.coord_to_index([o.center[0], o.center[1]]) {
            let speed = o.velocity[0].hypot(o.velocity[1]);
            for (c, x) in [1.0, o.track_id as f64 + 1.0, o.cls as f64 + 1.0, speed].into_iter().enumerate() {
                v[c * n + k] = x;
            }
        }
    }
    Ok(BevFeature::from_values(*grid, RASTER_CHANNELS.len(), frame.timestamp, v)?)
}

fn network_bev(model: &Model, cfg: &TrainConfig, frame: &FrameRecord, dt: f64) -> Result<BevFeature> {
    let rec = Default::default();
    let input = FrameInput {
        feats: &frame.features,
        prev: None,
        pose: frame.relative_pose,
        motion: &rec,
        dt,
        max_aligned_objects: cfg.max_aligned_objects,
        peaks: None,
    };
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, &input, &cfg.flags, &cfg.enhancement())?;
    let bev = g.value(out.bev);
    Ok(BevFeature::from_cell_major(model.grid, bev.cols(), frame.timestamp, &bev.data)?)
}

fn network_heatmap(model: &Model, cfg: &TrainConfig, scene: &Scene, k: usize) -> Result<Vec<f64>> {
    let prev_frame = &scene.frames[k - 1];
    let prev = {
        let rec = Default::default();
        let input = FrameInput {
            feats: &prev_frame.features,
            prev: None,
            pose: prev_frame.relative_pose,
            motion: &rec,
            dt: scene.spec.dt,
            max_aligned_objects: cfg.max_aligned_objects,
            peaks: None,
        };
        let mut g = Graph::new(&model.params);
        let out = model.forward(&mut g, &input, &cfg.flags, &cfg.enhancement())?;
        g.value(out.bev).clone()
    };
    let frame = &scene.frames[k];
    let rec = motion_record(&model.grid, Some(prev_frame), None, VelocitySource::Oracle);
    let input = FrameInput {
        feats: &frame.features,
        prev: Some(&prev),
        pose: frame.relative_pose,
        motion: &rec,
        dt: scene.spec.dt,
        max_aligned_objects: cfg.max_aligned_objects,
        peaks: None,
    };
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, &input, &cfg.flags, &cfg.enhancement())?;
    Ok(g.value(out.heatmap).data.clone())
}

fn write_tensor(path: &std::path::Path, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
    let t = Tensor::new(shape, data)?;
    write_tensor_f32(BufWriter::new(std::fs::File::create(path)?), &t)?;
    Ok(())
}

pub fn run(ctx: &Context, a: DemoArgs) -> Result<()> {
    let overrides = json!({
        "scene": a.scene,
        "frame": a.frame,
        "static_world": a.static_world.then_some(true),
        "checkpoint": a.checkpoint,
        "model": a.model,
        "max_aligned_objects": a.max_aligned_objects,
        "spec": { "seed": ctx.seed },
    });
    let cfg: DemoConfig = ctx.resolve(overrides)?;
    if cfg.frame == 0 {
        bail!(ocbev::Error::InvalidArgument("--frame must be at least 1; frame 0 has no predecessor".into()));
    }
    ctx.write_manifest(&cfg, cfg.spec.seed)?;

    let scene = match &cfg.scene {
        Some(p) => load_scene(&scene_files(p)?[0])?,
        None => {
            let spec = if cfg.static_world { static_spec(&cfg.spec) } else { cfg.spec.clone() };
            spec.validate()?;
            generate_scene(&spec)?
        }
    };
    let k = cfg.frame;
    if k >= scene.frames.len() {
        bail!(ocbev::Error::IndexOutOfRange {
            index: k,
            len: scene.frames.len()
        });
    }
    let grid = scene.spec.grid()?;
    let (prev_f, cur_f) = (&scene.frames[k - 1], &scene.frames[k]);
    let dt = scene.spec.dt;
    let pose = cur_f.relative_pose;

    let model = cfg.checkpoint.as_ref().map(|ck| load_model(ck, cfg.model.as_deref())).transpose()?;
    let (prev, cur, heat, mode) = match &model {
        Some((m, desc)) => (
            network_bev(m, &desc.train, prev_f, dt)?,
            network_bev(m, &desc.train, cur_f, dt)?,
            network_heatmap(m, &desc.train, &scene, k)?,
            "checkpoint",
        ),
        None => {
            let centers: Vec<[f64; 2]> = cur_f.objects.iter().map(|o| [o.center[0], o.center[1]]).collect();
            (
                rasterize(&grid, prev_f)?,
                rasterize(&grid, cur_f)?,
                centerness_target(&grid, &centers, CENTERNESS_ALPHA)?.values,
                "raster",
            )
        }
    };
    let rec = motion_record(&grid, Some(prev_f), None, VelocitySource::Oracle);
    let ego = fuse_ego(&prev, &cur, &pose)?;
    let fused = fuse_object(&prev, &ego, &rec, &pose, dt, cfg.max_aligned_objects)?;
    let mapping = ego_overlap_mapping(&grid, &grid, &pose)?;
    let object_pairs = predict_object_targets(&rec, &pose, dt, &grid, cfg.max_aligned_objects)?;

    let features = [("prev", &prev), ("cur", &cur), ("ego_fused", &ego), ("fused", &fused)];
    let norms: Vec<Vec<f64>> = features.iter().map(|(_, f)| f.cell_norms()).collect();
    let max = norms.iter().flatten().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { max } else { 1.0 };
    let mut files = Vec::new();
    for ((name, f), nv) in features.iter().zip(&norms) {
        let scaled: Vec<f64> = nv.iter().map(|x| x / scale).collect();
        pgm::write(&ctx.path(&format!("{name}.pgm")), &scaled, grid.rows, grid.cols)?;
        write_tensor(&ctx.path(&format!("{name}.ocbt")), vec![f.channels, grid.rows, grid.cols], f.flat().to_vec())?;
        files.push(format!("{name}.pgm"));
        files.push(format!("{name}.ocbt"));
    }
    pgm::write(&ctx.path("heatmap.pgm"), &heat, grid.rows, grid.cols)?;
    write_tensor(&ctx.path("heatmap.ocbt"), vec![grid.rows, grid.cols], heat.clone())?;
    files.push("heatmap.pgm".into());
    files.push("heatmap.ocbt".into());

    let prev_boxes: Vec<DetectionBox> = prev_f.objects.iter().map(|o| o.to_box()).collect();
    let summary = json!({
        "mode": mode,
        "scene_seed": scene.spec.seed,
        "frame": k,
        "dt": dt,
        "pose": { "yaw": pose.yaw, "tx": pose.tx, "ty": pose.ty },
        "grid": { "rows": grid.rows, "cols": grid.cols },
        "channels": if mode == "raster" { json!(RASTER_CHANNELS) } else { json!(prev.channels) },
        "ego_pairs": mapping.pairs,
        "object_pairs": object_pairs,
        "previous_objects": prev_boxes,
        "norm_scale": scale,
        "files": files,
    });
    std::fs::write(ctx.path("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "frame pair ({}, {}): {} ego-aligned cells, {} object-aligned cells; dumps in {}",
        k - 1,
        k,
        mapping.len(),
        object_pairs.len(),
        ctx.out.display()
    );
    Ok(())
}
