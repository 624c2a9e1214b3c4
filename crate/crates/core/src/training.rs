//! Deterministic training loop, schedule, optimizer and ablation harness.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DetectionBox, EvalConfig, FrameEval, MetricReport};
use crate::geometry::BevGrid;
use crate::losses_matching::{
    centerness_target, hungarian_assign, matching_cost, total_loss, Assignment, LossBreakdown, LossWeights, BCE_EPS,
    CENTERNESS_ALPHA, FOCAL_ALPHA, FOCAL_GAMMA,
};
use crate::network::{decode_detections, encode_box, FrameInput, FrameOutput, Graph, Model, ModuleFlags, NetworkConfig, ParamSet, BOX_DIM};
use crate::query_enhancement::EnhancementConfig;
use crate::simulator::{FrameRecord, Scene, SceneSpec};
use crate::temporal_fusion::{ObjectMotionRecord, DEFAULT_MAX_ALIGNED_OBJECTS, DEFAULT_MAX_SPEED};

/// Where object-motion fusion takes previous positions and velocities from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocitySource {
    /// Ground-truth objects of the previous frame.
    Oracle,
    /// Detections of the previous frame scoring at least 0.3.
    Predicted,
}

/// Score a previous-frame detection needs to seed object fusion.
pub const PREDICTED_MOTION_SCORE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    /// Warmup starts at `lr * warmup_ratio`.
    pub warmup_ratio: f64,
    pub min_lr_ratio: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub flags: ModuleFlags,
    pub max_aligned_objects: usize,
    pub n_rep: usize,
    pub eval_every: usize,
    /// mAP whose first crossing on the held-out set is recorded.
    pub target_map: Option<f64>,
    pub velocity_source: VelocitySource,
    pub loss_weights: LossWeights,
    pub centerness_alpha: f64,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 1000,
            lr: 2e-4,
            warmup_iters: 500,
            warmup_ratio: 1.0 / 3.0,
            min_lr_ratio: 1e-3,
            clip_norm: 35.0,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            flags: ModuleFlags::ALL,
            max_aligned_objects: DEFAULT_MAX_ALIGNED_OBJECTS,
            n_rep: 50,
            eval_every: 200,
            target_map: None,
            velocity_source: VelocitySource::Oracle,
            loss_weights: LossWeights::default(),
            centerness_alpha: CENTERNESS_ALPHA,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be positive".into()));
        }
        // lr = 0 is accepted as a frozen optimizer.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::InvalidArgument("warmup and min-lr ratios must lie in [0, 1]".into()));
        }
        if self.n_rep == 0 {
            return Err(Error::InvalidArgument("n_rep must be positive".into()));
        }
        self.network.validate()
    }

    /// Learning rate used for update `step` (zero-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_iters {
            let frac = step as f64 / self.warmup_iters as f64;
            return self.lr * (self.warmup_ratio + (1.0 - self.warmup_ratio) * frac);
        }
        let span = self.iterations.saturating_sub(self.warmup_iters).max(1) as f64;
        let progress = ((step - self.warmup_iters) as f64 / span).min(1.0);
        let min = self.lr * self.min_lr_ratio;
        min + (self.lr - min) * 0.5 * (1.0 + (PI * progress).cos())
    }

    pub fn enhancement(&self) -> EnhancementConfig {
        EnhancementConfig {
            n_rep: self.n_rep,
            ..EnhancementConfig::default()
        }
    }
}

/// Model matching a scene specification's grid, rig and classes.
pub fn build_model(spec: &SceneSpec, net: &NetworkConfig, seed: u64) -> Result<Model> {
    let mut cfg = net.clone();
    cfg.feature_channels = spec.rig.feature_channels;
    cfg.num_classes = spec.num_classes();
    Model::new(cfg, spec.grid()?, spec.rig.build()?, spec.rig.feature_dims(), seed)
}

/// Supervision for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub classes: Vec<usize>,
    pub boxes: Vec<[f64; BOX_DIM]>,
    pub centers: Vec<[f64; 2]>,
}

impl FrameTargets {
    pub fn from_boxes(gts: &[DetectionBox], grid: &BevGrid) -> Self {
        Self {
            classes: gts.iter().map(|b| b.class).collect(),
            boxes: gts.iter().map(|b| encode_box(b, grid)).collect(),
            centers: gts.iter().map(|b| [b.center[0], b.center[1]]).collect(),
        }
    }
}

/// Classification and box losses of one head with its assignment.
fn head_losses(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    targets: &FrameTargets,
    weights: &LossWeights,
    fixed: Option<&Assignment>,
) -> Result<(Var, Var, Assignment)> {
    let assignment = match fixed {
        Some(a) => a.clone(),
        None => {
            let cost = matching_cost(g.value(logits), g.value(boxes), &targets.classes, &targets.boxes, weights);
            hungarian_assign(&cost)?
        }
    };
    let n = g.value(logits).rows();
    let cls_targets: Vec<Option<usize>> = assignment.targets(n).iter().map(|t| t.map(|gi| targets.classes[gi])).collect();
    let norm = targets.classes.len().max(1) as f64;
    let l_cls = g.tape.focal(logits, cls_targets, FOCAL_GAMMA, FOCAL_ALPHA, norm);
    let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let l_bbox = if rows.is_empty() {
        g.tape.constant(Tensor::scalar(0.0))
    } else {
        let matched = g.tape.gather_rows(boxes, rows);
        let tgt: Vec<f64> = assignment.pairs.iter().flat_map(|p| targets.boxes[p.1]).collect();
        g.tape.l1(matched, tgt)
    };
    Ok((l_cls, l_bbox, assignment))
}

/// Loss of one frame on the tape. The query assignment is recomputed from
/// the current outputs unless `fixed` is given. Auxiliary heads, when
/// present, add their weighted classification and box terms to the tape
/// total with their own assignments; the breakdown covers the final head.
pub fn frame_loss(
    g: &mut Graph,
    grid: &BevGrid,
    out: &FrameOutput,
    targets: &FrameTargets,
    weights: &LossWeights,
    alpha: f64,
    fixed: Option<&Assignment>,
) -> Result<(Var, LossBreakdown, Assignment)> {
    let heat = centerness_target(grid, &targets.centers, alpha)?;
    let l_c = g.tape.bce(out.heatmap, heat.values, BCE_EPS);
    let (l_cls, l_bbox, assignment) = head_losses(g, out.logits, out.boxes, targets, weights, fixed)?;
    let a = g.tape.scale(l_c, weights.centerness);
    let b = g.tape.scale(l_cls, weights.cls);
    let c = g.tape.scale(l_bbox, weights.bbox);
    let ab = g.tape.add(a, b);
    let mut total = g.tape.add(ab, c);
    let breakdown = total_loss(
        g.value(l_c).data[0],
        g.value(l_cls).data[0],
        g.value(l_bbox).data[0],
        weights,
    );
    for &(logits, boxes) in &out.aux {
        let (l_cls, l_bbox, _) = head_losses(g, logits, boxes, targets, weights, None)?;
        let b = g.tape.scale(l_cls, weights.cls);
        let c = g.tape.scale(l_bbox, weights.bbox);
        let bc = g.tape.add(b, c);
        total = g.tape.add(total, bc);
    }
    Ok((total, breakdown, assignment))
}

/// Object motion record for `cur` built from the previous frame.
pub fn motion_record(
    grid: &BevGrid,
    prev_frame: Option<&FrameRecord>,
    prev_detections: Option<&[DetectionBox]>,
    source: VelocitySource,
) -> ObjectMotionRecord {
    let (pos, vel): (Vec<[f64; 2]>, Vec<[f64; 2]>) = match source {
        VelocitySource::Oracle => match prev_frame {
            Some(f) => f.objects.iter().map(|o| ([o.center[0], o.center[1]], o.velocity)).unzip(),
            None => (Vec::new(), Vec::new()),
        },
        VelocitySource::Predicted => match prev_detections {
            Some(d) => d
                .iter()
                .filter(|b| b.score >= PREDICTED_MOTION_SCORE)
                .map(|b| ([b.center[0], b.center[1]], b.velocity))
                .unzip(),
            None => (Vec::new(), Vec::new()),
        },
    };
    ObjectMotionRecord::filtered(grid, &pos, &vel, DEFAULT_MAX_SPEED)
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.entries().iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p.data[i]);
            }
        }
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `grads` so that their global norm does not exceed `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let mut scale = max_norm / norm;
        loop {
            let scaled: Vec<Tensor> = grads
                .iter()
                .map(|g| Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|x| x * scale).collect(),
                })
                .collect();
            if global_norm(&scaled) <= max_norm {
                grads.clone_from_slice(&scaled);
                break;
            }
            scale = f64::from_bits(scale.to_bits() - 1);
        }
    }
    norm
}

/// One logged training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub scene: usize,
    pub frame: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub matched: usize,
    pub peaks: usize,
    pub height_offsets: Vec<f64>,
    /// Held-out metrics, present every `eval_every` iterations and at the end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
    pub target_map: Option<f64>,
    /// First evaluated iteration whose mAP reached `target_map`.
    pub iterations_to_target: Option<usize>,
}

impl TrainLog {
    /// `(iteration, report)` for every evaluation, in order.
    pub fn evaluations(&self) -> Vec<(usize, &MetricReport)> {
        self.records.iter().filter_map(|r| r.eval.as_ref().map(|e| (r.iteration, e))).collect()
    }

    pub fn final_report(&self) -> Option<&MetricReport> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }

    /// First evaluated iteration with mAP at least `target`.
    pub fn iterations_to(&self, target: f64) -> Option<usize> {
        self.evaluations().into_iter().find(|(_, r)| r.map >= target).map(|(i, _)| i)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(f.flush()?)
    }

    pub fn read_jsonl(path: &Path, target_map: Option<f64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut log = TrainLog {
            target_map,
            ..Default::default()
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            log.records.push(serde_json::from_str(line)?);
        }
        log.iterations_to_target = target_map.and_then(|t| log.iterations_to(t));
        Ok(log)
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: AdamW,
    /// Detached BEV of the previous iteration when it belongs to the same scene.
    pub prev_bev: Option<Tensor>,
    pub prev_detections: Option<Vec<DetectionBox>>,
}

impl TrainState {
    pub fn new(params: ParamSet) -> Self {
        Self {
            optimizer: AdamW::new(&params),
            params,
            prev_bev: None,
            prev_detections: None,
        }
    }

    /// Packs the state into one tensor set: model parameters under their
    /// own names, optimizer moments under `optim.m.*` / `optim.v.*`, the
    /// step under `state.step` and the carried BEV under `state.prev_bev`.
    /// Predicted detections are not carried; resuming with the predicted
    /// velocity source restarts the current scene's motion record.
    pub fn to_param_set(&self) -> ParamSet {
        let mut ps = self.params.clone();
        for ((name, _), (m, v)) in self.params.entries().iter().zip(self.optimizer.m.iter().zip(&self.optimizer.v)) {
            ps.insert(format!("optim.m.{name}"), m.clone());
            ps.insert(format!("optim.v.{name}"), v.clone());
        }
        ps.insert("state.step", Tensor::scalar(self.optimizer.step as f64));
        if let Some(p) = &self.prev_bev {
            ps.insert("state.prev_bev", p.clone());
        }
        ps
    }

    /// Inverse of [`TrainState::to_param_set`] given the model's parameter layout.
    pub fn from_param_set(template: &ParamSet, packed: &ParamSet) -> Result<Self> {
        let mut params = template.clone();
        let mut optimizer = AdamW::new(template);
        for (i, (name, t)) in template.entries().iter().enumerate() {
            let get = |key: &str| {
                packed
                    .get(key)
                    .filter(|x| x.shape == t.shape)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}` with shape {:?}", t.shape)))
            };
            *params.get_mut(name).expect("template name") = get(name)?;
            optimizer.m[i] = get(&format!("optim.m.{name}"))?;
            optimizer.v[i] = get(&format!("optim.v.{name}"))?;
        }
        let step = packed
            .get("state.step")
            .ok_or_else(|| Error::Format("checkpoint lacks `state.step`".into()))?
            .data[0];
        optimizer.step = step as u64;
        Ok(Self {
            params,
            optimizer,
            prev_bev: packed.get("state.prev_bev").cloned(),
            prev_detections: None,
        })
    }
}

/// `(scene, frame)` visited at `iteration`: scenes in a seeded random order
/// per epoch, frames in temporal order.
pub fn schedule_position(seed: u64, scenes: &[Scene], iteration: usize) -> (usize, usize) {
    let per_epoch: usize = scenes.iter().map(|s| s.frames.len()).sum();
    let epoch = iteration / per_epoch;
    let mut rest = iteration % per_epoch;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    for s in order {
        let n = scenes[s].frames.len();
        if rest < n {
            return (s, rest);
        }
        rest -= n;
    }
    unreachable!("iteration within epoch")
}

fn gt_boxes(frame: &FrameRecord) -> Vec<DetectionBox> {
    frame.objects.iter().map(|o| o.to_box()).collect()
}

/// Runs the model over every frame of `scenes`, carrying the BEV within a
/// scene, and evaluates against ground truth.
pub fn evaluate_model(model: &Model, scenes: &[Scene], flags: &ModuleFlags, cfg: &TrainConfig, eval: &EvalConfig) -> Result<MetricReport> {
    let mut frames = Vec::new();
    for scene in scenes {
        let mut prev: Option<Tensor> = None;
        let mut prev_det: Option<Vec<DetectionBox>> = None;
        for (t, fr) in scene.frames.iter().enumerate() {
            let rec = motion_record(&model.grid, t.checked_sub(1).map(|p| &scene.frames[p]), prev_det.as_deref(), cfg.velocity_source);
            let input = FrameInput {
                feats: &fr.features,
                prev: prev.as_ref(),
                pose: fr.relative_pose,
                motion: &rec,
                dt: scene.spec.dt,
                max_aligned_objects: cfg.max_aligned_objects,
                peaks: None,
            };
            let mut g = Graph::new(&model.params);
            let out = model.forward(&mut g, &input, flags, &cfg.enhancement())?;
            let preds = decode_detections(g.value(out.logits), g.value(out.boxes), &model.grid);
            prev = Some(g.value(out.bev).clone());
            prev_det = Some(preds.clone());
            frames.push(FrameEval { preds, gts: gt_boxes(fr) });
        }
    }
    Ok(evaluate(&frames, eval))
}

/// Optional hooks observed by [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called after every iteration with the record just appended.
    pub on_iteration: Option<Box<dyn FnMut(&IterationRecord) + 'a>>,
    /// Receives a JSON description of the offending frame before a
    /// non-finite loss aborts training.
    pub on_non_finite: Option<Box<dyn FnMut(&serde_json::Value) + 'a>>,
    /// Stops after this many updates in total; the learning-rate schedule
    /// still spans `cfg.iterations`.
    pub stop_after: Option<usize>,
}

/// Trains `model` on `train_scenes` for `cfg.iterations` updates starting at
/// update `state.optimizer.step`, evaluating on `eval_scenes` every
/// `cfg.eval_every` updates and after the last one.
pub fn train_from(
    model: &mut Model,
    state: &mut TrainState,
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    cfg: &TrainConfig,
    hooks: &mut TrainHooks,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_scenes.is_empty() || train_scenes.iter().any(|s| s.frames.is_empty()) {
        return Err(Error::InvalidArgument("training needs at least one non-empty scene".into()));
    }
    let eval_cfg = EvalConfig {
        num_classes: model.cfg.num_classes,
        ..EvalConfig::default()
    };
    let mut log = TrainLog {
        target_map: cfg.target_map,
        ..Default::default()
    };
    let start = state.optimizer.step as usize;
    let end = hooks.stop_after.map_or(cfg.iterations, |s| s.min(cfg.iterations));
    for it in start..end {
        let (si, fi) = schedule_position(cfg.seed, train_scenes, it);
        let scene = &train_scenes[si];
        let frame = &scene.frames[fi];
        if fi == 0 {
            state.prev_bev = None;
            state.prev_detections = None;
        }
        let rec = motion_record(
            &model.grid,
            fi.checked_sub(1).map(|p| &scene.frames[p]),
            state.prev_detections.as_deref(),
            cfg.velocity_source,
        );
        let gts = gt_boxes(frame);
        let targets = FrameTargets::from_boxes(&gts, &model.grid);
        let input = FrameInput {
            feats: &frame.features,
            prev: state.prev_bev.as_ref(),
            pose: frame.relative_pose,
            motion: &rec,
            dt: scene.spec.dt,
            max_aligned_objects: cfg.max_aligned_objects,
            peaks: None,
        };
        let (mut grads, breakdown, matched, out, bev, preds) = {
            let mut g = Graph::new(&state.params);
            if model.cfg.dropout > 0.0 {
                g.dropout_rng = Some(ChaCha8Rng::seed_from_u64(cfg.seed ^ (it as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)));
            }
            let out = model.forward(&mut g, &input, &cfg.flags, &cfg.enhancement())?;
            let (loss, breakdown, assignment) =
                frame_loss(&mut g, &model.grid, &out, &targets, &cfg.loss_weights, cfg.centerness_alpha, None)?;
            if ![breakdown.l_c, breakdown.l_cls, breakdown.l_bbox, breakdown.total].iter().all(|x| x.is_finite()) {
                let dump = serde_json::json!({
                    "iteration": it,
                    "scene": si,
                    "frame": fi,
                    "scene_seed": scene.spec.seed,
                    "loss": breakdown,
                    "ground_truth": gts,
                    "height_offsets": out.height_offsets,
                    "peaks": out.peaks,
                });
                if let Some(f) = hooks.on_non_finite.as_mut() {
                    f(&dump);
                }
                return Err(Error::NonFinite(format!("loss at iteration {it} (scene {si}, frame {fi}): {dump}")));
            }
            let grads = g.tape.backward(loss);
            let preds = match cfg.velocity_source {
                VelocitySource::Predicted => Some(decode_detections(g.value(out.logits), g.value(out.boxes), &model.grid)),
                VelocitySource::Oracle => None,
            };
            (g.param_grads(&grads), breakdown, assignment.pairs.len(), out.clone(), g.value(out.bev).clone(), preds)
        };
        let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
        let clipped_norm = global_norm(&grads);
        let lr = cfg.lr_at(it);
        state.optimizer.update(&mut state.params, &grads, lr, cfg);
        state.prev_bev = if fi + 1 < scene.frames.len() { Some(bev) } else { None };
        state.prev_detections = preds;

        let done = it + 1;
        let eval = if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.iterations) && !eval_scenes.is_empty() {
            model.params.load_from(&state.params)?;
            Some(evaluate_model(model, eval_scenes, &cfg.flags, cfg, &eval_cfg)?)
        } else {
            None
        };
        if let (Some(t), Some(r), None) = (cfg.target_map, &eval, log.iterations_to_target) {
            if r.map >= t {
                log.iterations_to_target = Some(done);
            }
        }
        let record = IterationRecord {
            iteration: done,
            scene: si,
            frame: fi,
            lr,
            loss: breakdown,
            grad_norm,
            clipped_norm,
            matched,
            peaks: out.peaks.len(),
            height_offsets: out.height_offsets,
            eval,
        };
        if let Some(f) = hooks.on_iteration.as_mut() {
            f(&record);
        }
        log.records.push(record);
    }
    model.params.load_from(&state.params)?;
    Ok(log)
}

/// Trains from the model's current parameters.
pub fn train(model: &mut Model, train_scenes: &[Scene], eval_scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainLog> {
    let mut state = TrainState::new(model.params.clone());
    train_from(model, &mut state, train_scenes, eval_scenes, cfg, &mut TrainHooks::default())
}

/// Generates `count` scenes from `spec` with seeds `first_seed..`.
pub fn generate_scenes(spec: &SceneSpec, first_seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| {
            let mut s = spec.clone();
            s.seed = first_seed + i;
            crate::simulator::generate_scene(&s)
        })
        .collect()
}

/// Outcome of one training run inside an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub map: f64,
    pub ate: f64,
    pub aoe: f64,
    pub ave: f64,
    /// Velocity error on ground truth faster than the report's speed threshold.
    pub fast_ave: f64,
    pub iterations_to_target: Option<usize>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSpread {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub spread: f64,
}

impl MeanSpread {
    /// Mean and spread of the finite values; NaN when there are none.
    pub fn of(xs: &[f64]) -> Self {
        let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                spread: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        Self { mean, spread: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: ModuleFlags,
    pub runs: Vec<RunSummary>,
}

impl AblationRow {
    pub fn stat(&self, f: impl Fn(&RunSummary) -> f64) -> MeanSpread {
        MeanSpread::of(&self.runs.iter().map(f).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn table(&self) -> String {
        let f = |m: MeanSpread| format!("{:.4}±{:.4}", m.mean, m.spread);
        let mut s = format!(
            "{:<20} {:>15} {:>15} {:>15} {:>15} {:>15} {:>12}\n",
            "modules", "mAP", "ATE", "AOE", "AVE", "AVE(fast)", "iters→target"
        );
        for r in &self.rows {
            let its: Vec<String> = r
                .runs
                .iter()
                .map(|x| x.iterations_to_target.map_or("-".to_string(), |i| i.to_string()))
                .collect();
            s.push_str(&format!(
                "{:<20} {:>15} {:>15} {:>15} {:>15} {:>15} {:>12}\n",
                r.label,
                f(r.stat(|x| x.map)),
                f(r.stat(|x| x.ate)),
                f(r.stat(|x| x.aoe)),
                f(r.stat(|x| x.ave)),
                f(r.stat(|x| x.fast_ave)),
                its.join("/")
            ));
        }
        s
    }
}

/// Trains every flag set with every seed. Model initialization and scene
/// order use the run seed; the scene sets are shared.
pub fn run_ablation_grid(
    spec: &SceneSpec,
    template: &TrainConfig,
    flag_sets: &[ModuleFlags],
    seeds: &[u64],
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for flags in flag_sets {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                flags: *flags,
                ..template.clone()
            };
            let mut model = build_model(spec, &cfg.network, seed)?;
            let log = train(&mut model, train_scenes, eval_scenes, &cfg)?;
            let rep = log
                .final_report()
                .cloned()
                .ok_or_else(|| Error::InvalidArgument("ablation run produced no evaluation".into()))?;
            runs.push(RunSummary {
                seed,
                map: rep.map,
                ate: rep.errors.ate,
                aoe: rep.errors.aoe,
                ave: rep.errors.ave,
                fast_ave: rep.fast_errors.ave,
                iterations_to_target: log.iterations_to_target,
                log,
            });
        }
        rows.push(AblationRow {
            label: flags.label(),
            flags: *flags,
            runs,
        });
    }
    Ok(AblationTable { rows })
}

/// The eight on/off combinations of ego/object fusion, local sampling
/// (with its adaptive offset) and query enhancement, ordered from none to all.
pub fn table_layout() -> Vec<ModuleFlags> {
    let mut out = Vec::new();
    for bits in 0..8u8 {
        let fusion = bits & 1 != 0;
        let local = bits & 2 != 0;
        let qe = bits & 4 != 0;
        out.push(ModuleFlags {
            ego_fusion: fusion,
            object_fusion: fusion,
            local_sampling: local,
            adaptive_offset: local,
            query_enhancement: qe,
        });
    }
    out.sort_by_key(|f| [f.ego_fusion, f.local_sampling, f.query_enhancement].iter().filter(|b| **b).count());
    out
}
