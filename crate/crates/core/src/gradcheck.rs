//! Finite-difference verification of tape gradients.
//!
//! Each input entry is perturbed by `±h` and the loss re-evaluated. When a
//! perturbation changes a discrete choice of the computation (see
//! [`Tape::smoothness_signature`]) the central difference straddles a kink
//! and the entry falls back to a second-order one-sided difference on the
//! side that stays on the same smooth piece. Entries where neither side is
//! smooth are counted as undefined.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::{Graph, ParamSet};

/// Step near the cube root of machine epsilon, which balances truncation
/// and rounding error of central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Fraction of the largest gradient magnitude of a whole check used as the
/// smallest denominator of a tensor's relative error. Tensors whose true
/// gradient vanishes (for example a bias added to every attention key) are
/// thereby judged in absolute terms against the instance's gradient scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `max |a - n| / max(max |a|, max |n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(floor.max(f64::MIN_POSITIVE), f64::max);
    diff / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub relative_error: f64,
    pub max_abs_error: f64,
    /// Largest magnitude among the analytic and numeric entries.
    pub scale: f64,
    pub entries: usize,
    /// Entries whose derivative was taken one-sided.
    pub one_sided: usize,
    /// Entries with no smooth side within `2h`.
    pub undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl CheckReport {
    fn finish(mut tensors: Vec<TensorCheck>) -> Self {
        let floor = RELATIVE_FLOOR * tensors.iter().map(|t| t.scale).fold(0.0, f64::max);
        for t in &mut tensors {
            let d = t.scale.max(floor);
            t.relative_error = if d > 0.0 { t.max_abs_error / d } else { 0.0 };
        }
        Self { tensors }
    }

    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.relative_error).fold(0.0, f64::max)
    }

    pub fn undefined(&self) -> usize {
        self.tensors.iter().map(|t| t.undefined).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Loss value and smoothness signature at one point.
type Probe<'a> = dyn FnMut(usize, usize, f64) -> Result<(f64, u64)> + 'a;

/// Numeric derivative of entry `(t, e)` by probing offsets of `h`.
fn numeric_entry(probe: &mut Probe, t: usize, e: usize, h: f64, sig0: u64) -> Result<(Option<f64>, bool)> {
    let (fp, sp) = probe(t, e, h)?;
    let (fm, sm) = probe(t, e, -h)?;
    if sp == sig0 && sm == sig0 {
        return Ok((Some((fp - fm) / (2.0 * h)), false));
    }
    let (f0, _) = probe(t, e, 0.0)?;
    if sp == sig0 {
        let (f2, s2) = probe(t, e, 2.0 * h)?;
        if s2 == sig0 {
            return Ok((Some((-3.0 * f0 + 4.0 * fp - f2) / (2.0 * h)), true));
        }
    }
    if sm == sig0 {
        let (f2, s2) = probe(t, e, -2.0 * h)?;
        if s2 == sig0 {
            return Ok((Some((3.0 * f0 - 4.0 * fm + f2) / (2.0 * h)), true));
        }
    }
    Ok((None, true))
}

fn compare(name: String, analytic: &[f64], numeric: Vec<Option<f64>>, one_sided: usize) -> TensorCheck {
    let undefined = numeric.iter().filter(|n| n.is_none()).count();
    let (a, n): (Vec<f64>, Vec<f64>) = analytic.iter().zip(&numeric).filter_map(|(a, n)| n.map(|n| (*a, n))).unzip();
    TensorCheck {
        name,
        relative_error: relative_error(&a, &n, 0.0),
        max_abs_error: a.iter().zip(&n).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max),
        scale: a.iter().chain(&n).map(|v| v.abs()).fold(0.0, f64::max),
        entries: analytic.len(),
        one_sided,
        undefined,
    }
}

/// Checks the gradient of a scalar tape function with respect to each of
/// its `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], mut f: F, h: f64) -> Result<CheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let sig0 = tape.smoothness_signature();
    let grads = tape.backward(root);
    let analytic: Vec<Vec<f64>> = vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zero(*v, t.len())).collect();

    let mut probe = |t: usize, e: usize, d: f64| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut x = x.clone();
                if i == t {
                    x.data[e] += d;
                }
                tape.leaf(x)
            })
            .collect();
        let r = f(&mut tape, &vars)?;
        Ok((tape.value(r).data[0], tape.smoothness_signature()))
    };
    let mut tensors = Vec::new();
    for (t, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.len());
        let mut one_sided = 0;
        for e in 0..input.len() {
            let (n, side) = numeric_entry(&mut probe, t, e, h, sig0)?;
            one_sided += side as usize;
            numeric.push(n);
        }
        tensors.push(compare(format!("input{t}"), &analytic[t], numeric, one_sided));
    }
    Ok(CheckReport::finish(tensors))
}

/// Checks gradients with respect to every parameter that takes part in `f`
/// and to every extra input.
pub fn check_params<F>(params: &ParamSet, inputs: &[Tensor], mut f: F, h: f64) -> Result<CheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let (analytic_p, analytic_x, bound, sig0) = {
        let mut g = Graph::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.tape.leaf(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        if g.value(root).len() != 1 {
            return Err(Error::Shape("gradient check needs a scalar output".into()));
        }
        let sig0 = g.tape.smoothness_signature();
        let grads = g.tape.backward(root);
        let ax: Vec<Vec<f64>> = vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zero(*v, t.len())).collect();
        (g.param_grads(&grads), ax, g.bound_params(), sig0)
    };
    let n_params = params.len();
    let mut work = params.clone();
    let mut probe = |t: usize, e: usize, d: f64| -> Result<(f64, u64)> {
        let mut xs = inputs.to_vec();
        if t < n_params {
            work.tensors_mut().nth(t).expect("parameter index").data[e] += d;
        } else {
            xs[t - n_params].data[e] += d;
        }
        let out = {
            let mut g = Graph::new(&work);
            let vars: Vec<Var> = xs.iter().map(|x| g.tape.leaf(x.clone())).collect();
            let r = f(&mut g, &vars)?;
            (g.value(r).data[0], g.tape.smoothness_signature())
        };
        if t < n_params {
            // restore exactly
            work.tensors_mut().nth(t).expect("parameter index").data[e] = params.entries()[t].1.data[e];
        }
        Ok(out)
    };
    let mut tensors = Vec::new();
    for t in 0..n_params + inputs.len() {
        let (name, len, analytic) = if t < n_params {
            if !bound[t] {
                continue;
            }
            let (n, p) = &params.entries()[t];
            (n.clone(), p.len(), &analytic_p[t].data)
        } else {
            (format!("input{}", t - n_params), inputs[t - n_params].len(), &analytic_x[t - n_params])
        };
        let mut numeric = Vec::with_capacity(len);
        let mut one_sided = 0;
        for e in 0..len {
            let (n, side) = numeric_entry(&mut probe, t, e, h, sig0)?;
            one_sided += side as usize;
            numeric.push(n);
        }
        tensors.push(compare(name, analytic, numeric, one_sided));
    }
    Ok(CheckReport::finish(tensors))
}

// ---------------------------------------------------------------------------
// Randomized suite over every differentiable operation of the network.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::DetectionBox;
use crate::geometry::{BevGrid, CameraModel, PlanarPose};
use crate::losses_matching::{hungarian_assign, matching_cost, LossWeights};
use crate::network::{
    declare_deform, declare_layer_norm, deformable_attention, detection_head, heatmap_head, object_focused_spatial_attention,
    spatial_attention, spatial_layout, temporal_attention, DeformSpec, FrameInput, FrameOutput, ImageFeatureSet, Init, Model, ModuleFlags,
    NetworkConfig,
};
use crate::query_enhancement::EnhancementConfig;
use crate::spatial_sampling::{build_reference_points, GLOBAL_RANGE, LOCAL_RANGE};
use crate::temporal_fusion::ObjectMotionRecord;
use crate::training::{frame_loss, FrameTargets};

/// Operations covered by [`run_op`].
pub const OPS: [&str; 13] = [
    "bilinear_sample",
    "deformable_attention",
    "temporal_attention",
    "spatial_attention",
    "ofspaa",
    "height_offset",
    "heatmap_head",
    "detection_head",
    "bce_loss",
    "focal_loss",
    "l1_box_loss",
    "total_loss",
    "encoder_decoder",
];

/// Tolerance on the relative error for 64-bit arithmetic.
pub const TOLERANCE: f64 = 1e-6;

/// Small network used by the randomized instances.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        embed_dim: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_hidden: 12,
        dropout: 0.0,
        points: 2,
        num_queries: 6,
        num_classes: 3,
        feature_channels: 4,
        pillar_points: 2,
        max_height_offset: 1.0,
        aux_losses: false,
    }
}

const TINY_FEATURES: (usize, usize) = (5, 7);

fn tiny_grid() -> BevGrid {
    BevGrid::square(4, 6.0).expect("valid grid")
}

fn tiny_cameras() -> Vec<CameraModel> {
    [0.0, PI / 2.0, PI]
        .iter()
        .map(|&yaw| CameraModel::level(yaw, [0.0, 0.0, 0.0], 100f64.to_radians(), 70, 50).expect("valid camera"))
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

/// Perturbs every parameter so that no branch sits at its initialization.
fn randomize(ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for t in ps.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

/// `sum(x * r)` for a fixed random `r`, turning any output into a scalar.
fn project(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.value(x).shape.clone();
    let r = tape.constant(random_tensor(rng, &shape, 1.0));
    let p = tape.mul(x, r);
    tape.sum(p)
}

fn camera_features(rng: &mut ChaCha8Rng, cams: usize, c: usize) -> Vec<Tensor> {
    let (h, w) = TINY_FEATURES;
    (0..cams).map(|_| random_tensor(rng, &[h * w, c], 1.0)).collect()
}

fn deform_params(rng: &mut ChaCha8Rng, prefix: &str, s: &DeformSpec, ln: bool) -> ParamSet {
    let mut ps = ParamSet::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut init = Init { rng: &mut init_rng };
    declare_deform(&mut ps, &mut init, &format!("{prefix}.attn"), s);
    if ln {
        declare_layer_norm(&mut ps, &mut init, &format!("{prefix}.ln"), s.embed_dim);
    }
    randomize(&mut ps, rng);
    ps
}

/// Gradient check of one randomized instance of `op`.
pub fn run_op(op: &str, seed: u64, h: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let grid = tiny_grid();
    let cams = tiny_cameras();
    let c = cfg.embed_dim;
    let n = grid.len();
    let spatial = DeformSpec {
        query_dim: c,
        value_dim: cfg.feature_channels,
        embed_dim: c,
        heads: cfg.heads,
        groups: cfg.pillar_points,
        points: cfg.points,
    };
    match op {
        "bilinear_sample" => {
            let (hh, ww) = TINY_FEATURES;
            let map = random_tensor(&mut rng, &[hh * ww, 3], 1.0);
            let locs = Tensor::new(vec![6, 2], (0..12).map(|_| rng.gen_range(-0.1..1.1)).collect())?;
            check_inputs(
                &[map, locs],
                |t, v| {
                    let s = t.bilinear(v[0], v[1], (hh, ww));
                    Ok(project(t, s, &mut rng.clone()))
                },
                h,
            )
        }
        "deformable_attention" => {
            let ps = deform_params(&mut rng, "da", &spatial, false);
            let set = build_reference_points(&grid, &cams, &GLOBAL_RANGE, cfg.pillar_points)?;
            let refs = spatial_layout(&set, cams.len(), TINY_FEATURES, cfg.heads, cfg.points);
            let mut inputs = vec![random_tensor(&mut rng, &[n, c], 1.0), refs.refs.clone()];
            inputs.extend(camera_features(&mut rng, cams.len(), cfg.feature_channels));
            let proj = rng.clone();
            check_params(
                &ps,
                &inputs,
                |g, v| {
                    let out = deformable_attention(g, "da.attn", &spatial, v[0], &v[2..], v[1], refs.layout.clone())?;
                    Ok(project(&mut g.tape, out, &mut proj.clone()))
                },
                h,
            )
        }
        "temporal_attention" => {
            let s = DeformSpec {
                value_dim: c,
                groups: 2,
                ..spatial
            };
            let ps = deform_params(&mut rng, "tsa", &s, true);
            let inputs = vec![random_tensor(&mut rng, &[n, c], 1.0), random_tensor(&mut rng, &[n, c], 1.0)];
            let proj = rng.clone();
            check_params(
                &ps,
                &inputs,
                |g, v| {
                    let out = temporal_attention(g, "tsa", &s, &grid, v[0], v[1])?;
                    Ok(project(&mut g.tape, out, &mut proj.clone()))
                },
                h,
            )
        }
        "spatial_attention" => {
            let ps = deform_params(&mut rng, "spa", &spatial, true);
            let set = build_reference_points(&grid, &cams, &GLOBAL_RANGE, cfg.pillar_points)?;
            let refs = spatial_layout(&set, cams.len(), TINY_FEATURES, cfg.heads, cfg.points);
            let mut inputs = vec![random_tensor(&mut rng, &[n, c], 1.0)];
            inputs.extend(camera_features(&mut rng, cams.len(), cfg.feature_channels));
            let proj = rng.clone();
            check_params(
                &ps,
                &inputs,
                |g, v| {
                    let out = spatial_attention(g, "spa", &spatial, v[0], &v[1..], &refs)?;
                    Ok(project(&mut g.tape, out, &mut proj.clone()))
                },
                h,
            )
        }
        "ofspaa" | "height_offset" => {
            let model = random_model(&mut rng)?;
            let global = build_reference_points(&grid, &cams, &GLOBAL_RANGE, cfg.pillar_points)?;
            let global = spatial_layout(&global, cams.len(), TINY_FEATURES, cfg.heads, cfg.points);
            let mut inputs = vec![random_tensor(&mut rng, &[n, c], 1.0)];
            inputs.extend(camera_features(&mut rng, cams.len(), cfg.feature_channels));
            let adaptive = op == "height_offset";
            let proj = rng.clone();
            check_params(
                &model.params,
                &inputs,
                |g, v| {
                    let (dh, range) = if adaptive {
                        let w = g.param("enc.0.dh.w");
                        let b = g.param("enc.0.dh.b");
                        let d = crate::spatial_sampling::predict_height_offset(&mut g.tape, v[0], w, b, cfg.max_height_offset);
                        let shift = g.value(d).data[0];
                        (Some(d), LOCAL_RANGE.shifted(shift))
                    } else {
                        (None, LOCAL_RANGE)
                    };
                    let local = build_reference_points(&grid, &cams, &range, cfg.pillar_points)?;
                    let local = spatial_layout(&local, cams.len(), TINY_FEATURES, cfg.heads, cfg.points);
                    let out = object_focused_spatial_attention(g, "enc.0.sca", &spatial, v[0], &v[1..], &global, Some(&local), dh)?;
                    Ok(project(&mut g.tape, out, &mut proj.clone()))
                },
                h,
            )
        }
        "heatmap_head" => {
            let model = random_model(&mut rng)?;
            let inputs = vec![random_tensor(&mut rng, &[n, c], 1.0)];
            let proj = rng.clone();
            check_params(
                &model.params,
                &inputs,
                |g, v| {
                    let out = heatmap_head(g, v[0]);
                    Ok(project(&mut g.tape, out, &mut proj.clone()))
                },
                h,
            )
        }
        "detection_head" => {
            let model = random_model(&mut rng)?;
            let q = cfg.num_queries;
            let inputs = vec![random_tensor(&mut rng, &[q, c], 1.0), random_tensor(&mut rng, &[q, 2], 2.0)];
            let proj = rng.clone();
            check_params(
                &model.params,
                &inputs,
                |g, v| {
                    let (logits, boxes) = detection_head(g, v[0], v[1]);
                    let mut p = proj.clone();
                    let a = project(&mut g.tape, logits, &mut p);
                    let b = project(&mut g.tape, boxes, &mut p);
                    Ok(g.tape.add(a, b))
                },
                h,
            )
        }
        "bce_loss" => {
            let p = Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(0.02..0.98)).collect())?;
            let target: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            check_inputs(&[p], |t, v| Ok(t.bce(v[0], target.clone(), crate::losses_matching::BCE_EPS)), h)
        }
        "focal_loss" => {
            let q = cfg.num_queries;
            let z = random_tensor(&mut rng, &[q, cfg.num_classes], 3.0);
            let targets: Vec<Option<usize>> = (0..q)
                .map(|_| rng.gen_bool(0.5).then(|| rng.gen_range(0..cfg.num_classes)))
                .collect();
            let norm = targets.iter().flatten().count().max(1) as f64;
            check_inputs(
                &[z],
                |t, v| {
                    Ok(t.focal(
                        v[0],
                        targets.clone(),
                        crate::losses_matching::FOCAL_GAMMA,
                        crate::losses_matching::FOCAL_ALPHA,
                        norm,
                    ))
                },
                h,
            )
        }
        "l1_box_loss" => {
            let a = random_tensor(&mut rng, &[3, crate::network::BOX_DIM], 1.0);
            let target: Vec<f64> = (0..a.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            check_inputs(&[a], |t, v| Ok(t.l1(v[0], target.clone())), h)
        }
        "total_loss" => loss_instance(&mut rng, h),
        "encoder_decoder" => full_instance(&mut rng, h),
        other => Err(Error::InvalidArgument(format!(
            "unknown operation `{other}`; expected one of {}",
            OPS.join(", ")
        ))),
    }
}

fn random_model(rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut model = Model::new(tiny_config(), tiny_grid(), tiny_cameras(), TINY_FEATURES, rng.gen())?;
    randomize(&mut model.params, rng);
    Ok(model)
}

fn random_targets(rng: &mut ChaCha8Rng, grid: &BevGrid, classes: usize, count: usize) -> Vec<DetectionBox> {
    let (x, y) = ([grid.x_min, grid.x_max], [grid.y_min, grid.y_max]);
    (0..count)
        .map(|_| DetectionBox {
            class: rng.gen_range(0..classes),
            score: 1.0,
            center: [rng.gen_range(x[0] * 0.9..x[1] * 0.9), rng.gen_range(y[0] * 0.9..y[1] * 0.9), rng.gen_range(-1.5..0.0)],
            size: [rng.gen_range(1.0..4.0), rng.gen_range(0.5..2.0), rng.gen_range(1.0..2.0)],
            yaw: rng.gen_range(-PI..PI),
            velocity: [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)],
        })
        .collect()
}

/// Weighted total loss as a function of the heads' outputs, with the
/// assignment recomputed at the unperturbed point and then held fixed.
fn loss_instance(rng: &mut ChaCha8Rng, h: f64) -> Result<CheckReport> {
    let cfg = tiny_config();
    let grid = tiny_grid();
    let q = cfg.num_queries;
    let heat = Tensor::new(vec![grid.len(), 1], (0..grid.len()).map(|_| rng.gen_range(0.02..0.98)).collect())?;
    let logits = random_tensor(rng, &[q, cfg.num_classes], 3.0);
    let boxes = random_tensor(rng, &[q, crate::network::BOX_DIM], 1.0);
    let gts = random_targets(rng, &grid, cfg.num_classes, 3);
    let targets = FrameTargets::from_boxes(&gts, &grid);
    let weights = LossWeights::default();
    let assignment = hungarian_assign(&matching_cost(&logits, &boxes, &targets.classes, &targets.boxes, &weights))?;
    check_inputs(
        &[heat, logits, boxes],
        |t, v| {
            let out = FrameOutput {
                bev: v[0],
                heatmap: v[0],
                logits: v[1],
                boxes: v[2],
                aux: Vec::new(),
                peaks: Vec::new(),
                height_offsets: Vec::new(),
            };
            let ps = ParamSet::new();
            let mut g = Graph::new(&ps);
            std::mem::swap(&mut g.tape, t);
            let r = frame_loss(&mut g, &grid, &out, &targets, &weights, crate::losses_matching::CENTERNESS_ALPHA, Some(&assignment));
            std::mem::swap(&mut g.tape, t);
            Ok(r?.0)
        },
        h,
    )
}

fn frame_input<'a>(
    feats: &'a ImageFeatureSet,
    prev: &'a Tensor,
    pose: PlanarPose,
    motion: &'a ObjectMotionRecord,
    peaks: Option<&'a [(usize, f64)]>,
) -> FrameInput<'a> {
    FrameInput {
        feats,
        prev: Some(prev),
        pose,
        motion,
        dt: 0.5,
        max_aligned_objects: crate::temporal_fusion::DEFAULT_MAX_ALIGNED_OBJECTS,
        peaks,
    }
}

/// Every parameter of a randomized model through encoder, heatmap head,
/// query enhancement, decoder, detection head and total loss, plus the
/// previous BEV. Heatmap peaks and the query assignment are frozen at
/// their values for the unperturbed parameters.
fn full_instance(rng: &mut ChaCha8Rng, h: f64) -> Result<CheckReport> {
    let model = random_model(rng)?;
    let cfg = &model.cfg;
    let grid = model.grid;
    let n = grid.len();
    let maps: Vec<Tensor> = (0..model.cams.len())
        .map(|_| random_tensor(rng, &[cfg.feature_channels, TINY_FEATURES.0, TINY_FEATURES.1], 1.0))
        .collect();
    let feats = ImageFeatureSet::new(maps)?;
    let prev = random_tensor(rng, &[n, cfg.embed_dim], 1.0);
    let pose = PlanarPose::new(rng.gen_range(-0.3..0.3), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let gts = random_targets(rng, &grid, cfg.num_classes, 3);
    let motion = ObjectMotionRecord::filtered(
        &grid,
        &gts.iter().map(|b| [b.center[0], b.center[1]]).collect::<Vec<_>>(),
        &gts.iter().map(|b| b.velocity).collect::<Vec<_>>(),
        crate::temporal_fusion::DEFAULT_MAX_SPEED,
    );
    let targets = FrameTargets::from_boxes(&gts, &grid);
    let flags = ModuleFlags::ALL;
    let enh = EnhancementConfig {
        n_rep: 3,
        min_score: 0.0,
        replace_content: true,
        ..EnhancementConfig::default()
    };
    let weights = LossWeights::default();
    let (peaks, assignment) = {
        let mut g = Graph::new(&model.params);
        let out = model.forward(&mut g, &frame_input(&feats, &prev, pose, &motion, None), &flags, &enh)?;
        let cost = matching_cost(g.value(out.logits), g.value(out.boxes), &targets.classes, &targets.boxes, &weights);
        (out.peaks.clone(), hungarian_assign(&cost)?)
    };
    check_params(
        &model.params,
        &[],
        |g, _| {
            let out = model.forward(g, &frame_input(&feats, &prev, pose, &motion, Some(&peaks)), &flags, &enh)?;
            let (loss, _, _) = frame_loss(g, &grid, &out, &targets, &weights, crate::losses_matching::CENTERNESS_ALPHA, Some(&assignment))?;
            Ok(loss)
        },
        h,
    )
}
