use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::Args;
use ocbev::eval::{evaluate, DetectionBox, EvalConfig, FrameEval, DEFAULT_FAST_SPEED, DEFAULT_THRESHOLDS, DEFAULT_TP_THRESHOLD};
use ocbev::network::{Model, ParamSet};
use ocbev::training::{build_model, evaluate_model, TrainState};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::Context;
use crate::scenes::load_scenes;
use crate::train::{ModelDescription, MODEL_FILE};

pub const REPORT_FILE: &str = "report.json";

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Scenes providing ground truth (and inputs for a checkpoint).
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Run this checkpoint over the scenes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Model description for the checkpoint [default: model.json next to it].
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON `{"frames": [[box, ...], ...]}` in scene-file then frame order.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long)]
    oracle: bool,
    /// Score an empty prediction set.
    #[arg(long)]
    empty: bool,
    /// Center distance, meters, for the error metrics.
    #[arg(long)]
    tp_threshold: Option<f64>,
    /// Speed, m/s, above which an object counts as fast.
    #[arg(long)]
    fast_speed: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCmdConfig {
    pub scenes: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub oracle: bool,
    pub empty: bool,
    pub thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub fast_speed: f64,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        Self {
            scenes: None,
            checkpoint: None,
            model: None,
            predictions: None,
            oracle: false,
            empty: false,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            tp_threshold: DEFAULT_TP_THRESHOLD,
            fast_speed: DEFAULT_FAST_SPEED,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionFile {
    pub frames: Vec<Vec<DetectionBox>>,
}

/// Rebuilds a trained model from a checkpoint and its description. Full
/// training checkpoints and plain parameter files are both accepted.
pub fn load_model(checkpoint: &Path, description: Option<&Path>) -> Result<(Model, ModelDescription)> {
    let desc_path = match description {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(MODEL_FILE),
    };
    let text = std::fs::read_to_string(&desc_path).with_context(|| format!("reading model description {}", desc_path.display()))?;
    let desc: ModelDescription = serde_json::from_str(&text).with_context(|| format!("parsing {}", desc_path.display()))?;
    let mut model = build_model(&desc.spec, &desc.train.network, desc.train.seed)?;
    let packed = ParamSet::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    match TrainState::from_param_set(&model.params, &packed) {
        Ok(state) => model.params = state.params,
        Err(_) => model.params.load_from(&packed)?,
    }
    Ok((model, desc))
}

pub fn run(ctx: &Context, a: EvalArgs) -> Result<()> {
    let overrides = json!({
        "scenes": a.scenes,
        "checkpoint": a.checkpoint,
        "model": a.model,
        "predictions": a.predictions,
        "oracle": a.oracle.then_some(true),
        "empty": a.empty.then_some(true),
        "tp_threshold": a.tp_threshold,
        "fast_speed": a.fast_speed,
    });
    let cfg: EvalCmdConfig = ctx.resolve(overrides)?;
    let sources = [cfg.checkpoint.is_some(), cfg.predictions.is_some(), cfg.oracle, cfg.empty];
    if sources.iter().filter(|s| **s).count() != 1 {
        bail!(ocbev::Error::InvalidArgument(
            "eval needs exactly one of --checkpoint, --predictions, --oracle or --empty".into()
        ));
    }
    let Some(scene_path) = cfg.scenes.clone() else {
        bail!(ocbev::Error::InvalidArgument("eval needs --scenes".into()));
    };
    ctx.write_manifest(&cfg, ctx.seed.unwrap_or(0))?;

    let pool = ctx.pool()?;
    let scenes = load_scenes(&scene_path, &pool)?;
    let eval_cfg = EvalConfig {
        thresholds: cfg.thresholds.clone(),
        tp_threshold: cfg.tp_threshold,
        fast_speed: cfg.fast_speed,
        num_classes: scenes[0].spec.num_classes(),
    };
    let gts: Vec<Vec<DetectionBox>> = scenes
        .iter()
        .flat_map(|s| s.frames.iter().map(|f| f.objects.iter().map(|o| o.to_box()).collect()))
        .collect();
    let report = if let Some(ck) = &cfg.checkpoint {
        let (model, desc) = load_model(ck, cfg.model.as_deref())?;
        evaluate_model(&model, &scenes, &desc.train.flags, &desc.train, &eval_cfg)?
    } else {
        let preds: Vec<Vec<DetectionBox>> = if cfg.oracle {
            gts.clone()
        } else if cfg.empty {
            vec![Vec::new(); gts.len()]
        } else {
            let path = cfg.predictions.as_ref().expect("checked above");
            let text = std::fs::read_to_string(path).with_context(|| format!("reading predictions {}", path.display()))?;
            let file: PredictionFile =
                serde_json::from_str(&text).map_err(|e| ocbev::Error::parse(path.display().to_string(), e.to_string()))?;
            if file.frames.len() != gts.len() {
                bail!(ocbev::Error::Shape(format!(
                    "predictions cover {} frames, scenes have {}",
                    file.frames.len(),
                    gts.len()
                )));
            }
            for b in file.frames.iter().flatten() {
                b.validate()?;
            }
            file.frames
        };
        let frames: Vec<FrameEval> = preds.into_iter().zip(gts).map(|(preds, gts)| FrameEval { preds, gts }).collect();
        evaluate(&frames, &eval_cfg)
    };
    std::fs::write(ctx.path(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    print!("{}", report.table());
    Ok(())
}
