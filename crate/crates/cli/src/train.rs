use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::Args;
use ocbev::network::ParamSet;
use ocbev::simulator::SceneSpec;
use ocbev::training::{build_model, train_from, IterationRecord, TrainConfig, TrainHooks, TrainState};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::context::Context;
use crate::scenes::{load_optional, load_scenes};

pub const CHECKPOINT_FILE: &str = "checkpoint.ocbw";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const DUMP_FILE: &str = "nonfinite_dump.json";

const FLAG_KEYS: [&str; 5] = ["ego_fusion", "object_fusion", "local_sampling", "adaptive_offset", "query_enhancement"];

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of scene files (or one scene file) to train on.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Held-out scenes evaluated every `--eval-every` iterations.
    #[arg(long)]
    eval_scenes: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Module switches, e.g. `ego_fusion=off,query_enhancement=on` or `all=off`.
    #[arg(long)]
    ablate: Option<String>,
    /// Continue from a checkpoint written by this command.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many updates in total without shortening the schedule.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long, value_parser = ["oracle", "predicted"])]
    velocity_source: Option<String>,
    /// mAP whose first crossing is reported.
    #[arg(long)]
    target_map: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCmdConfig {
    pub scenes: Option<PathBuf>,
    pub eval_scenes: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<usize>,
    pub train: TrainConfig,
}

/// Sidecar describing how to rebuild the model a checkpoint belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDescription {
    pub train: TrainConfig,
    pub spec: SceneSpec,
}

/// Parses `key=on|off` pairs; `all` addresses every switch and later
/// entries win.
pub fn parse_ablate(spec: &str) -> Result<Map<String, Value>> {
    let mut flags = Map::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let Some((key, val)) = item.split_once('=') else {
            bail!(ocbev::Error::InvalidArgument(format!("ablation entry `{item}` is not key=on|off")));
        };
        let on = match val.trim() {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            other => bail!(ocbev::Error::InvalidArgument(format!("ablation value `{other}` is not on or off"))),
        };
        match key.trim() {
            "all" => {
                for k in FLAG_KEYS {
                    flags.insert(k.into(), json!(on));
                }
            }
            k if FLAG_KEYS.contains(&k) => {
                flags.insert(k.into(), json!(on));
            }
            k => bail!(ocbev::Error::InvalidArgument(format!(
                "unknown module `{k}`; expected all or one of {}",
                FLAG_KEYS.join(", ")
            ))),
        }
    }
    Ok(flags)
}

pub fn run(ctx: &Context, a: TrainArgs) -> Result<()> {
    let flags = a.ablate.as_deref().map(parse_ablate).transpose()?;
    let overrides = json!({
        "scenes": a.scenes,
        "eval_scenes": a.eval_scenes,
        "resume": a.resume,
        "stop_after": a.stop_after,
        "train": {
            "seed": ctx.seed,
            "iterations": a.iters,
            "lr": a.lr,
            "warmup_iters": a.warmup,
            "eval_every": a.eval_every,
            "flags": flags,
            "velocity_source": a.velocity_source,
            "target_map": a.target_map,
        },
    });
    let cfg: TrainCmdConfig = ctx.resolve(overrides)?;
    cfg.train.validate()?;
    let Some(scene_dir) = cfg.scenes.clone() else {
        bail!(ocbev::Error::InvalidArgument("train needs --scenes".into()));
    };
    ctx.write_manifest(&cfg, cfg.train.seed)?;

    let pool = ctx.pool()?;
    let train_scenes = load_scenes(&scene_dir, &pool)?;
    let eval_scenes = load_optional(cfg.eval_scenes.as_deref(), &pool)?;
    let spec = train_scenes[0].spec.clone();
    let mut model = build_model(&spec, &cfg.train.network, cfg.train.seed)?;
    let mut state = match &cfg.resume {
        Some(path) => {
            let packed = ParamSet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            TrainState::from_param_set(&model.params, &packed)?
        }
        None => TrainState::new(model.params.clone()),
    };
    let start = state.optimizer.step as usize;
    if start >= cfg.train.iterations {
        log::warn!("checkpoint is at update {start}; nothing left of {} iterations", cfg.train.iterations);
    }
    let description = ModelDescription {
        train: cfg.train.clone(),
        spec,
    };
    std::fs::write(ctx.path(MODEL_FILE), serde_json::to_string_pretty(&description)? + "\n")?;

    let mut lines: Vec<String> = Vec::new();
    let dump_path = ctx.path(DUMP_FILE);
    let result = {
        let mut hooks = TrainHooks {
            on_iteration: Some(Box::new(|r: &IterationRecord| {
                if r.iteration % 100 == 0 {
                    log::info!("iteration {} loss {:.5}", r.iteration, r.loss.total);
                }
                lines.push(serde_json::to_string(r).expect("records serialize"));
            })),
            on_non_finite: Some(Box::new(|dump: &Value| {
                let text = serde_json::to_string_pretty(dump).expect("dump serializes");
                if let Err(e) = std::fs::write(&dump_path, text + "\n") {
                    log::error!("could not write {}: {e}", dump_path.display());
                }
            })),
            stop_after: cfg.stop_after,
        };
        train_from(&mut model, &mut state, &train_scenes, &eval_scenes, &cfg.train, &mut hooks)
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(ctx.path(LOG_FILE))?);
    for l in &lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    let log = result?;
    state.to_param_set().save(&ctx.path(CHECKPOINT_FILE))?;

    let last = log.records.last();
    println!(
        "trained updates {}..{} ({}), final loss {}",
        start,
        state.optimizer.step,
        cfg.train.flags.label(),
        last.map_or("-".into(), |r| format!("{:.6}", r.loss.total))
    );
    if let Some(rep) = log.final_report() {
        println!("held-out mAP {:.4}", rep.map);
    }
    if let (Some(t), Some(i)) = (log.target_map, log.iterations_to_target) {
        println!("reached mAP {t} at iteration {i}");
    }
    Ok(())
}
