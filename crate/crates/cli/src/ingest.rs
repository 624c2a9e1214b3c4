use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::Args;
use ocbev::ingest::{build_sequence_queue, parse_metadata, sorted_poses, ZeroBasing, DEFAULT_QUEUE_LEN};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::Context;

pub const QUEUE_FILE: &str = "queue.json";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Metadata JSON document with `ego_pose` and calibration tables.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    queue_len: Option<usize>,
    #[arg(long, value_parser = ["rotate", "translate_only"])]
    zero_basing: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub input: Option<PathBuf>,
    pub queue_len: usize,
    pub zero_basing: ZeroBasing,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            input: None,
            queue_len: DEFAULT_QUEUE_LEN,
            zero_basing: ZeroBasing::default(),
        }
    }
}

pub fn run(ctx: &Context, a: IngestArgs) -> Result<()> {
    let overrides = json!({
        "input": a.input,
        "queue_len": a.queue_len,
        "zero_basing": a.zero_basing,
    });
    let cfg: IngestConfig = ctx.resolve(overrides)?;
    let Some(input) = cfg.input.clone() else {
        bail!(ocbev::Error::InvalidArgument("ingest needs --input".into()));
    };
    ctx.write_manifest(&cfg, ctx.seed.unwrap_or(0))?;

    let doc = std::fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
    let meta = parse_metadata(&doc)?;
    let records = sorted_poses(&meta);
    let queue = build_sequence_queue(&meta, &records, cfg.queue_len, cfg.zero_basing)?;
    let mut warnings = meta.warnings.clone();
    warnings.extend(queue.warnings.iter().cloned());
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut out = queue.to_scene_json();
    out["warnings"] = json!(warnings);
    std::fs::write(ctx.path(QUEUE_FILE), serde_json::to_string_pretty(&out)? + "\n")?;
    std::fs::write(ctx.path(METADATA_FILE), meta.to_json()? + "\n")?;
    println!(
        "queue of {} samples from {} pose records ({} warnings)",
        queue.samples.len(),
        meta.ego_pose.len(),
        warnings.len()
    );
    Ok(())
}
