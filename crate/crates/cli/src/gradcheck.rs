use anyhow::{bail, Result};
use clap::Args;
use ocbev::gradcheck::{run_op, DEFAULT_STEP, OPS, TOLERANCE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::Context;

pub const REPORT_FILE: &str = "gradcheck.json";

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Operation to check; repeatable. Default: every operation.
    #[arg(long = "op")]
    ops: Vec<String>,
    /// Random instances per operation; trial `t` uses seed `seed + t`.
    #[arg(long)]
    trials: Option<usize>,
    /// Finite-difference step.
    #[arg(long)]
    step: Option<f64>,
    /// Largest accepted relative error.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub ops: Vec<String>,
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ops: OPS.iter().map(|s| s.to_string()).collect(),
            trials: 20,
            step: DEFAULT_STEP,
            tolerance: TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpSummary {
    pub op: String,
    pub trials: usize,
    pub max_relative_error: f64,
    /// Parameter or input with the largest error, and the trial seed.
    pub worst_tensor: String,
    pub worst_seed: u64,
    pub undefined_entries: usize,
    pub passed: bool,
}

/// Marks the error as a failed check rather than a malfunction.
#[derive(Debug)]
pub struct GradcheckFailure(pub String);

impl std::fmt::Display for GradcheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GradcheckFailure {}

pub fn run(ctx: &Context, a: GradcheckArgs) -> Result<()> {
    let overrides = json!({
        "seed": ctx.seed,
        "ops": if a.ops.is_empty() { None } else { Some(&a.ops) },
        "trials": a.trials,
        "step": a.step,
        "tolerance": a.tolerance,
    });
    let cfg: GradcheckConfig = ctx.resolve(overrides)?;
    if let Some(bad) = cfg.ops.iter().find(|o| !OPS.contains(&o.as_str())) {
        bail!(ocbev::Error::InvalidArgument(format!("unknown operation `{bad}`; known: {}", OPS.join(", "))));
    }
    if cfg.trials == 0 || !(cfg.step > 0.0) {
        bail!(ocbev::Error::InvalidArgument("trials and step must be positive".into()));
    }
    ctx.write_manifest(&cfg, cfg.seed)?;

    let jobs: Vec<(usize, u64)> = (0..cfg.ops.len())
        .flat_map(|o| (0..cfg.trials as u64).map(move |t| (o, t)))
        .collect();
    let pool = ctx.pool()?;
    let reports = pool.install(|| {
        jobs.par_iter()
            .map(|&(o, t)| run_op(&cfg.ops[o], cfg.seed + t, cfg.step).map(|r| (o, cfg.seed + t, r)))
            .collect::<ocbev::Result<Vec<_>>>()
    })?;

    let mut summaries = Vec::new();
    for (o, op) in cfg.ops.iter().enumerate() {
        let mine: Vec<_> = reports.iter().filter(|r| r.0 == o).collect();
        let (_, worst_seed, worst) = mine
            .iter()
            .max_by(|a, b| a.2.max_error().total_cmp(&b.2.max_error()))
            .expect("at least one trial");
        let max = worst.max_error();
        summaries.push(OpSummary {
            op: op.clone(),
            trials: mine.len(),
            max_relative_error: max,
            worst_tensor: worst.worst().map_or_else(String::new, |t| t.name.clone()),
            worst_seed: *worst_seed,
            undefined_entries: mine.iter().map(|r| r.2.undefined()).sum(),
            passed: max <= cfg.tolerance,
        });
    }
    std::fs::write(
        ctx.path(REPORT_FILE),
        serde_json::to_string_pretty(&json!({ "tolerance": cfg.tolerance, "step": cfg.step, "ops": summaries }))? + "\n",
    )?;
    println!(
        "{:<22} {:>6} {:>12} {:>9} {:>6}  worst tensor",
        "operation", "trials", "max rel err", "undefined", "status"
    );
    for s in &summaries {
        println!(
            "{:<22} {:>6} {:>12.3e} {:>9} {:>6}  {} (seed {})",
            s.op,
            s.trials,
            s.max_relative_error,
            s.undefined_entries,
            if s.passed { "PASS" } else { "FAIL" },
            s.worst_tensor,
            s.worst_seed
        );
    }
    let failed: Vec<String> = summaries
        .iter()
        .filter(|s| !s.passed)
        .map(|s| format!("{}: max relative error {:.3e} at `{}` (seed {})", s.op, s.max_relative_error, s.worst_tensor, s.worst_seed))
        .collect();
    if !failed.is_empty() {
        return Err(GradcheckFailure(format!("tolerance {:.1e} exceeded; {}", cfg.tolerance, failed.join("; "))).into());
    }
    Ok(())
}
