use anyhow::{Context as _, Result};
use clap::Args;
use ocbev::simulator::{generate_scene, save_scene, SceneSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::Context;

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Number of scenes; scene `i` uses seed `seed + i`.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Seconds between frames.
    #[arg(long)]
    dt: Option<f64>,
    /// BEV cells per side.
    #[arg(long)]
    grid_cells: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    /// Standard deviation of the feature noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub scenes: usize,
    pub scene: SceneSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scenes: 1,
            scene: SceneSpec::default(),
        }
    }
}

pub fn run(ctx: &Context, a: SimulateArgs) -> Result<()> {
    let overrides = json!({
        "scenes": a.scenes,
        "scene": {
            "seed": ctx.seed,
            "frames": a.frames,
            "dt": a.dt,
            "grid_cells": a.grid_cells,
            "noise_sigma": a.noise,
            "rig": { "cameras": a.cameras },
        },
    });
    let cfg: SimulateConfig = ctx.resolve(overrides)?;
    cfg.scene.validate()?;
    ctx.write_manifest(&cfg, cfg.scene.seed)?;

    let pool = ctx.pool()?;
    let paths = pool.install(|| {
        (0..cfg.scenes)
            .into_par_iter()
            .map(|i| {
                let spec = SceneSpec {
                    seed: cfg.scene.seed + i as u64,
                    ..cfg.scene.clone()
                };
                let scene = generate_scene(&spec)?;
                save_scene(&scene, &ctx.out, &format!("scene_{i:04}")).with_context(|| format!("writing scene {i} to {}", ctx.out.display()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}
