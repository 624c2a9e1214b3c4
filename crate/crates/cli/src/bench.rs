use std::hint::black_box;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::Args;
use ocbev::autodiff::{Tape, Tensor};
use ocbev::geometry::{BevGrid, PlanarPose};
use ocbev::network::{declare_deform, deformable_attention, temporal_layout, DeformSpec, Graph, Init, ParamSet};
use ocbev::temporal_fusion::{ego_overlap_mapping, fuse_ego, BevFeature};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::Context;

pub const REPORT_FILE: &str = "bench.json";
pub const KERNELS: [&str; 4] = ["ego_overlap_mapping", "fuse_ego", "bilinear_sample", "deformable_attention"];

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Grid side lengths; repeatable.
    #[arg(long = "size")]
    sizes: Vec<usize>,
    /// Timed repetitions; the median is reported.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Feature channels.
    #[arg(long)]
    channels: Option<usize>,
    /// Kernel to time; repeatable. Default: all.
    #[arg(long = "kernel")]
    kernels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub channels: usize,
    pub kernels: Vec<String>,
    pub heads: usize,
    pub points: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: vec![64, 128, 300],
            reps: 5,
            warmup: 1,
            channels: 32,
            kernels: KERNELS.iter().map(|s| s.to_string()).collect(),
            heads: 4,
            points: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub kernel: String,
    pub size: usize,
    pub cells: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

fn time(reps: usize, warmup: usize, mut f: impl FnMut()) -> (f64, f64, f64) {
    for _ in 0..warmup {
        f();
    }
    let mut ms: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    ms.sort_by(f64::total_cmp);
    let mid = ms.len() / 2;
    let median = if ms.len() % 2 == 1 { ms[mid] } else { 0.5 * (ms[mid - 1] + ms[mid]) };
    (median, ms[0], ms[ms.len() - 1])
}

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_kernel(kernel: &str, n: usize, cfg: &BenchConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64, f64)> {
    let grid = BevGrid::square(n, 0.5 * n as f64)?;
    let pose = PlanarPose::new(0.1, -1.3, 0.4);
    let c = cfg.channels;
    let cells = grid.len();
    Ok(match kernel {
        "ego_overlap_mapping" => time(cfg.reps, cfg.warmup, || {
            black_box(ego_overlap_mapping(&grid, &grid, &pose).expect("same grid"));
        }),
        "fuse_ego" => {
            let prev = BevFeature::from_values(grid, c, 0.0, random_values(rng, c * cells))?;
            let cur = BevFeature::from_values(grid, c, 0.5, random_values(rng, c * cells))?;
            time(cfg.reps, cfg.warmup, || {
                black_box(fuse_ego(&prev, &cur, &pose).expect("compatible"));
            })
        }
        // One batched call: a channel-last map sampled at one random
        // normalized location per cell.
        "bilinear_sample" => {
            let map = Tensor::matrix(cells, c, random_values(rng, cells * c));
            let locs = Tensor::matrix(cells, 2, (0..2 * cells).map(|_| rng.gen_range(-0.05..1.05)).collect());
            time(cfg.reps, cfg.warmup, || {
                let mut tape = Tape::new();
                let m = tape.constant(map.clone());
                let l = tape.constant(locs.clone());
                black_box(tape.bilinear(m, l, (n, n)));
            })
        }
        "deformable_attention" => {
            let spec = DeformSpec {
                query_dim: c,
                value_dim: c,
                embed_dim: c,
                heads: cfg.heads,
                // Temporal layout: one group per value map.
                groups: 2,
                points: cfg.points,
            };
            let mut ps = ParamSet::new();
            declare_deform(&mut ps, &mut Init { rng }, "bench", &spec);
            let q = Tensor::matrix(cells, c, random_values(rng, cells * c));
            let prev = Tensor::matrix(cells, c, random_values(rng, cells * c));
            let (refs, layout) = temporal_layout(&grid, cfg.heads, cfg.points);
            time(cfg.reps, cfg.warmup, || {
                let mut g = Graph::new(&ps);
                let qv = g.tape.constant(q.clone());
                let pv = g.tape.constant(prev.clone());
                let rv = g.tape.constant(refs.clone());
                black_box(deformable_attention(&mut g, "bench", &spec, qv, &[qv, pv], rv, layout.clone()).expect("consistent shapes"));
            })
        }
        other => bail!(ocbev::Error::InvalidArgument(format!("unknown kernel `{other}`; known: {}", KERNELS.join(", ")))),
    })
}

pub fn run(ctx: &Context, a: BenchArgs) -> Result<()> {
    let overrides = json!({
        "seed": ctx.seed,
        "sizes": if a.sizes.is_empty() { None } else { Some(&a.sizes) },
        "reps": a.reps,
        "warmup": a.warmup,
        "channels": a.channels,
        "kernels": if a.kernels.is_empty() { None } else { Some(&a.kernels) },
    });
    let cfg: BenchConfig = ctx.resolve(overrides)?;
    if cfg.reps == 0 || cfg.channels == 0 || cfg.sizes.iter().any(|&s| s == 0) {
        bail!(ocbev::Error::InvalidArgument("reps, channels and sizes must be positive".into()));
    }
    if let Some(bad) = cfg.kernels.iter().find(|k| !KERNELS.contains(&k.as_str())) {
        bail!(ocbev::Error::InvalidArgument(format!("unknown kernel `{bad}`; known: {}", KERNELS.join(", "))));
    }
    ctx.write_manifest(&cfg, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    println!("{:<22} {:>6} {:>8} {:>12} {:>12} {:>12}", "kernel", "size", "cells", "median ms", "min ms", "max ms");
    for kernel in &cfg.kernels {
        for &n in &cfg.sizes {
            let (median_ms, min_ms, max_ms) = bench_kernel(kernel, n, &cfg, &mut rng)?;
            println!("{:<22} {:>6} {:>8} {:>12.3} {:>12.3} {:>12.3}", kernel, n, n * n, median_ms, min_ms, max_ms);
            rows.push(Timing {
                kernel: kernel.clone(),
                size: n,
                cells: n * n,
                median_ms,
                min_ms,
                max_ms,
            });
        }
    }
    std::fs::write(
        ctx.path(REPORT_FILE),
        serde_json::to_string_pretty(&json!({ "reps": cfg.reps, "warmup": cfg.warmup, "channels": cfg.channels, "timings": rows }))? + "\n",
    )?;
    Ok(())
}
