//! `ocbev` command-line tool.

mod bench;
mod context;
mod demo;
mod evaluate;
mod gradcheck;
mod ingest;
mod pgm;
mod scenes;
mod simulate;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use context::{Context, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "ocbev", version, about = "Object-centric BEV detection toy pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Random seed folded into the command's configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out, or the manifest's on replay].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON file whose values sit between the defaults and the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for scene-parallel work (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Re-run the command recorded in a manifest with its frozen configuration.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes.
    Simulate(simulate::SimulateArgs),
    /// Train a model on scene files.
    Train(train::TrainArgs),
    /// Score predictions against scene ground truth.
    Eval(evaluate::EvalArgs),
    /// Dump BEV alignment and heatmap images for one frame pair.
    DemoAlign(demo::DemoArgs),
    /// Finite-difference gradient checks.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Time the alignment and sampling kernels.
    Bench(bench::BenchArgs),
    /// Build a zero-based pose queue from a metadata document.
    Ingest(ingest::IngestArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::DemoAlign(_) => "demo-align",
            Command::Gradcheck(_) => "gradcheck",
            Command::Bench(_) => "bench",
            Command::Ingest(_) => "ingest",
        }
    }

    /// Flag-free invocation of `name`, used when replaying.
    fn bare(name: &str) -> Result<Self> {
        Cli::try_parse_from(["ocbev", name])
            .ok()
            .and_then(|c| c.command)
            .ok_or_else(|| anyhow!("manifest names unknown command `{name}`"))
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let threads = g
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        bail!(ocbev::Error::InvalidArgument("--threads must be positive".into()));
    }
    let (command, ctx) = match &g.replay {
        Some(path) => {
            let manifest = RunManifest::read(path)?;
            let command = match cli.command {
                Some(c) if c.name() != manifest.command => {
                    bail!("manifest records `{}`, not `{}`", manifest.command, c.name())
                }
                Some(c) => c,
                None => Command::bare(&manifest.command)?,
            };
            let ctx = Context::replaying(manifest, command.name(), g.out.clone(), threads);
            (command, ctx)
        }
        None => {
            let command = cli
                .command
                .ok_or_else(|| anyhow!("no command given; expected one of simulate, train, eval, demo-align, gradcheck, bench, ingest"))?;
            let ctx = Context::new(command.name(), g.seed, g.out.clone().unwrap_or_else(|| PathBuf::from("out")), threads, g.config.clone());
            (command, ctx)
        }
    };
    match command {
        Command::Simulate(a) => simulate::run(&ctx, a),
        Command::Train(a) => train::run(&ctx, a),
        Command::Eval(a) => evaluate::run(&ctx, a),
        Command::DemoAlign(a) => demo::run(&ctx, a),
        Command::Gradcheck(a) => gradcheck::run(&ctx, a),
        Command::Bench(a) => bench::run(&ctx, a),
        Command::Ingest(a) => ingest::run(&ctx, a),
    }
}

/// Single-line machine-readable error.
fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let message = format!("{err:#}");
    let core = err.chain().find_map(|e| e.downcast_ref::<ocbev::Error>());
    let (kind, path) = match core {
        Some(ocbev::Error::Shape(_)) => ("shape", None),
        Some(ocbev::Error::IndexOutOfRange { .. }) => ("index_out_of_range", None),
        Some(ocbev::Error::InvalidArgument(_)) => ("invalid_argument", None),
        Some(ocbev::Error::Parse { path, .. }) => ("parse", Some(path.clone())),
        Some(ocbev::Error::Format(_)) => ("format", None),
        Some(ocbev::Error::NonFinite(_)) => ("non_finite", None),
        Some(ocbev::Error::Io(_)) => ("io", None),
        Some(ocbev::Error::Json(_)) => ("json", None),
        None if err.chain().any(|e| e.is::<std::io::Error>()) => ("io", None),
        None if err.chain().any(|e| e.is::<serde_json::Error>()) => ("json", None),
        None => match err.downcast_ref::<gradcheck::GradcheckFailure>() {
            Some(_) => ("gradcheck_failed", None),
            None => ("error", None),
        },
    };
    let mut body = json!({ "kind": kind, "message": message });
    if let Some(p) = path {
        body["path"] = json!(p);
    }
    json!({ "error": body })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": first } }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
