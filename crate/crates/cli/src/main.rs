//! `rose`: train, evaluate, map loss landscapes and run feature probes.
//!
//! Results go to stdout. Failures go to stderr as one JSON object, with exit
//! code 2 for configuration errors and 3 for data errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use rose_core::checkpoint::Checkpoint;
use rose_core::config::RunConfig;
use rose_core::exec::Schedule;
use rose_core::experiment::{run_probes, write_probe_csv, ProbeProtocol, ProbeStrategy};
use rose_core::landscape::{
    evaluate, flatness_summary, interp_1d, save_csv, surface_2d, write_1d_csv, write_2d_csv,
};
use rose_core::probe::{perturb, Perturbation, SurfaceKind};
use rose_core::{Result, RoseError};

#[derive(Parser)]
#[command(name = "rose", version, about = "Robust selective fine-tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config; writes checkpoint, step log and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `gaussian:<sigma>` or `surface_flip`
        #[arg(long)]
        perturb: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a 1-D interpolation or 2-D surface CSV.
    Landscape {
        #[arg(long, value_enum)]
        mode: LandscapeMode,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ckpt_b: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        /// Defaults to `landscape_1d.csv` or `landscape_2d.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per seed on an ambiguous probe task and score it.
    Probe {
        #[arg(long)]
        strategy: String,
        #[arg(long, value_enum, default_value_t = Task::Indicator)]
        task: Task,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Writes the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LandscapeMode {
    #[value(name = "1d")]
    OneD,
    #[value(name = "2d")]
    TwoD,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Indicator,
    Magnitude,
}

fn kind(err: &RoseError) -> (&'static str, u8) {
    match err {
        RoseError::Config(_) => ("config", 2),
        RoseError::Data(_)
        | RoseError::Shape { .. }
        | RoseError::NonFinite(_)
        | RoseError::Corrupt { .. } => ("data", 3),
        RoseError::Io(_) | RoseError::Json(_) => ("io", 1),
    }
}

fn report(err: &RoseError) -> ExitCode {
    let (kind, code) = kind(err);
    let mut body = json!({ "kind": kind, "message": err.to_string() });
    if let RoseError::Corrupt { offset, .. } = err {
        body["offset"] = json!(offset);
    }
    eprintln!("{}", json!({ "error": body }));
    ExitCode::from(code)
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value")
    );
}

fn train(config_path: &Path, out: &Path) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    config.resolve_paths(config_path.parent().unwrap_or_else(|| Path::new(".")));
    info!(
        "training mode {:?} for {} epochs",
        config.mode, config.epochs
    );
    let summary = rose_core::train::run(&config, None, out)?;
    info!("wrote {}", out.display());
    print_json(&serde_json::to_value(summary)?);
    Ok(())
}

fn eval(checkpoint: &Path, perturbation: Option<&str>, seed: u64) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (_, eval_set) = ckpt.config.data.load(None)?;
    let spec = &ckpt.config.model;
    let (loss, accuracy) = evaluate(spec, &ckpt.params, &eval_set)?;
    let mut out = json!({ "accuracy": accuracy, "loss": loss });
    if let Some(p) = perturbation {
        let kind: Perturbation = p.parse()?;
        let perturbed = perturb(&eval_set, kind, seed)?;
        let (_, acc) = evaluate(spec, &ckpt.params, &perturbed)?;
        out["perturbed_accuracy"] = json!(acc);
    }
    print_json(&out);
    Ok(())
}

fn landscape(
    mode: LandscapeMode,
    a: &Path,
    b: Option<&Path>,
    seed: u64,
    split: Split,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = Checkpoint::load(a)?;
    let (train_set, eval_set) = ckpt.config.data.load(None)?;
    let data = match split {
        Split::Train => train_set,
        Split::Eval => eval_set,
    };
    let spec = &ckpt.config.model;
    match mode {
        LandscapeMode::OneD => {
            let b = b.ok_or_else(|| RoseError::Config("1d mode needs --ckpt-b".into()))?;
            let other = Checkpoint::load(b)?;
            let grid = interp_1d(spec, &ckpt.params, &other.params, &data)?;
            let path = out.unwrap_or_else(|| PathBuf::from("landscape_1d.csv"));
            save_csv(&path, |buf| write_1d_csv(&grid, buf))?;
            let (la, _) = evaluate(spec, &ckpt.params, &data)?;
            let (lb, _) = evaluate(spec, &other.params, &data)?;
            print_json(&json!({
                "csv": path,
                "loss_a": la,
                "loss_b": lb,
                "max_loss": grid.losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }));
        }
        LandscapeMode::TwoD => {
            if b.is_some() {
                return Err(RoseError::Config(
                    "2d mode takes a single checkpoint".into(),
                ));
            }
            let (grid, _) = surface_2d(spec, &ckpt.params, &data, seed)?;
            let path = out.unwrap_or_else(|| PathBuf::from("landscape_2d.csv"));
            save_csv(&path, |buf| write_2d_csv(&grid, buf))?;
            let mut summary = serde_json::to_value(flatness_summary(&grid)?)?;
            summary["csv"] = json!(path);
            print_json(&summary);
        }
    }
    Ok(())
}

fn probe(strategy: &str, task: Task, seeds: &[u64], out: Option<&Path>) -> Result<()> {
    let strategy: ProbeStrategy = strategy.parse()?;
    if seeds.is_empty() {
        return Err(RoseError::Config(
            "--seeds must list at least one seed".into(),
        ));
    }
    let kind = match task {
        Task::Indicator => SurfaceKind::Indicator,
        Task::Magnitude => SurfaceKind::Magnitude,
    };
    let protocol = ProbeProtocol::default_for(kind);
    info!("probing {strategy} on {} seeds", seeds.len());
    let runs = run_probes(&protocol, strategy, seeds, Schedule::default())?;
    let rows: Vec<_> = runs.into_iter().map(|r| r.row).collect();
    let mut buf = Vec::new();
    write_probe_csv(&rows, &mut buf)?;
    match out {
        Some(path) => std::fs::write(path, buf)?,
        None => print!("{}", String::from_utf8(buf).expect("ascii csv")),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROSE_LOG_LEVEL", "error"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            return report(&RoseError::Config(msg.trim().to_string()));
        }
    };
    let result = match cli.command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval {
            checkpoint,
            perturb,
            seed,
        } => eval(&checkpoint, perturb.as_deref(), seed),
        Command::Landscape {
            mode,
            ckpt,
            ckpt_b,
            seed,
            split,
            out,
        } => landscape(mode, &ckpt, ckpt_b.as_deref(), seed, split, out),
        Command::Probe {
            strategy,
            task,
            seeds,
            out,
        } => probe(&strategy, task, &seeds, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
