use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use poisonsim::harness::{self, ExperimentConfig};
use poisonsim::{Error, Result};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "poisonsim", version, about = "Simulate training-time attacks on small models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv / summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `dotted.key=value`, value parsed as JSON when possible. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the Cartesian product of a grid of overrides, one `run_<i>` directory each.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// JSON object mapping dotted keys to lists of values.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn output_dir(cli: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    cli.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, overrides: &[String]) -> Result<()> {
    let mut doc = harness::load_document(config)?;
    harness::apply_overrides(&mut doc, overrides)?;
    if let Some(seed) = seed {
        harness::set_path(&mut doc, "seed", Value::from(seed))?;
    }
    let mut cfg = ExperimentConfig::from_value(doc)?;
    let dir = output_dir(out, &cfg)?;
    cfg.output_dir = Some(dir.clone());
    let result = harness::run_to_dir(cfg, &dir)?;
    let s = &result.summary;
    println!(
        "best val {:.4} (epoch {}), test {:.4}, final val {:.4}, alpha' {:.4}{} -> {}",
        s.best_val_acc,
        s.best_epoch,
        s.test_acc,
        s.final_val_acc,
        s.realized_alpha,
        if s.diverged { ", diverged" } else { "" },
        dir.display()
    );
    Ok(())
}

fn sweep(config: &Path, grid: &Path, out: Option<PathBuf>) -> Result<()> {
    let base = harness::load_document(config)?;
    let grid = harness::load_document(grid)?;
    let docs = harness::grid_documents(&base, &grid)?;
    let root = match out {
        Some(dir) => dir,
        None => output_dir(None, &ExperimentConfig::from_value(base.clone())?)?,
    };

    // Every point is parsed and validated before anything runs.
    let mut configs = Vec::with_capacity(docs.len());
    for (i, (assign, doc)) in docs.into_iter().enumerate() {
        let mut cfg = ExperimentConfig::from_value(doc)?;
        cfg.validate()?;
        let dir = root.join(format!("run_{i}"));
        cfg.output_dir = Some(dir.clone());
        configs.push((assign, cfg, dir));
    }
    harness::check_output_dir(&root)?;

    let mut index = Vec::new();
    for (i, (assign, cfg, dir)) in configs.into_iter().enumerate() {
        info!("sweep point {i}: {assign:?}");
        let result = harness::run_to_dir(cfg, &dir)?;
        println!(
            "run_{i}: best val {:.4} (epoch {}) {}",
            result.summary.best_val_acc,
            result.summary.best_epoch,
            assign.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
        );
        let point: serde_json::Map<String, Value> = assign.into_iter().collect();
        index.push(serde_json::json!({
            "run": format!("run_{i}"),
            "point": point,
            "best_val_acc": result.summary.best_val_acc,
        }));
    }
    let path = root.join("sweep.json");
    let text = serde_json::to_string_pretty(&index)? + "\n";
    std::fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
    Ok(())
}

fn validate(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    cfg.validate()?;
    println!(
        "ok: {} poison message(s) per batch of {} (alpha' {:.4})",
        cfg.poison_count(),
        cfg.batch_size,
        cfg.realized_alpha()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            overrides,
        } => run(&config, seed, out, &overrides),
        Command::Sweep { config, grid, out } => sweep(&config, &grid, out),
        Command::Validate { config } => validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_io() {
                3
            } else {
                1
            })
        }
    }
}
