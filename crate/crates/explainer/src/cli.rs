use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{AppError, Result};
use crate::pipeline::{self, Layout};

pub const HOME_VAR: &str = "EXPLAINER_HOME";

#[derive(Debug, Parser)]
#[command(name = "explainer", version, about = "Train and evaluate explainer networks on synthetic part scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenData(CommonArgs),
    /// Train the performer on the dataset.
    TrainPerformer(CommonArgs),
    /// Train the explainer against the frozen performer.
    TrainExplainer(CommonArgs),
    /// Compute instability, p and substitution fidelity.
    Eval(CommonArgs),
    /// Write filter grids and grad-CAM panels.
    Visualize(CommonArgs),
    /// Write metrics copies and plots.
    Report(CommonArgs),
    /// All stages in sequence.
    RunAll(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set losses.eta=2.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Experiment directory; defaults to `<root>/<config-hash>-<timestamp>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::GenData(a)
            | Command::TrainPerformer(a)
            | Command::TrainExplainer(a)
            | Command::Eval(a)
            | Command::Visualize(a)
            | Command::Report(a)
            | Command::RunAll(a) => a,
        }
    }

    /// Stages that start a fresh experiment directory.
    fn creates_dir(&self) -> bool {
        matches!(self, Command::GenData(_) | Command::RunAll(_))
    }
}

fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths
        .root
        .clone()
        .or_else(|| std::env::var_os(HOME_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("experiments"))
}

/// Most recent `<hash>-<timestamp>` directory under `root`.
fn latest_experiment(root: &Path, hash: &str) -> Option<PathBuf> {
    let prefix = format!("{hash}-");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(&prefix)))
        .collect();
    dirs.sort();
    dirs.pop()
}

fn resolve(command: &Command) -> Result<(ExperimentConfig, Layout)> {
    let args = command.args();
    let cfg = match (&args.config, &args.out) {
        (Some(path), _) => ExperimentConfig::load(path, &args.overrides)?,
        (None, Some(out)) if out.join(pipeline::CONFIG_FILE).exists() => {
            ExperimentConfig::load(&out.join(pipeline::CONFIG_FILE), &args.overrides)?
        }
        _ => ExperimentConfig::from_toml_str("", &args.overrides)?,
    };
    let dir = match &args.out {
        Some(out) => out.clone(),
        None => {
            let root = output_root(&cfg);
            if command.creates_dir() {
                let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
                root.join(format!("{}-{stamp}", cfg.hash()))
            } else {
                latest_experiment(&root, &cfg.hash()).ok_or_else(|| {
                    AppError::Config(format!(
                        "no experiment directory for config {} under {}; pass --out",
                        cfg.hash(),
                        root.display()
                    ))
                })?
            }
        }
    };
    let layout = Layout::new(dir);
    if let Some(src) = &args.config {
        if command.creates_dir() {
            let dst = layout.root.join("config.source.toml");
            std::fs::create_dir_all(&layout.root).map_err(AppError::io(&layout.root))?;
            std::fs::copy(src, &dst).map_err(AppError::io(&dst))?;
        }
    }
    Ok((cfg, layout))
}

pub fn execute(command: &Command) -> Result<String> {
    let (cfg, layout) = resolve(command)?;
    let dir = layout.root.display().to_string();
    Ok(match command {
        Command::GenData(_) => {
            let m = pipeline::gen_data(&cfg, &layout)?;
            format!("dataset with {} scenes written to {dir}", m.num_scenes)
        }
        Command::TrainPerformer(_) => {
            let c = pipeline::train_performer(&cfg, &layout)?;
            format!("performer trained: {}", c.manifest.metrics)
        }
        Command::TrainExplainer(_) => {
            let c = pipeline::train_explainer(&cfg, &layout)?;
            format!("explainer trained: p = {:.4}", c.params.p())
        }
        Command::Eval(_) => {
            let m = pipeline::eval(&cfg, &layout)?;
            format!(
                "instability explainer {:.4} vs performer {:.4}; p {:.4}; agreement {:.3}",
                m.explainer_aggregate_instability, m.performer_aggregate_instability, m.p, m.substitution_agreement
            )
        }
        Command::Visualize(_) => format!("{} visualisation files written", pipeline::visualize(&cfg, &layout)?),
        Command::Report(_) => format!("{} report files written", pipeline::report(&layout)?.len()),
        Command::RunAll(_) => {
            let m = pipeline::run_all(&cfg, &layout)?;
            format!(
                "{dir}: instability explainer {:.4} vs performer {:.4}; p {:.4}",
                m.explainer_aggregate_instability, m.performer_aggregate_instability, m.p
            )
        }
    })
}

/// Parses arguments, runs the command and returns the exit status:
/// 0 success, 1 runtime failure, 2 usage error, 3 configuration error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
