//! `deepssm`: the end-to-end pipeline from synthetic volumes to shape predictions and severity scores.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub mod commands;
pub mod config;
pub mod dataset;

use config::Config;

/// Marks errors that should exit with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "deepssm", version, about = "Image-to-shape correspondence pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to every random stage (overrides the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic population with ground-truth correspondences.
    Synth,
    /// Grow a dataset with shape-model sampling and image warping.
    Augment {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a network on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict correspondences for a volume file or every volume of a dataset.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare predicted and ground-truth correspondences.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Score shapes against a control population.
    Severity {
        #[arg(long)]
        controls: PathBuf,
        /// Dataset directory, particle file, or volume file (with --model).
        #[arg(long)]
        query: PathBuf,
        /// Predict query shapes from their volumes with this model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Group differences, latent interpolation and descriptor classification.
    Analyze {
        #[command(subcommand)]
        analysis: Analysis,
    },
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Mean displacement between two groups.
    Difference(Groups),
    /// Decode a straight line between the two group means in latent space.
    Swim {
        #[command(flatten)]
        groups: Groups,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train a classifier on trimmed descriptors and score a test set.
    Classify {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Groups {
    #[arg(long)]
    pub group_a: PathBuf,
    #[arg(long)]
    pub group_b: PathBuf,
}

/// Written to `run.json` next to every stage's outputs; the only file holding timings.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub summary: serde_json::Value,
    pub seconds: f64,
}

/// Result of one stage before it is recorded.
pub struct StageOutput {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config: serde_json::Value,
    pub summary: serde_json::Value,
}

fn execute(cli: &Cli, config: Config) -> anyhow::Result<()> {
    let start = Instant::now();
    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let (stage, result) = match &cli.command {
        Command::Synth => ("synth", commands::synth(&config.synth, out)?),
        Command::Augment { input } => ("augment", commands::augment(&config.augment, input, out)?),
        Command::Train { data, resume } => ("train", commands::train(&config.train, data, resume.as_deref(), out)?),
        Command::Infer { model, input } => ("infer", commands::infer(&config.infer, model, input, out)?),
        Command::Evaluate { pred, truth } => ("evaluate", commands::evaluate(pred, truth, out)?),
        Command::Severity { controls, query, model } => {
            ("severity", commands::severity(&config.severity, controls, query, model.as_deref(), out)?)
        }
        Command::Analyze { analysis } => match analysis {
            Analysis::Difference(g) => ("analyze-difference", commands::difference(&g.group_a, &g.group_b, out)?),
            Analysis::Swim { groups, model } => {
                ("analyze-swim", commands::swim(&config.analyze, model, &groups.group_a, &groups.group_b, out)?)
            }
            Analysis::Classify { train, test } => ("analyze-classify", commands::classify(&config.analyze, train, test, out)?),
        },
    };
    let manifest = RunManifest {
        stage: stage.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cli.seed,
        config: result.config,
        inputs: result.inputs,
        outputs: result.outputs,
        summary: result.summary,
        seconds: start.elapsed().as_secs_f64(),
    };
    let path = out.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Parses arguments, runs one stage and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not configure {n} threads: {e}");
        }
    }
    let result = Config::load(cli.config.as_deref()).and_then(|c| execute(&cli, c.with_seed(cli.seed)));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

pub(crate) fn relative_to(base: &Path, paths: Vec<PathBuf>) -> Vec<PathBuf> {
    paths.into_iter().map(|p| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or(p)).collect()
}
