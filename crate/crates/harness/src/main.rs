use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use crc_harness::{pipeline, ExperimentPlan};

#[derive(Parser)]
#[command(
    name = "crc-harness",
    version,
    about = "Label-free model selection experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: PlanFlags,
}

#[derive(Subcommand)]
enum Command {
    /// Derive D0-D4 from the original IDX files.
    Generate,
    /// Train one model per generated dataset.
    Train,
    /// Score every model on every dataset (CRC, ER, CE).
    Select,
    /// Write CSV, aligned tables and the summary.
    Report,
    /// generate, train, select, report.
    All,
}

#[derive(Args)]
struct PlanFlags {
    /// Plain-text key = value plan; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// MNIST, FashionMNIST or both.
    #[arg(long, global = true)]
    family: Option<String>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Base seed; per-model, per-operation and subsample seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated, e.g. 10000,160.
    #[arg(long, global = true)]
    eval_sizes: Option<String>,
    /// Concurrent training jobs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Subsample draws per eval size smaller than the test set.
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Any plan key, e.g. --set train_samples=10000. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

impl PlanFlags {
    fn plan(&self) -> Result<ExperimentPlan> {
        let mut plan = ExperimentPlan::default();
        if let Some(path) = &self.config {
            plan.apply_config_file(path)?;
        }
        let named = [
            ("family", self.family.clone()),
            ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
            ("seed", self.seed.map(|s| s.to_string())),
            ("eval_sizes", self.eval_sizes.clone()),
            ("workers", self.workers.map(|w| w.to_string())),
            ("repeats", self.repeats.map(|r| r.to_string())),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                plan.set(key, &v)
                    .with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
            plan.set(k, v).with_context(|| format!("--set {kv}"))?;
        }
        plan.validate()?;
        Ok(plan)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let plan = cli.flags.plan()?;
    match cli.command {
        Command::Generate => pipeline::run_generate(&plan)?,
        Command::Train => {
            pipeline::run_train(&plan)?;
        }
        Command::Select => {
            pipeline::run_select(&plan)?;
        }
        Command::Report | Command::All => {
            let files = if matches!(cli.command, Command::All) {
                pipeline::run_all(&plan)?
            } else {
                pipeline::run_report(&plan)?
            };
            print!("{}", std::fs::read_to_string(&files.summary)?);
        }
    }
    Ok(())
}
