//! Command-line entry point. Subcommands: `train`, `eval`, `sweep`,
//! `emit-plot-data`, `verify`. Configuration resolves in order: defaults,
//! then `--preset`, then `--config` file, then repeated `--set key=value`
//! flags, then the dedicated `--seed` / `--out-dir` flags.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use atu_cli::config::{preset, DomainPreset, ExperimentConfig};
use atu_cli::{plotdata, runner, verify};

#[derive(Parser)]
#[command(
    name = "atu",
    about = "Meta-learning with adversarial task up-sampling: train, evaluate, sweep"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Named preset (e.g. table2-atu-10shot, table8-ratio0.2,
    /// table4-synth-atu).
    #[arg(long)]
    preset: Option<String>,
    /// key=value config file applied over the preset/defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out_dir: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self, seed: u64) -> Result<ExperimentConfig> {
        let mut cfg = match &self.preset {
            Some(name) => preset(name)?,
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.config {
            cfg = ExperimentConfig::from_file(path, cfg)?;
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .with_context(|| format!("--set '{pair}' is not key=value"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.seed = seed;
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration end to end (resumes from a checkpoint when
    /// the output directory already holds one for the same config+seed).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seed for all random streams (required; reruns reproduce
        /// bit-exactly).
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate a checkpointed learner on a domain without training.
    Eval {
        /// Path to a trainer checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation domain preset.
        #[arg(long, default_value = "training")]
        domain: String,
        #[arg(long, default_value_t = 100)]
        eval_tasks: usize,
        #[arg(long, default_value_t = 100)]
        eval_query: usize,
        /// Seed for the evaluation task stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional results file to write the row to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training per value of a config field, same seed throughout.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Config key to vary (e.g. augment-ratio, k-support).
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long)]
        values: String,
    },
    /// Convert run artifacts into plain x,y text files.
    EmitPlotData {
        /// generated-tasks | adaptation-curve | loss-curve.
        #[arg(long)]
        kind: String,
        /// Run directory (generated-tasks, loss-curve) or checkpoint file
        /// (adaptation-curve).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the sampled task (adaptation-curve).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Query-grid size (adaptation-curve).
        #[arg(long, default_value_t = 200)]
        grid: usize,
    },
    /// Run the built-in oracle and property checks.
    Verify,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, seed } => {
            let cfg = config.resolve(seed)?;
            let rows = runner::run(&cfg)?;
            for row in rows {
                println!("{}", row.to_csv_line());
            }
        }
        Cmd::Eval {
            checkpoint,
            domain,
            eval_tasks,
            eval_query,
            seed,
            out,
        } => {
            let domain: DomainPreset = domain.parse()?;
            let row = runner::eval_checkpoint(&checkpoint, domain, eval_tasks, eval_query, seed)?;
            if let Some(path) = out {
                atu_cli::results::write_results(&path, std::slice::from_ref(&row))?;
            }
            println!("{}", row.to_csv_line());
        }
        Cmd::Sweep {
            config,
            seed,
            axis,
            values,
        } => {
            let cfg = config.resolve(seed)?;
            let values: Vec<String> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(String::from)
                .collect();
            let rows = runner::sweep(&cfg, &axis, &values)?;
            for row in rows {
                println!("{}", row.to_csv_line());
            }
        }
        Cmd::EmitPlotData {
            kind,
            run,
            out,
            seed,
            grid,
        } => match kind.as_str() {
            "generated-tasks" => plotdata::generated_tasks(&run, &out)?,
            "adaptation-curve" => plotdata::adaptation_curve(&run, &out, seed, grid)?,
            "loss-curve" => plotdata::loss_curve(&run, &out)?,
            other => bail!("unknown plot kind '{other}'"),
        },
        Cmd::Verify => verify::run_all()?,
    }
    Ok(())
}
