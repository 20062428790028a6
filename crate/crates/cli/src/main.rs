use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use intradistill::experiment::{
    cmd_compare, cmd_schedule, cmd_sensitivity, cmd_sweep, run_experiment, ExperimentConfig,
    SensitivityOptions, MANIFEST_FILE,
};

#[derive(Parser)]
#[command(name = "intradistill", version, about = "Intra-distillation experiments on toy MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, or `bundled:<name>` for a built-in one.
    #[arg(long)]
    config: String,
    /// Override a config key, e.g. `--set alpha=0` or `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Use this value for the init, data and dropout seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let config = ExperimentConfig::load(&self.config, &self.set)?;
        Ok(match self.seed {
            Some(s) => config.with_seed(s),
            None => config,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and run the configured analyses.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run several seeds, each into `<out>/seed-<n>`.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Vec<u64>,
    },
    /// Export per-parameter sensitivity scores of a checkpoint.
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `analysis.sensitivity_batches` from the config.
        #[arg(long)]
        batches: Option<usize>,
        /// Top fraction dropped before the histogram.
        #[arg(long, default_value_t = 0.01)]
        trim: f64,
        /// Fraction of the remaining scores kept for the histogram.
        #[arg(long, default_value_t = 0.10)]
        sample: f64,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Prune a checkpoint at increasing ratios, least sensitive first.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report written by `sensitivity`.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        ratios: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate the adaptive intra-distillation strength.
    Schedule {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 101)]
        samples: usize,
        /// Write `schedule.csv` here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrast completed runs against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_out(config: &ExperimentConfig) -> PathBuf {
    config
        .output_dir
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new("runs").join(&config.name))
}

fn train(config: ExperimentConfig, out: &Path) -> Result<()> {
    run_experiment(&config, out).with_context(|| format!("run {}", out.display()))?;
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seeds } => {
            let base = config.load()?;
            let out = out.unwrap_or_else(|| default_out(&base));
            if seeds.is_empty() {
                return train(base, &out);
            }
            // Independent seeds, each in its own directory.
            let results: Vec<Result<()>> = std::thread::scope(|s| {
                let handles: Vec<_> = seeds
                    .iter()
                    .map(|&seed| {
                        let cfg = base.clone().with_seed(seed);
                        let dir = out.join(format!("seed-{seed}"));
                        s.spawn(move || train(cfg, &dir))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| bail!("training thread panicked")))
                    .collect()
            });
            results.into_iter().collect()
        }
        Command::Sensitivity {
            checkpoint,
            config,
            out,
            batches,
            trim,
            sample,
            bins,
        } => {
            let cfg = config.load()?;
            let options = SensitivityOptions {
                batches: batches.unwrap_or(cfg.analysis.sensitivity_batches),
                trim,
                sample,
                seed: cfg.analysis.sensitivity_seed,
                bins,
            };
            cmd_sensitivity(&checkpoint, &cfg, options, &out)?;
            println!("{}", out.join("sensitivity.csv").display());
            Ok(())
        }
        Command::Sweep {
            checkpoint,
            report,
            config,
            ratios,
            out,
        } => {
            let path = cmd_sweep(&checkpoint, &report, &config.load()?, &ratios, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Schedule {
            alpha,
            p,
            q,
            n,
            samples,
            out,
        } => {
            let table = cmd_schedule(alpha, p, q, n, samples)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)
                        .with_context(|| format!("create {}", dir.display()))?;
                    let path = dir.join("schedule.csv");
                    std::fs::write(&path, table)
                        .with_context(|| format!("write {}", path.display()))?;
                    println!("{}", path.display());
                }
                None => print!("{table}"),
            }
            Ok(())
        }
        Command::Compare { runs, out } => {
            let (path, _) = cmd_compare(&runs, &out)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
