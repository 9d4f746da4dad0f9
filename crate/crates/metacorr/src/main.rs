use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metacorr::harness::{self, ExperimentConfig, HarnessError};
use metacorr::train::Method;

/// Synthetic-segmentation lab for self-training domain adaptation with
/// meta-learned label-noise correction.
#[derive(Parser)]
#[command(name = "metacorr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML config file; every key has a default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set steps=500 --set method="source_only".
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for --set method="M".
    #[arg(long)]
    method: Option<String>,
    /// Shorthand for --set out_dir="DIR".
    #[arg(long)]
    out: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(method) = &self.method {
            overrides.push(format!("method=\"{method}\""));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out_dir=\"{out}\""));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under <out>/dataset.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pretrain and train the configured method; writes history CSV,
    /// transition-matrix dumps and a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on the target split; writes eval.csv and PGM
    /// prediction maps.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory (defaults to the configured run's checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every method over several seeds and write the summary table.
    Ablation {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of seeds, starting at the config seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Comma-separated method subset (default: all five).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Run all finite-difference suites and print the report.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Generate { config } => {
            let cfg = config.load()?;
            let dir = harness::cmd_generate(&cfg)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train { config } => {
            let cfg = config.load()?;
            let outputs = harness::cmd_train(&cfg)?;
            println!("run artifacts in {}", outputs.run_dir.display());
        }
        Command::Eval { config, checkpoint } => {
            let cfg = config.load()?;
            let ckpt = checkpoint.unwrap_or_else(|| {
                cfg.resolved_out_dir()
                    .join("runs")
                    .join(format!("{}_seed{}", cfg.method, cfg.seed))
                    .join("checkpoint")
            });
            let dir = harness::cmd_eval(&cfg, &ckpt)?;
            println!("evaluation written to {}", dir.display());
        }
        Command::Ablation { config, seeds, methods } => {
            let cfg = config.load()?;
            let methods: Vec<Method> = if methods.is_empty() {
                Method::ALL.to_vec()
            } else {
                methods
                    .iter()
                    .map(|m| Method::parse(m).map_err(|e| HarnessError::Validation(e.to_string())))
                    .collect::<Result<_, _>>()?
            };
            let csv = harness::cmd_ablation(&cfg, &methods, seeds)?;
            println!("ablation table written to {}", csv.display());
        }
        Command::Gradcheck { seed } => {
            let report = harness::cmd_gradcheck(seed)?;
            print!("{report}");
            println!("all checks passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
