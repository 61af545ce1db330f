use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tdamp_cli::config::RunConfig;
use tdamp_cli::run::{self, Mode, RunSummary};

/// Bayesian MLP training by turbo message passing.
#[derive(Parser)]
#[command(name = "tdamp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file of flat key = value settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: boston, mnist, boston-fed or mnist-fed.
    #[arg(long)]
    preset: Option<String>,
    /// Seed for initialization and minibatch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the checkpoint, metrics and tables.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::resolve(self.preset.as_deref(), self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Centralized EM training.
    Train(Common),
    /// Federated simulation over `clients` shards.
    Federated(Common),
    /// Score a checkpoint on its test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override a setting from the checkpoint's configuration echo.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Final test metric against target sparsity.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated fractions of weight groups to keep.
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        targets: Vec<f64>,
        /// Runs per target, seeds `seed..seed+repeats`.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
}

fn report(s: &RunSummary) {
    println!("iterations {}", s.iterations);
    println!("{} {:.6}", s.score.name, s.score.value);
    println!("noise_var {:.6}", s.noise_var);
    println!("active_groups {}/{}", s.active_groups, s.total_groups);
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(c) => report(&run::train(&c.resolve()?, Mode::Centralized, Some(&c.out))?),
        Command::Federated(c) => report(&run::train(&c.resolve()?, Mode::Federated, Some(&c.out))?),
        Command::Eval { checkpoint, set } => {
            let s = run::eval(&checkpoint, &set)?;
            println!("{} {:.6}", s.name, s.value);
        }
        Command::Sweep {
            common,
            targets,
            repeats,
        } => {
            let rows = run::sweep(&common.resolve()?, &targets, repeats, Some(&common.out))?;
            println!("sparsity,metric,metric_sd,active_ratio,repeats");
            for r in rows {
                println!(
                    "{},{:.6},{:.6},{:.4},{}",
                    r.sparsity, r.metric, r.metric_sd, r.active_ratio, r.repeats
                );
            }
        }
    }
    Ok(())
}
