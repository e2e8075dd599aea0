use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedsel_core::experiment::{
    compare_policies, parse_config, render_comparison_table, run_and_emit, ExperimentConfig, Overrides, CONFIG_KEYS,
};
use fedsel_core::{PolicyKind, ScheduleShape};

const KEYS_HELP: &str = CONFIG_KEYS;

/// Federated client-selection simulator.
#[derive(Parser, Debug)]
#[command(name = "fedsel", version, after_long_help = KEYS_HELP, after_help = "Run `fedsel --help` for the config keys.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one policy for `repeats` seeds and write metrics.csv and summary.json.
    #[command(after_long_help = KEYS_HELP)]
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        schedule: Option<ScheduleShape>,
    },
    /// Run several policies on identical data and print a comparison table.
    #[command(after_long_help = KEYS_HELP)]
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `policy` or `policy:schedule` entries.
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<String>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Run the configured policy once per alpha, each into `alpha_<value>/`.
    #[command(after_long_help = KEYS_HELP)]
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        schedule: Option<ScheduleShape>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Output directory.
    #[arg(long, env = "FEDSEL_OUT", default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self, overrides: Overrides) -> Result<ExperimentConfig> {
        let overrides = Overrides {
            master_seed: self.seed,
            repeats: self.repeats,
            ..overrides
        };
        parse_config(self.config.as_deref(), &overrides).with_context(|| match &self.config {
            Some(p) => format!("loading config {}", p.display()),
            None => "building default config".to_owned(),
        })
    }
}

fn parse_entry(entry: &str) -> Result<(PolicyKind, Option<ScheduleShape>)> {
    let entry = entry.trim();
    match entry.split_once(':') {
        Some((p, s)) => Ok((p.parse()?, Some(s.parse()?))),
        None if entry.is_empty() => bail!("empty entry in --policies"),
        None => Ok((entry.parse()?, None)),
    }
}

fn emit(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let s = run_and_emit(config, out).with_context(|| format!("writing results to {}", out.display()))?;
    println!(
        "{} ({}, alpha {}): final accuracy {:.4} ± {:.4}, mean participation {:.4}, client-rounds {:.1}",
        s.policy,
        s.schedule,
        s.alpha,
        s.final_accuracy_mean,
        s.final_accuracy_std,
        s.mean_participation_ratio,
        s.total_participation_mean
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            common,
            alpha,
            policy,
            schedule,
        } => {
            let config = common.load(Overrides {
                alpha,
                policy,
                schedule,
                ..Overrides::default()
            })?;
            emit(&config, &common.out)
        }
        Command::Sweep {
            common,
            alphas,
            policy,
            schedule,
        } => {
            let base = common.load(Overrides {
                policy,
                schedule,
                ..Overrides::default()
            })?;
            for alpha in alphas {
                let config = ExperimentConfig { alpha, ..base.clone() };
                config.validate()?;
                emit(&config, &common.out.join(format!("alpha_{alpha}")))?;
            }
            Ok(())
        }
        Command::Compare {
            common,
            policies,
            alpha,
        } => {
            let base = common.load(Overrides {
                alpha,
                ..Overrides::default()
            })?;
            let configs = policies
                .iter()
                .map(|e| {
                    let (policy, schedule) = parse_entry(e)?;
                    Ok(ExperimentConfig {
                        policy,
                        schedule: schedule.unwrap_or(base.schedule),
                        ..base.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = compare_policies(&configs, Some(&common.out))
                .with_context(|| format!("writing results to {}", common.out.display()))?;
            print!("{}", render_comparison_table(&rows));
            println!("wrote {}", common.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
