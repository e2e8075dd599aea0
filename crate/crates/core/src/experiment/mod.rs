//! Experiment driver: builds data for each repeat, runs the protocol, and
//! writes `metrics.csv` / `summary.json`.

mod config;
mod output;

pub use config::{parse_config, ExperimentConfig, Overrides, CONFIG_KEYS};
pub use output::{
    fixed6, parse_metrics_csv, render_comparison_csv, render_comparison_table, render_csv, sample_std, ComparisonRow,
    MetricsRow, RoundSummary, Summary, COMPARISON_HEADER, CSV_HEADER,
};

use std::path::Path;

use rayon::prelude::*;

use crate::data::{load_csv, make_synthetic, synthetic_seed, DataBundle, PartitionSpec};
use crate::error::{Error, Result};
use crate::protocol::{round_zero, run_rounds, ProtocolConfig, RoundMetrics};
use crate::rng::{derive_seed, stream};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Data for repeat `run`: pool, server split and client partition all follow
/// from `master_seed + run`, independent of the policy.
pub fn build_data(config: &ExperimentConfig, run: usize) -> Result<DataBundle> {
    let seed = config.run_seed(run);
    let pool = match &config.data_csv {
        Some(path) => load_csv(path, None)?,
        None => make_synthetic(
            config.num_classes,
            config.input_dim,
            config.samples_per_class,
            config.separation,
            synthetic_seed(seed),
        )?,
    };
    let partition = PartitionSpec::new(config.clients, config.alpha, derive_seed(seed, &[stream::PARTITION]))?;
    DataBundle::build(
        &pool,
        config.server_unlabeled,
        config.server_test,
        derive_seed(seed, &[stream::SERVER_SPLIT]),
        &partition,
    )
}

/// Round zero followed by `config.rounds` rounds for repeat `run`.
pub fn run_experiment(config: &ExperimentConfig, run: usize) -> Result<Vec<RoundMetrics>> {
    config.validate()?;
    let bundle = build_data(config, run)?;
    let test = &bundle.server_test;
    let arch = config.architecture(test.input_dim(), test.num_classes())?;
    let proto = ProtocolConfig {
        sgd: config.sgd(),
        total_rounds: config.rounds,
        seed: config.run_seed(run),
        global_init: config.global_init,
    };
    let policy = config.selection_policy()?;
    let (mut state, mut clients) = round_zero(
        bundle.client_sets,
        arch,
        bundle.server_unlabeled,
        bundle.server_test,
        proto.seed,
        proto.global_init,
    )?;
    run_rounds(&mut state, &mut clients, &policy, &proto)
}

/// All repeats, flattened into CSV rows ordered by `(run, round)`.
pub fn run_repeats(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let runs: Vec<Vec<RoundMetrics>> = (0..config.repeats)
        .into_par_iter()
        .map(|run| run_experiment(config, run))
        .collect::<Result<_>>()?;
    Ok(runs
        .iter()
        .enumerate()
        .flat_map(|(run, metrics)| {
            metrics
                .iter()
                .map(move |m| MetricsRow::from_metrics(run, config.policy.name(), config.alpha, m))
        })
        .collect())
}

/// Runs every repeat and writes `metrics.csv` and `summary.json` into `out_dir`.
pub fn run_and_emit(config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let rows = run_repeats(config)?;
    let summary = Summary::from_rows(&rows, config.schedule.name(), config.clients);
    std::fs::write(out_dir.join(METRICS_FILE), render_csv(&rows))?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(out_dir.join(SUMMARY_FILE), json + "\n")?;
    Ok(summary)
}

/// Runs each config on the same data. With `out_dir`, each policy's files go
/// to `<out_dir>/<label>/` and the table to `comparison.csv`.
pub fn compare_policies(configs: &[ExperimentConfig], out_dir: Option<&Path>) -> Result<Vec<ComparisonRow>> {
    let first = configs.first().ok_or_else(|| Error::invalid("nothing to compare"))?;
    if let Some(i) = configs.iter().position(|c| !c.same_data_as(first)) {
        return Err(Error::invalid(format!(
            "config {i} uses a different data spec or seed than config 0"
        )));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let summary = match out_dir {
            Some(dir) => {
                let label = format!("{}_{}", config.policy.name(), config.schedule.name());
                run_and_emit(config, &dir.join(label))?
            }
            None => {
                config.validate()?;
                Summary::from_rows(&run_repeats(config)?, config.schedule.name(), config.clients)
            }
        };
        rows.push(ComparisonRow::from_summary(&summary));
    }
    if let Some(dir) = out_dir {
        std::fs::write(dir.join(COMPARISON_FILE), render_comparison_csv(&rows))?;
    }
    Ok(rows)
}
