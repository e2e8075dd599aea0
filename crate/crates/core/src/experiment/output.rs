use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::protocol::RoundMetrics;

pub const CSV_HEADER: &str = "run,round,policy,alpha,test_accuracy,participation_ratio,num_selected,threshold";

/// Rounds to the 6-decimal fixed-point value written to CSV.
pub fn fixed6(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: usize,
    pub round: usize,
    pub policy: String,
    pub alpha: f64,
    pub test_accuracy: f64,
    pub participation_ratio: f64,
    pub num_selected: usize,
    /// `tau_t` or `lambda / eta_t`; 0 for the baselines.
    pub threshold: f64,
}

impl MetricsRow {
    pub fn from_metrics(run: usize, policy: &str, alpha: f64, m: &RoundMetrics) -> Self {
        Self {
            run,
            round: m.round,
            policy: policy.to_owned(),
            alpha,
            test_accuracy: m.test_accuracy,
            participation_ratio: m.participation_ratio,
            num_selected: m.num_selected,
            threshold: m.decision.cutoff().unwrap_or(0.0),
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{:.6}",
            self.run,
            self.round,
            self.policy,
            self.alpha,
            self.test_accuracy,
            self.participation_ratio,
            self.num_selected,
            self.threshold
        )
    }
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Parses text produced by [`render_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(format!("unexpected header `{}`", header.join(",")));
    }
    rdr.deserialize().map(|r| r.map_err(|e| e.to_string())).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub participation_mean: f64,
    pub participation_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub schedule: String,
    pub alpha: f64,
    pub clients: usize,
    pub rounds: usize,
    pub repeats: usize,
    pub per_round: Vec<RoundSummary>,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub mean_participation_ratio: f64,
    /// Mean over repeats of the total client-rounds (sum of selections).
    pub total_participation_mean: f64,
}

impl Summary {
    /// Aggregates rows as they appear in the CSV, so every statistic can be
    /// recomputed from the file.
    pub fn from_rows(rows: &[MetricsRow], schedule: &str, clients: usize) -> Self {
        let rounds = rows.iter().map(|r| r.round).max().unwrap_or(0);
        let repeats = rows.iter().map(|r| r.run).max().map_or(0, |r| r + 1);
        let column = |round: usize, f: fn(&MetricsRow) -> f64| -> Vec<f64> {
            rows.iter().filter(|r| r.round == round).map(|r| fixed6(f(r))).collect()
        };
        let per_round: Vec<RoundSummary> = (1..=rounds)
            .map(|round| {
                let acc = column(round, |r| r.test_accuracy);
                let part = column(round, |r| r.participation_ratio);
                RoundSummary {
                    round,
                    accuracy_mean: mean(&acc),
                    accuracy_std: sample_std(&acc),
                    participation_mean: mean(&part),
                    participation_std: sample_std(&part),
                }
            })
            .collect();
        let finals = column(rounds, |r| r.test_accuracy);
        let all_part: Vec<f64> = rows.iter().map(|r| fixed6(r.participation_ratio)).collect();
        let totals: Vec<f64> = (0..repeats)
            .map(|run| {
                rows.iter()
                    .filter(|r| r.run == run)
                    .map(|r| r.num_selected as f64)
                    .sum()
            })
            .collect();
        Self {
            policy: rows.first().map(|r| r.policy.clone()).unwrap_or_default(),
            schedule: schedule.to_owned(),
            alpha: rows.first().map_or(0.0, |r| r.alpha),
            clients,
            rounds,
            repeats,
            per_round,
            final_accuracy_mean: mean(&finals),
            final_accuracy_std: sample_std(&finals),
            mean_participation_ratio: mean(&all_part),
            total_participation_mean: mean(&totals),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub schedule: String,
    pub final_accuracy: f64,
    pub final_accuracy_std: f64,
    pub mean_participation_ratio: f64,
    pub total_client_rounds: f64,
}

impl ComparisonRow {
    pub fn from_summary(s: &Summary) -> Self {
        Self {
            policy: s.policy.clone(),
            schedule: s.schedule.clone(),
            final_accuracy: s.final_accuracy_mean,
            final_accuracy_std: s.final_accuracy_std,
            mean_participation_ratio: s.mean_participation_ratio,
            total_client_rounds: s.total_participation_mean,
        }
    }
}

pub const COMPARISON_HEADER: &str =
    "policy,schedule,final_accuracy,final_accuracy_std,mean_participation_ratio,total_client_rounds";

pub fn render_comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.policy,
            r.schedule,
            r.final_accuracy,
            r.final_accuracy_std,
            r.mean_participation_ratio,
            r.total_client_rounds
        );
    }
    out
}

/// Human-readable aligned table.
pub fn render_comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<18} {:<9} {:>14} {:>14} {:>13}\n",
        "policy", "schedule", "final_acc", "participation", "client_rounds"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:<9} {:>7.4}±{:<6.4} {:>14.4} {:>13.1}",
            r.policy,
            r.schedule,
            r.final_accuracy,
            r.final_accuracy_std,
            r.mean_participation_ratio,
            r.total_client_rounds
        );
    }
    out
}
