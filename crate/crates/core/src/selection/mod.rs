//! Attention-based client selection and the baseline selectors it is
//! compared against.

mod attention;
mod schedule;
mod select;

pub use attention::{attention_scores, client_value, compatibility, kl_divergence, pairwise_distances};
pub use schedule::{threshold_at, EtaSchedule, ScheduleShape, ThresholdSchedule, LINEAR_PERIOD, TAU_START, TAU_STEP};
pub use select::{
    aggregation_weights, baseline_cho_select, baseline_select_all, default_cho_counts, select_by_lambda,
    select_by_threshold, SelectionDecision,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{ModelParams, UnlabeledDataset};

/// Everything the server derives from the registry and reported values in one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub round: usize,
    pub distances: Matrix,
    pub compatibility: Matrix,
    pub values: Vec<f64>,
    pub scores: Vec<f64>,
}

impl ScoreReport {
    pub fn compute(round: usize, registry: &[ModelParams], probe: &UnlabeledDataset, values: Vec<f64>) -> Result<Self> {
        if values.len() != registry.len() {
            return Err(Error::DimensionMismatch {
                context: "ScoreReport::compute (values vs registry)",
                expected: registry.len(),
                got: values.len(),
            });
        }
        let distances = pairwise_distances(registry, probe)?;
        let compatibility = compatibility(&distances)?;
        let scores = attention_scores(&compatibility, &values)?;
        Ok(Self {
            round,
            distances,
            compatibility,
            values,
            scores,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    FedabcLambda,
    FedabcThreshold,
    FedavgAll,
    ChoLossRank,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        Self::FedabcLambda,
        Self::FedabcThreshold,
        Self::FedavgAll,
        Self::ChoLossRank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FedabcLambda => "fedabc_lambda",
            Self::FedabcThreshold => "fedabc_threshold",
            Self::FedavgAll => "fedavg_all",
            Self::ChoLossRank => "cho_loss_rank",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::config(
                "policy",
                format!("unknown policy `{s}` (expected one of {})", names.join(", ")),
            )
        })
    }
}

/// A selector plus the parameters it consults. Only the fields relevant to
/// `kind` are read.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPolicy {
    pub kind: PolicyKind,
    pub lambda: f64,
    pub eta: EtaSchedule,
    pub tau: ThresholdSchedule,
    pub cho_counts: Vec<usize>,
}

impl SelectionPolicy {
    /// Policy with default parameters for a `total_rounds` x `num_clients` run.
    pub fn new(kind: PolicyKind, total_rounds: usize, num_clients: usize) -> Result<Self> {
        Ok(Self {
            kind,
            lambda: 1.0,
            eta: EtaSchedule::Linear,
            tau: ThresholdSchedule::linear(total_rounds)?,
            cho_counts: default_cho_counts(total_rounds, num_clients),
        })
    }

    pub fn with_schedule(mut self, tau: ThresholdSchedule) -> Self {
        self.tau = tau;
        self
    }

    /// Selection for the zero-based round index `t` of a `total_rounds` horizon.
    pub fn decide(&self, report: &ScoreReport, t: usize, total_rounds: usize) -> Result<SelectionDecision> {
        let k = report.num_clients();
        match self.kind {
            PolicyKind::FedavgAll => baseline_select_all(k),
            PolicyKind::ChoLossRank => {
                let n = *self
                    .cho_counts
                    .get(t)
                    .ok_or_else(|| Error::invalid(format!("cho_counts has no entry for round index {t}")))?;
                baseline_cho_select(&report.values, n)
            }
            PolicyKind::FedabcThreshold => {
                let tau = threshold_at(&self.tau, t, total_rounds)?;
                let mask = select_by_threshold(&report.scores, tau)?;
                let weights = aggregation_weights(&report.scores, &mask)?;
                SelectionDecision::new(mask, weights, Some(tau))
            }
            PolicyKind::FedabcLambda => {
                let eta = self.eta.at(t, total_rounds)?;
                let mask = select_by_lambda(&report.scores, self.lambda, eta)?;
                let weights = aggregation_weights(&report.scores, &mask)?;
                SelectionDecision::new(mask, weights, Some(self.lambda / eta))
            }
        }
    }
}
