use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Architecture, SgdConfig};
use crate::protocol::GlobalInit;
use crate::selection::{EtaSchedule, PolicyKind, ScheduleShape, SelectionPolicy, ThresholdSchedule};

/// Every key accepted in a config file, with its default, for `--help`.
pub const CONFIG_KEYS: &str = "\
clients = 10                 number of clients K
rounds = 20                  global rounds T
alpha = 1.0                  Dirichlet concentration (smaller = more label skew)
local_epochs = 20            local SGD epochs per selected client
batch_size = 64              local mini-batch size
lr = 0.001                   local SGD learning rate
hidden_dim = 0               0 = logistic regression, >0 = one tanh hidden layer
policy = \"fedabc_threshold\"  fedabc_threshold | fedabc_lambda | fedavg_all | cho_loss_rank
schedule = \"linear\"          threshold growth: linear | concave | convex
tau_cap = 1.0                upper bound on the threshold
lambda = 1.0                 participation penalty for fedabc_lambda
eta = \"linear\"               eta_t for fedabc_lambda: \"linear\" or { constant = 0.5 }
cho_counts = [..]            clients per round for cho_loss_rank (default: 20%..100% ramp)
global_init = \"fresh\"        round-0 global model: fresh | client_mean
num_classes = 10             synthetic data: classes
input_dim = 16               synthetic data: feature dimension
samples_per_class = 300      synthetic data: samples per class
separation = 5.0             synthetic data: distance of class centres from the origin
data_csv = \"path.csv\"        load f0,..,fD,label CSV instead of generating data
server_unlabeled = 250       size of the server's unlabeled probe set
server_test = 500            size of the server's labeled test set
master_seed = 0              run r uses seed master_seed + r
repeats = 3                  independent runs";

fn d_clients() -> usize {
    10
}
fn d_rounds() -> usize {
    20
}
fn d_alpha() -> f64 {
    1.0
}
fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    0.001
}
fn d_policy() -> PolicyKind {
    PolicyKind::FedabcThreshold
}
fn d_schedule() -> ScheduleShape {
    ScheduleShape::Linear
}
fn d_one() -> f64 {
    1.0
}
fn d_eta() -> EtaSchedule {
    EtaSchedule::Linear
}
fn d_classes() -> usize {
    10
}
fn d_input_dim() -> usize {
    16
}
fn d_samples() -> usize {
    300
}
fn d_separation() -> f64 {
    5.0
}
fn d_unlabeled() -> usize {
    250
}
fn d_test() -> usize {
    500
}
fn d_repeats() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_clients")]
    pub clients: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub hidden_dim: usize,
    #[serde(default = "d_policy")]
    pub policy: PolicyKind,
    #[serde(default = "d_schedule")]
    pub schedule: ScheduleShape,
    #[serde(default = "d_one")]
    pub tau_cap: f64,
    #[serde(default = "d_one")]
    pub lambda: f64,
    #[serde(default = "d_eta")]
    pub eta: EtaSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cho_counts: Option<Vec<usize>>,
    #[serde(default)]
    pub global_init: GlobalInit,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_input_dim")]
    pub input_dim: usize,
    #[serde(default = "d_samples")]
    pub samples_per_class: usize,
    #[serde(default = "d_separation")]
    pub separation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_csv: Option<PathBuf>,
    #[serde(default = "d_unlabeled")]
    pub server_unlabeled: usize,
    #[serde(default = "d_test")]
    pub server_test: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "d_repeats")]
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub policy: Option<PolicyKind>,
    pub schedule: Option<ScheduleShape>,
    pub master_seed: Option<u64>,
    pub repeats: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.message().to_owned()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(a) = o.alpha {
            self.alpha = a;
        }
        if let Some(p) = o.policy {
            self.policy = p;
        }
        if let Some(s) = o.schedule {
            self.schedule = s;
        }
        if let Some(s) = o.master_seed {
            self.master_seed = s;
        }
        if let Some(r) = o.repeats {
            self.repeats = r;
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
            Ok(())
        }
        positive("clients", self.clients)?;
        positive("rounds", self.rounds)?;
        positive("local_epochs", self.local_epochs)?;
        positive("batch_size", self.batch_size)?;
        positive("repeats", self.repeats)?;
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.tau_cap.is_finite() && self.tau_cap > 0.0) {
            return Err(Error::config(
                "tau_cap",
                format!("must be positive, got {}", self.tau_cap),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config(
                "lambda",
                format!("must be positive, got {}", self.lambda),
            ));
        }
        if let EtaSchedule::Constant(v) = self.eta {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config("eta", format!("constant must lie in (0, 1], got {v}")));
            }
        }
        if let Some(counts) = &self.cho_counts {
            if counts.len() != self.rounds {
                return Err(Error::config(
                    "cho_counts",
                    format!("needs one entry per round ({}), got {}", self.rounds, counts.len()),
                ));
            }
            if let Some(bad) = counts.iter().find(|&&n| n == 0 || n > self.clients) {
                return Err(Error::config(
                    "cho_counts",
                    format!("entry {bad} outside 1..={}", self.clients),
                ));
            }
        }
        if self.data_csv.is_none() {
            if self.num_classes < 2 {
                return Err(Error::config("num_classes", "must be at least 2"));
            }
            positive("input_dim", self.input_dim)?;
            positive("samples_per_class", self.samples_per_class)?;
            if !(self.separation.is_finite() && self.separation >= 0.0) {
                return Err(Error::config("separation", "must be finite and non-negative"));
            }
            let pool = self.num_classes * self.samples_per_class;
            let needed = self.server_unlabeled + self.server_test + self.clients;
            if pool < needed {
                return Err(Error::config(
                    "samples_per_class",
                    format!("{pool} samples cannot cover the server sets plus one per client ({needed})"),
                ));
            }
        }
        positive("server_unlabeled", self.server_unlabeled)?;
        positive("server_test", self.server_test)?;
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Result<Architecture> {
        Architecture::new(input_dim, self.hidden_dim, num_classes)
    }

    pub fn selection_policy(&self) -> Result<SelectionPolicy> {
        let tau = ThresholdSchedule::new(self.schedule, self.rounds, self.tau_cap)?;
        let mut policy = SelectionPolicy::new(self.policy, self.rounds, self.clients)?.with_schedule(tau);
        policy.lambda = self.lambda;
        policy.eta = self.eta;
        if let Some(c) = &self.cho_counts {
            policy.cho_counts = c.clone();
        }
        Ok(policy)
    }

    /// Seed for repeat `run`.
    pub fn run_seed(&self, run: usize) -> u64 {
        self.master_seed.wrapping_add(run as u64)
    }

    /// True when two configs draw identical data and partitions for every run.
    pub fn same_data_as(&self, other: &Self) -> bool {
        self.clients == other.clients
            && self.alpha == other.alpha
            && self.num_classes == other.num_classes
            && self.input_dim == other.input_dim
            && self.samples_per_class == other.samples_per_class
            && self.separation == other.separation
            && self.data_csv == other.data_csv
            && self.server_unlabeled == other.server_unlabeled
            && self.server_test == other.server_test
            && self.master_seed == other.master_seed
    }
}

/// Reads an optional config file, applies command-line overrides, validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut config = ExperimentConfig::from_toml_str(&text)?;
    config.apply(overrides);
    config.validate()?;
    Ok(config)
}
