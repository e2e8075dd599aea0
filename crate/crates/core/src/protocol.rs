//! Server/client round protocol.
//!
//! Round 0: every client initialises a model and uploads it; the server stores
//! it in the registry. Each later round has three steps:
//!
//! 1. configure: broadcast the global model; every client reports the loss of
//!    that model on its private data (its value).
//! 2. select: the server scores clients from the registry, the probe set and
//!    the values, then applies the policy.
//! 3. report: selected clients train from the global model and upload; the
//!    server refreshes their registry slots and aggregates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    accuracy, init_params, sgd_train, Architecture, LabeledDataset, ModelParams, SgdConfig, UnlabeledDataset,
};
use crate::rng::{derive_seed, stream};
use crate::selection::{client_value, ScoreReport, SelectionDecision, SelectionPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub id: usize,
    pub data: LabeledDataset,
    /// Most recent parameters this client uploaded.
    pub last_uploaded: ModelParams,
    /// Value reported in the latest configure step.
    pub current_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: ModelParams,
    pub registry: Vec<ModelParams>,
    pub unlabeled: UnlabeledDataset,
    pub test: LabeledDataset,
    /// Next round to run, starting at 1.
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub num_selected: usize,
    pub participation_ratio: f64,
    pub scores: ScoreReport,
    pub decision: SelectionDecision,
}

/// How the round-0 global model is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalInit {
    /// Independent seeded initialisation.
    #[default]
    Fresh,
    /// Uniform average of the clients' round-0 uploads.
    ClientMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub sgd: SgdConfig,
    pub total_rounds: usize,
    pub seed: u64,
    pub global_init: GlobalInit,
}

fn local_seed(seed: u64, round: usize, client: usize) -> u64 {
    derive_seed(seed, &[stream::LOCAL_TRAIN, round as u64, client as u64])
}

/// Full participation bootstrap: every client uploads an untrained,
/// per-id seeded model.
pub fn round_zero(
    client_sets: Vec<LabeledDataset>,
    arch: Architecture,
    unlabeled: UnlabeledDataset,
    test: LabeledDataset,
    seed: u64,
    global_init: GlobalInit,
) -> Result<(ServerState, Vec<ClientRecord>)> {
    if client_sets.is_empty() {
        return Err(Error::invalid("round zero needs at least one client"));
    }
    if let Some(k) = client_sets.iter().position(LabeledDataset::is_empty) {
        return Err(Error::invalid(format!("client {k} has no data")));
    }
    let clients: Vec<ClientRecord> = client_sets
        .into_iter()
        .enumerate()
        .map(|(id, data)| ClientRecord {
            id,
            data,
            last_uploaded: init_params(arch, derive_seed(seed, &[stream::CLIENT_INIT, id as u64])),
            current_value: 0.0,
        })
        .collect();
    let registry: Vec<ModelParams> = clients.iter().map(|c| c.last_uploaded.clone()).collect();
    let global = match global_init {
        GlobalInit::Fresh => init_params(arch, derive_seed(seed, &[stream::GLOBAL_INIT])),
        GlobalInit::ClientMean => {
            let w = vec![1.0; registry.len()];
            aggregate(&registry.iter().collect::<Vec<_>>(), &w)?
        }
    };
    let state = ServerState {
        global,
        registry,
        unlabeled,
        test,
        round: 1,
    };
    Ok((state, clients))
}

/// The client's side of a round: its value on the received global model, and
/// its locally trained update starting from that model.
pub fn client_report(
    client: &ClientRecord,
    global: &ModelParams,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<(ModelParams, f64)> {
    let value = client_value(&client.data, global)?;
    let update = sgd_train(global, &client.data, sgd, seed)?;
    Ok((update, value))
}

/// Weighted parameter mean `sum w_k theta_k / sum w_k`, summed in list order.
pub fn aggregate(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params.first().ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if params.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregate (params vs weights)",
            expected: params.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("aggregation weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("aggregation weights are all zero"));
    }
    let arch = *first.arch();
    if params.iter().any(|p| *p.arch() != arch) {
        return Err(Error::invalid("cannot aggregate models with different architectures"));
    }
    let mut acc = vec![0.0; arch.param_count()];
    for (p, &w) in params.iter().zip(weights) {
        for (a, x) in acc.iter_mut().zip(p.weights()) {
            *a += w * x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    ModelParams::from_weights(arch, acc)
}

/// One round under `policy`.
pub fn run_round(
    state: &mut ServerState,
    clients: &mut [ClientRecord],
    policy: &SelectionPolicy,
    cfg: &ProtocolConfig,
) -> Result<RoundMetrics> {
    let t = state.round;
    run_round_with(state, clients, cfg, |report| {
        policy.decide(report, t - 1, cfg.total_rounds)
    })
}

/// One round with an arbitrary selection step; `decide` sees the round's
/// score report and returns the mask and weights to aggregate with.
pub fn run_round_with<F>(
    state: &mut ServerState,
    clients: &mut [ClientRecord],
    cfg: &ProtocolConfig,
    decide: F,
) -> Result<RoundMetrics>
where
    F: FnOnce(&ScoreReport) -> Result<SelectionDecision>,
{
    let t = state.round;
    if t == 0 {
        return Err(Error::invalid("run round_zero before regular rounds"));
    }
    if clients.len() != state.registry.len() {
        return Err(Error::DimensionMismatch {
            context: "run_round (clients vs registry)",
            expected: state.registry.len(),
            got: clients.len(),
        });
    }

    // Configure.
    let global = &state.global;
    let values: Vec<f64> = clients
        .par_iter()
        .map(|c| client_value(&c.data, global))
        .collect::<Result<_>>()?;
    for (c, &v) in clients.iter_mut().zip(&values) {
        c.current_value = v;
    }

    // Select.
    let report = ScoreReport::compute(t, &state.registry, &state.unlabeled, values)?;
    let decision = decide(&report)?;
    if decision.mask().len() != clients.len() {
        return Err(Error::DimensionMismatch {
            context: "run_round (selection mask)",
            expected: clients.len(),
            got: decision.mask().len(),
        });
    }

    // Report.
    let selected: Vec<usize> = decision.selected().collect();
    let updates: Vec<ModelParams> = selected
        .par_iter()
        .map(|&k| {
            sgd_train(
                global,
                &clients[k].data,
                &cfg.sgd,
                local_seed(cfg.seed, t, clients[k].id),
            )
        })
        .collect::<Result<_>>()?;
    for (&k, update) in selected.iter().zip(&updates) {
        state.registry[k] = update.clone();
        clients[k].last_uploaded = update.clone();
    }
    let weights: Vec<f64> = selected.iter().map(|&k| decision.weights()[k]).collect();
    state.global = aggregate(&updates.iter().collect::<Vec<_>>(), &weights)?;

    let test_accuracy = accuracy(&state.global, &state.test)?;
    let num_selected = decision.num_selected();
    state.round += 1;
    Ok(RoundMetrics {
        round: t,
        test_accuracy,
        num_selected,
        participation_ratio: num_selected as f64 / clients.len() as f64,
        scores: report,
        decision,
    })
}

/// Runs rounds until the configured horizon is reached.
pub fn run_rounds(
    state: &mut ServerState,
    clients: &mut [ClientRecord],
    policy: &SelectionPolicy,
    cfg: &ProtocolConfig,
) -> Result<Vec<RoundMetrics>> {
    let mut out = Vec::with_capacity(cfg.total_rounds);
    while state.round <= cfg.total_rounds {
        out.push(run_round(state, clients, policy, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dirichlet_partition, make_synthetic, split_server, PartitionSpec};
    use crate::nn::ce_loss;
    use crate::selection::{aggregation_weights, baseline_select_all, select_by_threshold, PolicyKind};

    fn setup(k: usize, seed: u64) -> (ServerState, Vec<ClientRecord>, ProtocolConfig) {
        let pool = make_synthetic(4, 5, 60, 3.0, seed).unwrap();
        let (u, test, rest) = split_server(&pool, 30, 40, seed).unwrap();
        let sets = dirichlet_partition(&rest, &PartitionSpec::new(k, 0.5, seed).unwrap()).unwrap();
        let arch = Architecture::logistic(5, 4).unwrap();
        let (state, clients) = round_zero(sets, arch, u, test, seed, GlobalInit::Fresh).unwrap();
        let cfg = ProtocolConfig {
            sgd: SgdConfig {
                epochs: 2,
                batch_size: 16,
                lr: 0.05,
            },
            total_rounds: 5,
            seed,
            global_init: GlobalInit::Fresh,
        };
        (state, clients, cfg)
    }

    #[test]
    fn round_zero_populates_distinct_registry() {
        let (state, clients, _) = setup(10, 1);
        assert_eq!(state.registry.len(), 10);
        assert_eq!(state.round, 1);
        for (a, client) in clients.iter().enumerate() {
            assert_eq!(client.last_uploaded, state.registry[a]);
            for b in a + 1..10 {
                assert_ne!(state.registry[a], state.registry[b]);
            }
        }
        let (again, _, _) = setup(10, 1);
        assert_eq!(state, again);
    }

    #[test]
    fn client_mean_init_averages_uploads() {
        let (state, clients, _) = setup(3, 2);
        let sets: Vec<_> = clients.iter().map(|c| c.data.clone()).collect();
        let (s2, _) = round_zero(
            sets,
            *state.global.arch(),
            state.unlabeled.clone(),
            state.test.clone(),
            2,
            GlobalInit::ClientMean,
        )
        .unwrap();
        for (i, &g) in s2.global.weights().iter().enumerate() {
            let mean = state.registry.iter().map(|m| m.weights()[i]).sum::<f64>() / 3.0;
            assert!((g - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn client_report_value_comes_from_received_model() {
        let (state, clients, cfg) = setup(4, 3);
        let (update, value) = client_report(&clients[0], &state.global, &cfg.sgd, 9).unwrap();
        assert_eq!(value, ce_loss(&state.global, &clients[0].data).unwrap());
        assert_ne!(update, state.global);
        let frozen = SgdConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.0,
        };
        let (same, _) = client_report(&clients[0], &state.global, &frozen, 9).unwrap();
        assert_eq!(same, state.global);
    }

    #[test]
    fn aggregate_examples() {
        let arch = Architecture::logistic(1, 2).unwrap();
        let a = ModelParams::from_weights(arch, vec![0.0; 4]).unwrap();
        let b = ModelParams::from_weights(arch, vec![2.0; 4]).unwrap();
        assert_eq!(aggregate(&[&a, &b], &[0.25, 0.75]).unwrap().weights(), &[1.5; 4]);
        assert_eq!(aggregate(&[&b, &a], &[1.0, 0.0]).unwrap(), b);
        assert_eq!(aggregate(&[&b, &b, &b], &[0.2, 0.3, 0.5]).unwrap(), b);
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(&[&a, &b], &[0.0, 0.0]).is_err());
        assert!(aggregate(&[&a], &[-1.0]).is_err());
        let other = ModelParams::zeros(Architecture::logistic(2, 2).unwrap());
        assert!(aggregate(&[&a, &other], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let arch = Architecture::new(3, 2, 3).unwrap();
        let models: Vec<ModelParams> = (0..5).map(|s| init_params(arch, s)).collect();
        let w = [0.1, 0.4, 0.2, 0.05, 0.25];
        let base = aggregate(&models.iter().collect::<Vec<_>>(), &w).unwrap();
        let perm = [3, 1, 4, 0, 2];
        let pm: Vec<&ModelParams> = perm.iter().map(|&i| &models[i]).collect();
        let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let shuffled = aggregate(&pm, &pw).unwrap();
        for (a, b) in base.weights().iter().zip(shuffled.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fedavg_round_is_uniform_average_of_fresh_models() {
        let (mut state, mut clients, cfg) = setup(4, 4);
        let start = state.global.clone();
        let policy = SelectionPolicy::new(PolicyKind::FedavgAll, cfg.total_rounds, 4).unwrap();
        let m = run_round(&mut state, &mut clients, &policy, &cfg).unwrap();
        assert_eq!(m.participation_ratio, 1.0);
        let trained: Vec<ModelParams> = clients
            .iter()
            .map(|c| sgd_train(&start, &c.data, &cfg.sgd, local_seed(cfg.seed, 1, c.id)).unwrap())
            .collect();
        let expected = aggregate(&trained.iter().collect::<Vec<_>>(), &[0.25; 4]).unwrap();
        assert_eq!(state.global, expected);
        assert_eq!(state.round, 2);
    }

    #[test]
    fn registry_changes_exactly_for_selected_clients() {
        let (mut state, mut clients, cfg) = setup(6, 5);
        let policy = SelectionPolicy::new(PolicyKind::FedabcThreshold, cfg.total_rounds, 6).unwrap();
        let mut total = 0;
        for _ in 0..cfg.total_rounds {
            let before = state.registry.clone();
            let m = run_round(&mut state, &mut clients, &policy, &cfg).unwrap();
            for k in 0..6 {
                assert_eq!(state.registry[k] != before[k], m.decision.mask()[k], "client {k}");
                assert_eq!(clients[k].last_uploaded, state.registry[k]);
            }
            assert_eq!(m.participation_ratio, m.num_selected as f64 / 6.0);
            total += m.num_selected;
        }
        assert!(total < 6 * cfg.total_rounds);
        assert!(
            run_round(&mut state, &mut clients, &policy, &cfg).is_err(),
            "past the horizon"
        );
    }

    #[test]
    fn forced_all_select_matches_fedavg() {
        let (mut a_state, mut a_clients, cfg) = setup(5, 6);
        let (mut b_state, mut b_clients, _) = setup(5, 6);
        let fedavg = SelectionPolicy::new(PolicyKind::FedavgAll, cfg.total_rounds, 5).unwrap();
        for _ in 0..cfg.total_rounds {
            run_round(&mut a_state, &mut a_clients, &fedavg, &cfg).unwrap();
            run_round_with(&mut b_state, &mut b_clients, &cfg, |r| {
                baseline_select_all(r.num_clients())
            })
            .unwrap();
        }
        assert_eq!(a_state.global, b_state.global);
    }

    #[test]
    fn threshold_one_with_equal_scores_matches_fedavg() {
        // Identical data on every client gives identical values; identical
        // registries give a uniform compatibility matrix, hence equal scores.
        let (state, clients, cfg) = setup(1, 7);
        let data = clients[0].data.clone();
        let arch = *state.global.arch();
        let build = || {
            let (mut s, c) = round_zero(
                vec![data.clone(); 4],
                arch,
                state.unlabeled.clone(),
                state.test.clone(),
                7,
                GlobalInit::Fresh,
            )
            .unwrap();
            let same = s.registry[0].clone();
            s.registry.iter_mut().for_each(|m| *m = same.clone());
            (s, c)
        };
        let (mut sa, mut ca) = build();
        let (mut sb, mut cb) = build();
        let cfg1 = ProtocolConfig { total_rounds: 1, ..cfg };
        let ma = run_round_with(&mut sa, &mut ca, &cfg1, |r| {
            let mask = select_by_threshold(&r.scores, 1.0)?;
            let w = aggregation_weights(&r.scores, &mask)?;
            SelectionDecision::new(mask, w, Some(1.0))
        })
        .unwrap();
        let fedavg = SelectionPolicy::new(PolicyKind::FedavgAll, 1, 4).unwrap();
        run_round(&mut sb, &mut cb, &fedavg, &cfg1).unwrap();
        assert!(ma.decision.weights().iter().all(|&w| w == 0.25));
        assert_eq!(sa.global, sb.global);
    }
}
