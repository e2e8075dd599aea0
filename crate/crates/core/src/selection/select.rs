use serde::Serialize;

use crate::error::{Error, Result};

/// Mask, aggregation weights, and the cutoff that produced the mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionDecision {
    mask: Vec<bool>,
    weights: Vec<f64>,
    cutoff: Option<f64>,
}

impl SelectionDecision {
    /// Fails unless at least one client is selected, weights vanish outside
    /// the mask, and the weights sum to one.
    pub fn new(mask: Vec<bool>, weights: Vec<f64>, cutoff: Option<f64>) -> Result<Self> {
        if mask.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                context: "SelectionDecision::new",
                expected: mask.len(),
                got: weights.len(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("a selection must include at least one client"));
        }
        if mask
            .iter()
            .zip(&weights)
            .any(|(&m, &w)| w < 0.0 || !w.is_finite() || (!m && w != 0.0))
        {
            return Err(Error::invalid("weights must be non-negative and zero outside the mask"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights must sum to 1, got {sum}")));
        }
        Ok(Self { mask, weights, cutoff })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `tau_t` for the threshold rule, `lambda / eta_t` for the lambda rule.
    pub fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }

    pub fn num_selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("no clients to select from"));
    }
    if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid("scores must be finite and non-negative"));
    }
    Ok(())
}

/// Client indices by descending score, ties to the lowest index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// `m_k = 1` iff `S_k > lambda / eta_t`. Falls back to the single best client
/// when nobody clears the bar.
pub fn select_by_lambda(scores: &[f64], lambda: f64, eta_t: f64) -> Result<Vec<bool>> {
    check_scores(scores)?;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::config("lambda", format!("must be positive, got {lambda}")));
    }
    if !(eta_t > 0.0 && eta_t <= 1.0) {
        return Err(Error::invalid(format!("eta must lie in (0, 1], got {eta_t}")));
    }
    let cutoff = lambda / eta_t;
    let mut mask: Vec<bool> = scores.iter().map(|&s| s > cutoff).collect();
    if !mask.iter().any(|&m| m) {
        mask[ranked(scores)[0]] = true;
    }
    Ok(mask)
}

/// Greedy cumulative rule: normalise scores to sum one, take clients in
/// descending order until the running total exceeds `tau_t`.
///
/// `tau_t >= 1` and all-zero scores select everyone.
pub fn select_by_threshold(scores: &[f64], tau_t: f64) -> Result<Vec<bool>> {
    check_scores(scores)?;
    if !(tau_t.is_finite() && tau_t > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau_t}")));
    }
    let total: f64 = scores.iter().sum();
    if total == 0.0 || tau_t >= 1.0 {
        return Ok(vec![true; scores.len()]);
    }
    let mut mask = vec![false; scores.len()];
    let mut cumulative = 0.0;
    for k in ranked(scores) {
        mask[k] = true;
        cumulative += scores[k] / total;
        if cumulative > tau_t {
            break;
        }
    }
    Ok(mask)
}

/// Score-proportional weights over the selected clients; uniform over the
/// selection if every selected score is zero.
pub fn aggregation_weights(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    check_scores(scores)?;
    if scores.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregation_weights",
            expected: scores.len(),
            got: mask.len(),
        });
    }
    let selected = mask.iter().filter(|&&m| m).count();
    if selected == 0 {
        return Err(Error::invalid("aggregation needs at least one selected client"));
    }
    let total: f64 = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(s, _)| s).sum();
    Ok(if total == 0.0 {
        uniform_over(mask, selected)
    } else {
        scores
            .iter()
            .zip(mask)
            .map(|(&s, &m)| if m { s / total } else { 0.0 })
            .collect()
    })
}

fn uniform_over(mask: &[bool], selected: usize) -> Vec<f64> {
    let w = 1.0 / selected as f64;
    mask.iter().map(|&m| if m { w } else { 0.0 }).collect()
}

/// FedAvg: everyone, uniform weights.
pub fn baseline_select_all(num_clients: usize) -> Result<SelectionDecision> {
    if num_clients == 0 {
        return Err(Error::invalid("no clients to select from"));
    }
    let mask = vec![true; num_clients];
    let weights = uniform_over(&mask, num_clients);
    SelectionDecision::new(mask, weights, None)
}

/// Loss-ranked baseline: the `n_t` clients with the highest value, uniform weights.
pub fn baseline_cho_select(values: &[f64], n_t: usize) -> Result<SelectionDecision> {
    check_scores(values)?;
    if n_t == 0 || n_t > values.len() {
        return Err(Error::invalid(format!(
            "cannot select {n_t} of {} clients",
            values.len()
        )));
    }
    let mut mask = vec![false; values.len()];
    for k in ranked(values).into_iter().take(n_t) {
        mask[k] = true;
    }
    let weights = uniform_over(&mask, n_t);
    SelectionDecision::new(mask, weights, None)
}

/// Fractions of clients taken per round by the loss-ranked baseline over a
/// 20-round horizon.
const CHO_PARTICIPATION: [f64; 20] = [
    0.2, 0.3, 0.3, 0.4, 0.4, 0.5, 0.5, 0.6, 0.6, 0.7, 0.7, 0.8, 0.8, 0.9, 0.9, 0.9, 1.0, 1.0, 1.0, 1.0,
];

/// Per-round client counts for the loss-ranked baseline, resampled from the
/// 20-round participation curve onto `total_rounds` and scaled to `num_clients`.
pub fn default_cho_counts(total_rounds: usize, num_clients: usize) -> Vec<usize> {
    let len = CHO_PARTICIPATION.len();
    (0..total_rounds)
        .map(|t| {
            let frac = CHO_PARTICIPATION[t * len / total_rounds];
            ((frac * num_clients as f64).round() as usize).clamp(1, num_clients.max(1))
        })
        .collect()
}
