//! Attention scores: prediction divergence between client models on the
//! server probe set, softmax compatibility over negated distances, and the
//! compatibility-weighted sum of client values.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{ce_loss, forward_probs, LabeledDataset, ModelParams, UnlabeledDataset, PROB_FLOOR};

const SIMPLEX_TOL: f64 = 1e-6;

/// `(1/N) * sum_n p_n ln(p_n / q_n)`, with `q` floored at [`PROB_FLOOR`] and
/// `0 ln 0 = 0`. Not symmetric.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            context: "kl_divergence",
            expected: p.len(),
            got: q.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::invalid("kl_divergence of empty distributions"));
    }
    for (name, dist) in [("P", p), ("Q", q)] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || dist.iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(Error::invalid(format!(
                "{name} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pn, &qn) in p.iter().zip(q) {
        if pn > 0.0 {
            acc += pn * (pn / qn.max(PROB_FLOOR)).ln();
        }
    }
    // Flooring q can push a near-zero divergence a hair below zero.
    (acc / p.len() as f64).max(0.0)
}

/// `d[k][j]`: mean over probe samples of the divergence from model `k`'s
/// predictive distribution to model `j`'s. The diagonal is exactly zero.
pub fn pairwise_distances(registry: &[ModelParams], probe: &UnlabeledDataset) -> Result<Matrix> {
    if registry.is_empty() {
        return Err(Error::invalid("pairwise_distances needs at least one model"));
    }
    if probe.is_empty() {
        return Err(Error::EmptyDataset("pairwise_distances"));
    }
    let classes = registry[0].arch().num_classes();
    if let Some(m) = registry.iter().find(|m| m.arch().num_classes() != classes) {
        return Err(Error::DimensionMismatch {
            context: "pairwise_distances (class count)",
            expected: classes,
            got: m.arch().num_classes(),
        });
    }
    let probs: Vec<Matrix> = registry
        .par_iter()
        .map(|m| forward_probs(m, probe.features()))
        .collect::<Result<_>>()?;

    let k = registry.len();
    let n = probe.len() as f64;
    let mut d = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let total: f64 = probs[a]
                .iter_rows()
                .zip(probs[b].iter_rows())
                .map(|(p, q)| kl_unchecked(p, q))
                .sum();
            d.set(a, b, total / n);
        }
    }
    Ok(d)
}

/// Row-wise softmax of `-d`, including the self term.
pub fn compatibility(d: &Matrix) -> Result<Matrix> {
    if d.rows() != d.cols() {
        return Err(Error::DimensionMismatch {
            context: "compatibility (square matrix)",
            expected: d.rows(),
            got: d.cols(),
        });
    }
    if d.as_slice().iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::invalid("distances must be finite and non-negative"));
    }
    let k = d.rows();
    let mut c = Matrix::zeros(k, k);
    for i in 0..k {
        let row = d.row(i);
        let shift = row.iter().copied().fold(f64::INFINITY, f64::min);
        let out = c.row_mut(i);
        let mut sum = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (shift - x).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
    }
    Ok(c)
}

/// Loss of the received global model on the client's private data.
pub fn client_value(client_data: &LabeledDataset, global: &ModelParams) -> Result<f64> {
    ce_loss(global, client_data)
}

/// `S = c v`.
pub fn attention_scores(c: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if c.rows() != c.cols() || c.cols() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "attention_scores",
            expected: c.cols(),
            got: v.len(),
        });
    }
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::invalid("values must be finite and non-negative"));
    }
    Ok(c.iter_rows()
        .map(|row| row.iter().zip(v).map(|(ckj, vj)| ckj * vj).sum())
        .collect())
}
