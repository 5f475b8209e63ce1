//! Importance weights for the energy-weighted objective.
//!
//! Log-weights are `-E(x)/T - log q(x)`; they are only ever exponentiated
//! after subtracting the batch maximum, so the unknown partition function
//! cancels.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ClipPolicy {
    None,
    /// Cap `-E/T` at its batch percentile before subtracting `log q`.
    ClipEnergy { percentile: f64 },
    /// Cap the full log-weight at its batch percentile.
    ClipLogweight { percentile: f64 },
}

impl Default for ClipPolicy {
    fn default() -> Self {
        ClipPolicy::ClipLogweight { percentile: 99.9 }
    }
}

impl ClipPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ClipPolicy::None => Ok(()),
            ClipPolicy::ClipEnergy { percentile } | ClipPolicy::ClipLogweight { percentile } => {
                if *percentile > 0.0 && *percentile <= 100.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("clip percentile {percentile} not in (0, 100]")))
                }
            }
        }
    }

    fn percentile(&self) -> Option<f64> {
        match self {
            ClipPolicy::None => None,
            ClipPolicy::ClipEnergy { percentile } | ClipPolicy::ClipLogweight { percentile } => Some(*percentile),
        }
    }
}

/// Log-weights with bookkeeping; dropped entries hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWeights {
    pub values: Vec<f64>,
    pub dropped: usize,
    pub clipped: usize,
}

/// Normalized weights of one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatch {
    pub endpoints: Vec<Vec<f64>>,
    pub log_unnorm_weights: Vec<f64>,
    pub norm_weights: Vec<f64>,
}

impl WeightedBatch {
    pub fn new(endpoints: Vec<Vec<f64>>, log_unnorm_weights: Vec<f64>) -> Result<Self> {
        if endpoints.len() != log_unnorm_weights.len() {
            return Err(Error::Internal("endpoint and weight counts differ".into()));
        }
        let norm_weights = normalize_weights(&log_unnorm_weights)?;
        Ok(Self {
            endpoints,
            log_unnorm_weights,
            norm_weights,
        })
    }

    pub fn ess(&self) -> f64 {
        weight_ess(&self.norm_weights)
    }
}

/// `-E_i / T - log_prop_i`. Entries with a non-finite energy or proposal
/// density are dropped (`-inf`) and counted.
pub fn compute_log_weights(energies: &[f64], temperature: f64, log_prop: &[f64]) -> Result<LogWeights> {
    if energies.len() != log_prop.len() {
        return Err(Error::Internal("energy and density counts differ".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }
    let mut dropped = 0;
    let values = energies
        .iter()
        .zip(log_prop)
        .map(|(&e, &lq)| {
            let v = -e / temperature - lq;
            if e.is_finite() && lq.is_finite() && v.is_finite() {
                v
            } else {
                dropped += 1;
                f64::NEG_INFINITY
            }
        })
        .collect();
    if dropped > 0 {
        warn!("dropped {dropped} samples with non-finite energy or proposal density");
    }
    Ok(LogWeights {
        values,
        dropped,
        clipped: 0,
    })
}

/// Nearest-rank percentile of the finite entries: the `ceil(p n / 100)`-th
/// smallest value.
pub fn nearest_rank_percentile(values: &[f64], percentile: f64) -> Option<f64> {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return None;
    }
    finite.sort_by(|a, b| a.total_cmp(b));
    let n = finite.len();
    // guard against p * n / 100 landing a hair above an integer
    let rank = ((percentile * n as f64 / 100.0) - 1e-9).ceil() as usize;
    Some(finite[rank.clamp(1, n) - 1])
}

/// Caps every value at the batch percentile threshold. Returns the capped
/// values and the number of entries changed.
pub fn clip_log_weights(values: &[f64], policy: &ClipPolicy) -> (Vec<f64>, usize) {
    let Some(p) = policy.percentile() else {
        return (values.to_vec(), 0);
    };
    let Some(tau) = nearest_rank_percentile(values, p) else {
        return (values.to_vec(), 0);
    };
    let mut count = 0;
    let out = values
        .iter()
        .map(|&v| {
            if v > tau {
                count += 1;
                tau
            } else {
                v
            }
        })
        .collect();
    (out, count)
}

/// Log-weights of a minibatch under a clip policy. The percentile threshold
/// is computed from this batch's unclipped values.
pub fn clipped_log_weights(
    energies: &[f64],
    temperature: f64,
    log_prop: &[f64],
    policy: &ClipPolicy,
) -> Result<LogWeights> {
    match policy {
        ClipPolicy::ClipEnergy { .. } => {
            let base = compute_log_weights(energies, temperature, log_prop)?;
            let neg_energy: Vec<f64> = energies
                .iter()
                .zip(&base.values)
                .map(|(&e, &w)| if w.is_finite() { -e / temperature } else { f64::NEG_INFINITY })
                .collect();
            let (capped, clipped) = clip_log_weights(&neg_energy, policy);
            let values = capped
                .iter()
                .zip(log_prop)
                .map(|(&ne, &lq)| if ne.is_finite() { ne - lq } else { f64::NEG_INFINITY })
                .collect();
            Ok(LogWeights {
                values,
                dropped: base.dropped,
                clipped,
            })
        }
        _ => {
            let mut w = compute_log_weights(energies, temperature, log_prop)?;
            let (values, clipped) = clip_log_weights(&w.values, policy);
            w.values = values;
            w.clipped = clipped;
            Ok(w)
        }
    }
}

/// Max-shifted softmax.
pub fn normalize_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::InvalidInput("log-weights contain NaN or +inf".into()));
    }
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::DegenerateBatch);
    }
    let exps: Vec<f64> = log_w.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `sum_i w_i g_i`, summed in index order. Zero-weight entries are skipped
/// so that their gradients may be absent or non-finite.
pub fn snis_gradient(per_sample_grads: &[Vec<f64>], norm_weights: &[f64]) -> Result<Vec<f64>> {
    if per_sample_grads.len() != norm_weights.len() {
        return Err(Error::Internal(format!(
            "{} gradients but {} weights",
            per_sample_grads.len(),
            norm_weights.len()
        )));
    }
    let len = per_sample_grads
        .iter()
        .zip(norm_weights)
        .find(|(_, &w)| w != 0.0)
        .map(|(g, _)| g.len())
        .ok_or(Error::DegenerateBatch)?;
    let mut out = vec![0.0; len];
    for (g, &w) in per_sample_grads.iter().zip(norm_weights) {
        if w == 0.0 {
            continue;
        }
        if g.len() != len {
            return Err(Error::Internal("gradient lengths differ".into()));
        }
        for (o, gi) in out.iter_mut().zip(g) {
            *o += w * gi;
        }
    }
    Ok(out)
}

/// `sum_i w_i loss_i` (monitoring only).
pub fn ewfm_loss_estimate(losses: &[f64], norm_weights: &[f64]) -> Result<f64> {
    if losses.len() != norm_weights.len() {
        return Err(Error::Internal("loss and weight counts differ".into()));
    }
    Ok(losses
        .iter()
        .zip(norm_weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|(l, w)| l * w)
        .sum())
}

/// `1 / sum_i w_i^2`.
pub fn weight_ess(norm_weights: &[f64]) -> f64 {
    1.0 / norm_weights.iter().map(|w| w * w).sum::<f64>()
}
