//! Closed-form parameter, cache, and FLOP accounting.
//!
//! Per layer at sequence length L and width E:
//!   dense          alpha = 3E^2, eta = 2LE, gamma = 3LE^2
//!   joint SVD      alpha = 4rE,  eta = rL,  gamma = 4LrE
//!   per-matrix SVD alpha = 6rE,  eta = 2rL, gamma = 6LrE
//! R1 = alpha/alpha_dense = gamma/gamma_dense; R2 = eta/eta_dense.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Dense,
    PerMatrixSvd,
    JointSvd,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Scheme::Dense),
            "per-matrix-svd" => Ok(Scheme::PerMatrixSvd),
            "joint-svd" => Ok(Scheme::JointSvd),
            other => Err(Error::Usage(format!("unknown cost scheme '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub rank: usize,
    pub alpha: u64,
    pub eta: u64,
    pub gamma: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub scheme: Scheme,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub alpha: u64,
    pub eta: u64,
    pub gamma: u64,
    pub r1: f64,
    pub r2: f64,
    pub per_layer: Vec<LayerCost>,
}

/// Per-layer closed forms summed over `ranks` (ranks are ignored for the
/// dense scheme but still bound-checked).
pub fn cost(scheme: Scheme, embed_dim: usize, seq_len: usize, ranks: &[usize]) -> Result<CostReport> {
    if embed_dim == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument("E and L must be >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("at least one layer required".into()));
    }
    let (e, l) = (embed_dim as u64, seq_len as u64);
    let mut per_layer = Vec::with_capacity(ranks.len());
    for (li, &r) in ranks.iter().enumerate() {
        if r == 0 || r > embed_dim {
            return Err(Error::InvalidArgument(format!(
                "layer {li}: rank {r} outside [1, {embed_dim}]"
            )));
        }
        let r = r as u64;
        let (alpha, eta, gamma) = match scheme {
            Scheme::Dense => (3 * e * e, 2 * l * e, 3 * l * e * e),
            Scheme::JointSvd => (4 * r * e, r * l, 4 * l * r * e),
            Scheme::PerMatrixSvd => (6 * r * e, 2 * r * l, 6 * l * r * e),
        };
        per_layer.push(LayerCost {
            layer: li,
            rank: ranks[li],
            alpha,
            eta,
            gamma,
        });
    }
    let alpha: u64 = per_layer.iter().map(|c| c.alpha).sum();
    let eta: u64 = per_layer.iter().map(|c| c.eta).sum();
    let gamma: u64 = per_layer.iter().map(|c| c.gamma).sum();
    let dense_alpha = 3 * e * e * ranks.len() as u64;
    let dense_eta = 2 * l * e * ranks.len() as u64;
    Ok(CostReport {
        scheme,
        embed_dim,
        seq_len,
        alpha,
        eta,
        gamma,
        r1: alpha as f64 / dense_alpha as f64,
        r2: eta as f64 / dense_eta as f64,
        per_layer,
    })
}

/// Total rank budget matching a target cache ratio R2 = sum(r) / (2E * layers).
pub fn budget_for_ratio(target_r2: f64, embed_dim: usize, num_layers: usize) -> Result<usize> {
    if !(target_r2 > 0.0 && target_r2 <= 1.0) {
        return Err(Error::Usage(format!(
            "target R2 {target_r2} outside (0, 1]"
        )));
    }
    let k = (target_r2 * 2.0 * embed_dim as f64 * num_layers as f64).round() as usize;
    if k < num_layers {
        return Err(Error::Usage(format!(
            "target R2 {target_r2} yields budget {k} below the per-layer floor ({num_layers})"
        )));
    }
    Ok(k)
}
