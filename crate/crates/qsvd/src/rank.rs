//! Per-singular-value importance scoring and global rank allocation.
//!
//! The direct score materializes each rank-one truncation delta and takes
//! its Frobenius inner product with the per-sample QKV gradient; the
//! identity form evaluates the same quantity as sigma_i^2 [U^T G V]_(i,i)^2
//! in O(E^2) memory. Allocation globally sorts all singular values by score
//! and keeps the top k, with a per-layer floor of rank 1.

use crate::error::{Error, Result};
use crate::factorize::{reconstruct_qkv, LayerFactors};
use crate::model::{GradientRecord, ToyModel};
use crate::store::CalibrationSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub layer: usize,
    pub sv_index: usize,
    pub sigma: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub method: String,
    pub num_samples: usize,
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceTable {
    pub fn num_layers(&self) -> usize {
        self.entries.iter().map(|e| e.layer + 1).max().unwrap_or(0)
    }
}

/// Gradient records organized as [sample][layer].
fn check_grads(factors: &[LayerFactors], grads: &[Vec<GradientRecord>]) -> Result<()> {
    for (si, per_layer) in grads.iter().enumerate() {
        for (li, _) in factors.iter().enumerate() {
            if !per_layer.iter().any(|g| g.layer_index == li) {
                return Err(Error::InvalidArgument(format!(
                    "missing gradient record for layer {li}, sample {si}"
                )));
            }
        }
    }
    if grads.is_empty() {
        return Err(Error::InvalidArgument("no gradient samples".into()));
    }
    Ok(())
}

fn grad_for<'a>(grads: &'a [GradientRecord], layer: usize) -> &'a GradientRecord {
    grads.iter().find(|g| g.layer_index == layer).expect("checked")
}

/// Literal evaluation: materializes Delta W = sigma_i u_i v_i^T per value.
pub fn score_direct(
    factors: &[LayerFactors],
    grads: &[Vec<GradientRecord>],
) -> Result<ImportanceTable> {
    check_grads(factors, grads)?;
    let n = grads.len();
    let mut entries = Vec::new();
    for (li, f) in factors.iter().enumerate() {
        for i in 0..f.rank {
            let mut acc = 0.0;
            for per_layer in grads {
                let g = grad_for(per_layer, li).concat();
                // <sigma_i u_i v_i^T, G>_F computed without forming the
                // outer product row by row.
                let mut inner = 0.0;
                for j in 0..f.u.rows() {
                    let uj = f.u.get(j, i);
                    if uj == 0.0 {
                        continue;
                    }
                    let grow = g.row(j);
                    let vrow = f.vt.row(i);
                    let dot: f64 = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    inner += uj * dot;
                }
                inner *= f.sigma_retained[i];
                acc += inner * inner;
            }
            entries.push(ImportanceEntry {
                layer: li,
                sv_index: i,
                sigma: f.sigma_retained[i],
                score: acc / n as f64,
            });
        }
    }
    Ok(ImportanceTable {
        method: "direct".into(),
        num_samples: n,
        entries,
    })
}

fn identity_scores(
    factors: &[LayerFactors],
    grads: &[Vec<GradientRecord>],
    whiten_gradient: bool,
    method: &str,
) -> Result<ImportanceTable> {
    check_grads(factors, grads)?;
    let n = grads.len();
    let mut entries = Vec::new();
    for (li, f) in factors.iter().enumerate() {
        let mut scores = vec![0.0; f.rank];
        for per_layer in grads {
            let g = grad_for(per_layer, li).concat();
            // Map the gradient into the whitened space: G~ = S^-T G.
            let g = if whiten_gradient {
                f.whitening.apply_rows_inverse(&g)
            } else {
                g
            };
            for i in 0..f.rank {
                // [U^T G V]_(i,i) = u_i^T G v_i
                let mut diag = 0.0;
                for j in 0..f.u.rows() {
                    let uj = f.u.get(j, i);
                    if uj == 0.0 {
                        continue;
                    }
                    let dot: f64 = g.row(j).iter().zip(f.vt.row(i)).map(|(a, b)| a * b).sum();
                    diag += uj * dot;
                }
                let term = f.sigma_retained[i] * diag;
                scores[i] += term * term;
            }
        }
        for (i, s) in scores.into_iter().enumerate() {
            entries.push(ImportanceEntry {
                layer: li,
                sv_index: i,
                sigma: f.sigma_retained[i],
                score: s / n as f64,
            });
        }
    }
    Ok(ImportanceTable {
        method: method.into(),
        num_samples: n,
        entries,
    })
}

/// Memory-light identity form, sigma_i^2 [U^T G V]_(i,i)^2.
pub fn score_identity(
    factors: &[LayerFactors],
    grads: &[Vec<GradientRecord>],
) -> Result<ImportanceTable> {
    identity_scores(factors, grads, false, "identity")
}

/// Whitened identity form: the gradient is mapped through S^-T into the
/// space the SVD was taken in.
pub fn score_identity_whitened(
    factors: &[LayerFactors],
    grads: &[Vec<GradientRecord>],
) -> Result<ImportanceTable> {
    for f in factors {
        if f.whitening.diag.iter().any(|&d| d == 0.0) {
            return Err(Error::InvalidArgument("singular whitening transform".into()));
        }
    }
    identity_scores(factors, grads, true, "identity_whitened")
}

/// Exact loss change from zeroing one singular value:
/// L_t(W) - L_t(W'_sigma_i), by full re-evaluation.
pub fn oracle_loss_delta(
    model: &ToyModel,
    factors: &LayerFactors,
    layer: usize,
    sv_index: usize,
    calib: &CalibrationSet,
) -> Result<f64> {
    oracle_loss_delta_scaled(model, factors, layer, sv_index, calib, 1.0)
}

/// Like [`oracle_loss_delta`] but scales sigma_i by (1 - epsilon) instead
/// of zeroing it; epsilon = 1 reproduces the full truncation.
pub fn oracle_loss_delta_scaled(
    model: &ToyModel,
    factors: &LayerFactors,
    layer: usize,
    sv_index: usize,
    calib: &CalibrationSet,
    epsilon: f64,
) -> Result<f64> {
    if layer >= model.layers.len() {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    if sv_index >= factors.rank {
        return Err(Error::InvalidArgument(format!(
            "sv_index {sv_index} out of rank {}",
            factors.rank
        )));
    }
    let mut perturbed = factors.clone();
    perturbed.sigma_retained[sv_index] *= 1.0 - epsilon;
    // Rebuild the split so the scaled sigma propagates to both factors.
    let perturbed = perturbed.with_beta(perturbed.beta)?;
    let (wq, wk, wv) = reconstruct_qkv(&perturbed)?;
    let mut modified = model.clone();
    modified.layers[layer].w_q = wq;
    modified.layers[layer].w_k = wk;
    modified.layers[layer].w_v = wv;
    // Baseline uses the same factorized weights with sigma untouched, so
    // the delta isolates the truncation (not the factorization error).
    let (bq, bk, bv) = reconstruct_qkv(factors)?;
    let mut baseline = model.clone();
    baseline.layers[layer].w_q = bq;
    baseline.layers[layer].w_k = bk;
    baseline.layers[layer].w_v = bv;
    Ok(baseline.loss_only(calib)? - modified.loss_only(calib)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankAllocation {
    pub budget: usize,
    /// Serialized as (layer, rank) pairs: JSON object keys would stringify
    /// the layer indices.
    #[serde(with = "map_as_pairs")]
    pub per_layer_rank: BTreeMap<usize, usize>,
    /// Retained (layer, sv_index) pairs, sorted.
    pub retained: Vec<(usize, usize)>,
}

mod map_as_pairs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<usize, usize>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<usize, usize>, D::Error> {
        Ok(Vec::<(usize, usize)>::deserialize(d)?.into_iter().collect())
    }
}

/// Global top-k selection with a per-layer floor of rank 1. Ties break by
/// larger sigma, then lower layer index, then lower sv_index.
pub fn allocate(table: &ImportanceTable, budget: usize) -> Result<RankAllocation> {
    let num_layers = table.num_layers();
    if num_layers == 0 {
        return Err(Error::InvalidArgument("empty importance table".into()));
    }
    if budget < num_layers {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} infeasible: the rank-1 floor needs at least {num_layers}"
        )));
    }
    for e in &table.entries {
        if !e.score.is_finite() || e.score < 0.0 {
            return Err(Error::NonFinite(format!(
                "importance score at layer {} sv {}",
                e.layer, e.sv_index
            )));
        }
    }
    let mut order: Vec<&ImportanceEntry> = table.entries.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(b.sigma.partial_cmp(&a.sigma).unwrap())
            .then(a.layer.cmp(&b.layer))
            .then(a.sv_index.cmp(&b.sv_index))
    });

    let mut retained: Vec<(usize, usize)> = Vec::new();
    // Floor: each layer keeps its best-scoring singular value.
    for layer in 0..num_layers {
        if let Some(best) = order.iter().find(|e| e.layer == layer) {
            retained.push((best.layer, best.sv_index));
        } else {
            return Err(Error::InvalidArgument(format!(
                "importance table has no entries for layer {layer}"
            )));
        }
    }
    let target = budget.min(table.entries.len());
    for e in &order {
        if retained.len() >= target {
            break;
        }
        if !retained.contains(&(e.layer, e.sv_index)) {
            retained.push((e.layer, e.sv_index));
        }
    }
    retained.sort();
    let mut per_layer_rank = BTreeMap::new();
    for layer in 0..num_layers {
        per_layer_rank.insert(layer, 0usize);
    }
    for &(layer, _) in &retained {
        *per_layer_rank.get_mut(&layer).unwrap() += 1;
    }
    Ok(RankAllocation {
        budget,
        per_layer_rank,
        retained,
    })
}
