//! Shared oracle implementations for the integration tests. These
//! deliberately avoid the library's fast paths: scores are computed by
//! materializing each rank-one component explicitly, and loss deltas by
//! full re-evaluation, so agreement with the production code is a genuine
//! cross-check.

use qsvd::factorize::LayerFactors;
use qsvd::linalg::DenseMatrix;
use qsvd::model::{GradientRecord, ToyModel};
use qsvd::store::{generate_toy_checkpoint, ModelConfig};

pub fn toy_config(num_layers: usize, embed_dim: usize, num_heads: usize) -> ModelConfig {
    ModelConfig {
        num_layers,
        embed_dim,
        num_heads,
        head_dim: embed_dim / num_heads,
        uses_rope: false,
        vocab_or_input_dim: embed_dim,
    }
}

pub fn toy_model(config: &ModelConfig, seed: u64) -> ToyModel {
    let tensors = generate_toy_checkpoint(config, seed);
    ToyModel::from_tensors(config, &tensors).unwrap()
}

fn grad_for<'a>(grads: &'a [GradientRecord], layer: usize) -> &'a GradientRecord {
    grads
        .iter()
        .find(|g| g.layer_index == layer)
        .expect("gradient record present")
}

/// Explicit rank-one materialization: for each retained singular value,
/// forms Delta W = sigma_i u_i v_i^T as a full E x 3E matrix and takes
/// its Frobenius inner product with each per-sample gradient. O(E^3)
/// per layer; refuses E > 32 to keep that honest.
pub fn oracle_direct_scores(
    factors: &[LayerFactors],
    grads: &[Vec<GradientRecord>],
) -> Vec<Vec<f64>> {
    oracle_scores_impl(factors, grads, false)
}

/// Whitened variant: the gradient rows are divided by the whitening
/// diagonal before the inner product, matching the space the
/// factorization was taken in.
pub fn oracle_direct_scores_whitened(
    factors: &[LayerFactors],
    grads: &[Vec<GradientRecord>],
) -> Vec<Vec<f64>> {
    oracle_scores_impl(factors, grads, true)
}

fn oracle_scores_impl(
    factors: &[LayerFactors],
    grads: &[Vec<GradientRecord>],
    whiten: bool,
) -> Vec<Vec<f64>> {
    let n = grads.len();
    let mut out = Vec::with_capacity(factors.len());
    for (li, f) in factors.iter().enumerate() {
        let e = f.u.rows();
        assert!(e <= 32, "oracle refuses embed dims above 32 (got {e})");
        let mut layer_scores = Vec::with_capacity(f.rank);
        for i in 0..f.rank {
            // Full outer product, no shortcuts.
            let mut delta = DenseMatrix::zeros(e, f.vt.cols());
            for r in 0..e {
                for c in 0..f.vt.cols() {
                    delta.set(r, c, f.sigma_retained[i] * f.u.get(r, i) * f.vt.get(i, c));
                }
            }
            let mut acc = 0.0;
            for per_layer in grads {
                let mut g = grad_for(per_layer, li).concat();
                if whiten {
                    for r in 0..g.rows() {
                        let s = f.whitening.diag[r];
                        for v in g.row_mut(r) {
                            *v /= s;
                        }
                    }
                }
                let inner = delta.frobenius_dot(&g).unwrap();
                acc += inner * inner;
            }
            layer_scores.push(acc / n as f64);
        }
        out.push(layer_scores);
    }
    out
}

/// Spearman rank correlation of two equally long samples. Ties get the
/// average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    num / (da.sqrt() * db.sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
