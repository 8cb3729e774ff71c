//! Joint SVD over concatenated QKV weights.
//!
//! The E x 3E concatenation [W_q, W_k, W_v] is factorized once; the
//! singular spectrum is split as Sigma^beta into the shared down-projection
//! and Sigma^(1-beta) into the per-role up-projections. Optional
//! activation-aware whitening scales the input dimension before the SVD
//! (SVD of S*W_concat) and folds S^-1 back into the down-projection so the
//! layer still consumes raw activations.

use crate::error::{Error, Result};
use crate::linalg::{matmul, svd, DenseMatrix};
use crate::model::AttentionLayerWeights;
use serde::{Deserialize, Serialize};

pub const WHITENING_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningKind {
    None,
    Activation,
}

/// Diagonal input-side scaling S.
#[derive(Debug, Clone)]
pub struct WhiteningTransform {
    pub kind: WhiteningKind,
    /// Diagonal of S, length E.
    pub diag: Vec<f64>,
}

impl WhiteningTransform {
    pub fn identity(dim: usize) -> Self {
        WhiteningTransform {
            kind: WhiteningKind::None,
            diag: vec![1.0; dim],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == WhiteningKind::None
    }

    /// S * m (scales row j by diag[j]).
    pub fn apply_rows(&self, m: &DenseMatrix) -> DenseMatrix {
        let mut out = m.clone();
        for (j, &s) in self.diag.iter().enumerate() {
            out.scale_row(j, s);
        }
        out
    }

    /// S^-1 * m.
    pub fn apply_rows_inverse(&self, m: &DenseMatrix) -> DenseMatrix {
        let mut out = m.clone();
        for (j, &s) in self.diag.iter().enumerate() {
            out.scale_row(j, 1.0 / s);
        }
        out
    }
}

/// Channelwise absolute-max whitening over the calibration activations of
/// one layer. Zero channels are floored (with a warning) so S stays
/// invertible.
pub fn compute_whitening(layer_inputs: &[DenseMatrix]) -> Result<WhiteningTransform> {
    let first = layer_inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("whitening needs at least one sample".into()))?;
    let dim = first.cols();
    let mut diag = vec![0.0_f64; dim];
    for x in layer_inputs {
        if x.cols() != dim {
            return Err(Error::InvalidArgument(
                "whitening inputs disagree on channel count".into(),
            ));
        }
        for r in 0..x.rows() {
            for (j, v) in x.row(r).iter().enumerate() {
                diag[j] = diag[j].max(v.abs());
            }
        }
    }
    for (j, d) in diag.iter_mut().enumerate() {
        if *d < WHITENING_FLOOR {
            eprintln!("warning: whitening channel {j} is degenerate; flooring at {WHITENING_FLOOR}");
            *d = WHITENING_FLOOR;
        }
    }
    Ok(WhiteningTransform {
        kind: WhiteningKind::Activation,
        diag,
    })
}

/// Per-layer compressed attention weights.
#[derive(Debug, Clone)]
pub struct LayerFactors {
    pub rank: usize,
    pub beta: f64,
    /// Retained singular values, descending.
    pub sigma_retained: Vec<f64>,
    /// E x r shared down-projection, S^-1 * U * Sigma^beta.
    pub w_down: DenseMatrix,
    /// r x E up-projections, Sigma^(1-beta) * Vt split per role.
    pub w_up_q: DenseMatrix,
    pub w_up_k: DenseMatrix,
    pub w_up_v: DenseMatrix,
    pub whitening: WhiteningTransform,
    /// Left singular vectors of the whitened concatenation, E x r.
    pub u: DenseMatrix,
    /// Right singular vectors, r x 3E.
    pub vt: DenseMatrix,
}

impl LayerFactors {
    pub fn embed_dim(&self) -> usize {
        self.w_down.rows()
    }

    /// S^-1 * U, the down-projection before the Sigma^beta column scaling.
    pub fn w_r_down(&self) -> DenseMatrix {
        self.whitening.apply_rows_inverse(&self.u)
    }

    /// r x 3E concatenated up-projection [w_up_q | w_up_k | w_up_v].
    pub fn w_up_concat(&self) -> DenseMatrix {
        DenseMatrix::hcat(&[&self.w_up_q, &self.w_up_k, &self.w_up_v]).expect("uniform rows")
    }

    /// Rebuilds the beta split without re-running the SVD.
    pub fn with_beta(&self, beta: f64) -> Result<LayerFactors> {
        check_beta(beta)?;
        let mut f = self.clone();
        f.beta = beta;
        let (down, ups) = build_split(&self.u, &self.vt, &self.sigma_retained, beta, &self.whitening);
        f.w_down = down;
        f.w_up_q = ups.0;
        f.w_up_k = ups.1;
        f.w_up_v = ups.2;
        Ok(f)
    }

    /// Parameter count of the emitted factors: 4rE.
    pub fn param_count(&self) -> usize {
        4 * self.rank * self.embed_dim()
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in [0,1], got {beta}"
        )));
    }
    Ok(())
}

fn build_split(
    u: &DenseMatrix,
    vt: &DenseMatrix,
    sigma: &[f64],
    beta: f64,
    whitening: &WhiteningTransform,
) -> (DenseMatrix, (DenseMatrix, DenseMatrix, DenseMatrix)) {
    let e = u.rows();
    let mut w_down = whitening.apply_rows_inverse(u);
    for (i, &s) in sigma.iter().enumerate() {
        w_down.scale_col(i, s.powf(beta));
    }
    let mut up = vt.clone();
    for (i, &s) in sigma.iter().enumerate() {
        up.scale_row(i, s.powf(1.0 - beta));
    }
    let w_up_q = up.col_slice(0, e);
    let w_up_k = up.col_slice(e, 2 * e);
    let w_up_v = up.col_slice(2 * e, 3 * e);
    (w_down, (w_up_q, w_up_k, w_up_v))
}

/// Joint SVD of [W_q, W_k, W_v] at full rank. Exactly-zero singular values
/// are dropped.
pub fn factorize_layer(
    weights: &AttentionLayerWeights,
    whitening: &WhiteningTransform,
    beta: f64,
) -> Result<LayerFactors> {
    check_beta(beta)?;
    let e = weights.w_q.rows();
    if whitening.diag.len() != e {
        return Err(Error::InvalidArgument(format!(
            "whitening dimension {} != embed dim {e}",
            whitening.diag.len()
        )));
    }
    let concat = DenseMatrix::hcat(&[&weights.w_q, &weights.w_k, &weights.w_v])?;
    if !concat.is_finite() {
        return Err(Error::NonFinite("factorize_layer weights".into()));
    }
    let whitened = whitening.apply_rows(&concat);
    let result = svd(&whitened)?;

    let rank = result.sigma.iter().take_while(|&&s| s > 0.0).count();
    let u = result.u.col_slice(0, rank);
    let vt = result.vt.row_slice(0, rank);
    let sigma: Vec<f64> = result.sigma[..rank].to_vec();
    let (w_down, (w_up_q, w_up_k, w_up_v)) = build_split(&u, &vt, &sigma, beta, whitening);
    Ok(LayerFactors {
        rank,
        beta,
        sigma_retained: sigma,
        w_down,
        w_up_q,
        w_up_k,
        w_up_v,
        whitening: whitening.clone(),
        u,
        vt,
    })
}

/// Keeps the top-r singular directions.
pub fn truncate(factors: &LayerFactors, r: usize) -> Result<LayerFactors> {
    if r == 0 || r > factors.rank {
        return Err(Error::InvalidArgument(format!(
            "truncation rank {r} outside [1, {}]",
            factors.rank
        )));
    }
    let e = factors.embed_dim();
    Ok(LayerFactors {
        rank: r,
        beta: factors.beta,
        sigma_retained: factors.sigma_retained[..r].to_vec(),
        w_down: factors.w_down.col_slice(0, r),
        w_up_q: factors.w_up_q.row_slice(0, r),
        w_up_k: factors.w_up_k.row_slice(0, r),
        w_up_v: factors.w_up_v.row_slice(0, r),
        whitening: factors.whitening.clone(),
        u: factors.u.col_slice(0, r),
        vt: factors.vt.row_slice(0, r),
    })
    .map(|f| {
        debug_assert_eq!(f.u.rows(), e);
        f
    })
}

/// Reconstructed (W_q', W_k', W_v') in the original (un-whitened) domain.
pub fn reconstruct_qkv(factors: &LayerFactors) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    Ok((
        matmul(&factors.w_down, &factors.w_up_q)?,
        matmul(&factors.w_down, &factors.w_up_k)?,
        matmul(&factors.w_down, &factors.w_up_v)?,
    ))
}
