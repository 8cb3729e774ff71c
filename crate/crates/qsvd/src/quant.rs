//! Simulated (fake) quantization with rotation-based outlier smoothing.
//!
//! Symmetric round-to-nearest on a per-token (row) or per-output-channel
//! (column) grid, clip-ratio linear search for weights, orthogonal
//! rotation pairs (H1, H2) fused around the factorized projections, and a
//! per-layer grid search for the singular-value split exponent beta.
//! Everything dequantizes back to f64; no integer kernels.

use crate::error::{Error, Result};
use crate::factorize::LayerFactors;
use crate::linalg::{hadamard, matmul, random_orthogonal, DenseMatrix};
use serde::{Deserialize, Serialize};

pub const SCALE_FLOOR: f64 = 1e-12;
pub const ACTIVATION_CLIP: f64 = 0.9;
pub const CLIP_GRID: [f64; 7] = [1.00, 0.95, 0.90, 0.85, 0.80, 0.75, 0.70];
pub const BETA_GRID_STEPS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One scale per row (per token).
    PerRow,
    /// One scale per column (per output channel).
    PerColumn,
    PerTensor,
}

/// Bit-widths and clip ratios for one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub activation_bits: u32,
    /// Per-tensor weight clip; overridden by the linear search when
    /// quantizing a layer.
    pub clip_ratio_weights: f64,
    pub clip_ratio_activations: f64,
}

impl QuantSpec {
    pub fn fp() -> Self {
        QuantSpec {
            weight_bits: 16,
            activation_bits: 16,
            clip_ratio_weights: 1.0,
            clip_ratio_activations: 1.0,
        }
    }

    pub fn w8a8() -> Self {
        QuantSpec {
            weight_bits: 8,
            activation_bits: 8,
            clip_ratio_weights: 1.0,
            clip_ratio_activations: ACTIVATION_CLIP,
        }
    }

    pub fn w8a4() -> Self {
        QuantSpec {
            weight_bits: 8,
            activation_bits: 4,
            clip_ratio_weights: 1.0,
            clip_ratio_activations: ACTIVATION_CLIP,
        }
    }

    pub fn w4a4() -> Self {
        QuantSpec {
            weight_bits: 4,
            activation_bits: 4,
            clip_ratio_weights: 1.0,
            clip_ratio_activations: ACTIVATION_CLIP,
        }
    }

    pub fn from_scheme(name: &str) -> Result<Self> {
        match name {
            "fp" => Ok(Self::fp()),
            "w8a8" => Ok(Self::w8a8()),
            "w8a4" => Ok(Self::w8a4()),
            "w4a4" => Ok(Self::w4a4()),
            other => Err(Error::Usage(format!(
                "unknown scheme '{other}' (expected fp, w8a8, w8a4, w4a4)"
            ))),
        }
    }

    pub fn scheme_name(&self) -> &'static str {
        match (self.weight_bits, self.activation_bits) {
            (16, 16) => "fp",
            (8, 8) => "w8a8",
            (8, 4) => "w8a4",
            (4, 4) => "w4a4",
            _ => "custom",
        }
    }

    pub fn validate(&self) -> Result<()> {
        for bits in [self.weight_bits, self.activation_bits] {
            if ![4, 8, 16].contains(&bits) {
                return Err(Error::Usage(format!("unsupported bit-width {bits}")));
            }
        }
        for clip in [self.clip_ratio_weights, self.clip_ratio_activations] {
            if !(clip > 0.0 && clip <= 1.0) {
                return Err(Error::Usage(format!("clip ratio {clip} outside (0,1]")));
            }
        }
        Ok(())
    }
}

/// Fake-quantized tensor: integer codes, per-group scales, and the
/// dequantized values that flow onward.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub dequant: DenseMatrix,
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    pub bits: u32,
    pub granularity: Granularity,
}

fn round_half_away(x: f64) -> f64 {
    // f64::round rounds half away from zero.
    x.round()
}

/// Symmetric RTN fake quantization. bits = 16 passes through.
pub fn quantize_tensor(
    x: &DenseMatrix,
    bits: u32,
    granularity: Granularity,
    clip_ratio: f64,
) -> Result<QuantizedTensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("quantize_tensor input".into()));
    }
    if !(clip_ratio > 0.0 && clip_ratio <= 1.0) {
        return Err(Error::Usage(format!("clip ratio {clip_ratio} outside (0,1]")));
    }
    if bits == 16 {
        return Ok(QuantizedTensor {
            dequant: x.clone(),
            codes: Vec::new(),
            scales: Vec::new(),
            bits,
            granularity,
        });
    }
    if ![4, 8].contains(&bits) {
        return Err(Error::Usage(format!("unsupported bit-width {bits}")));
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let (rows, cols) = (x.rows(), x.cols());
    let num_groups = match granularity {
        Granularity::PerRow => rows,
        Granularity::PerColumn => cols,
        Granularity::PerTensor => 1,
    };
    let group_of = |r: usize, c: usize| match granularity {
        Granularity::PerRow => r,
        Granularity::PerColumn => c,
        Granularity::PerTensor => 0,
    };
    let mut amax = vec![0.0_f64; num_groups];
    for r in 0..rows {
        for c in 0..cols {
            let g = group_of(r, c);
            amax[g] = amax[g].max(x.get(r, c).abs());
        }
    }
    let scales: Vec<f64> = amax
        .iter()
        .map(|a| (clip_ratio * a / qmax).max(SCALE_FLOOR))
        .collect();
    let mut dequant = DenseMatrix::zeros(rows, cols);
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let s = scales[group_of(r, c)];
            let code = round_half_away(x.get(r, c) / s).clamp(-qmax, qmax);
            codes.push(code as i32);
            dequant.set(r, c, code * s);
        }
    }
    Ok(QuantizedTensor {
        dequant,
        codes,
        scales,
        bits,
        granularity,
    })
}

/// Linear search over the clip grid for the squared-error minimizer.
/// Ties resolve to the larger ratio.
pub fn search_weight_clip(w: &DenseMatrix, bits: u32, granularity: Granularity) -> Result<f64> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::InvalidArgument("empty weight group".into()));
    }
    if bits == 16 {
        return Ok(1.0);
    }
    let mut best = (f64::INFINITY, 1.0);
    for &clip in &CLIP_GRID {
        let q = quantize_tensor(w, bits, granularity, clip)?;
        let err = q.dequant.sub(w)?.frobenius_norm().powi(2);
        if err < best.0 {
            best = (err, clip);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    Hadamard,
    RandomOrthogonal,
    Identity,
}

/// Persistable description of one rotation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub kind: RotationKind,
    pub dim: usize,
    pub seed: u64,
}

impl RotationSpec {
    pub fn materialize(&self) -> Result<DenseMatrix> {
        match self.kind {
            RotationKind::Hadamard => hadamard(self.dim),
            RotationKind::RandomOrthogonal => random_orthogonal(self.dim, self.seed),
            RotationKind::Identity => Ok(DenseMatrix::identity(self.dim)),
        }
    }
}

/// Orthogonal pair smoothing X (via H1, E x E) and C_qkv (via H2, r x r).
#[derive(Debug, Clone)]
pub struct RotationPair {
    pub h1: DenseMatrix,
    pub h2: DenseMatrix,
    pub h1_spec: RotationSpec,
    pub h2_spec: RotationSpec,
}

impl RotationPair {
    pub fn identity(e: usize, r: usize) -> Self {
        let h1_spec = RotationSpec {
            kind: RotationKind::Identity,
            dim: e,
            seed: 0,
        };
        let h2_spec = RotationSpec {
            kind: RotationKind::Identity,
            dim: r,
            seed: 0,
        };
        RotationPair {
            h1: DenseMatrix::identity(e),
            h2: DenseMatrix::identity(r),
            h1_spec,
            h2_spec,
        }
    }

    pub fn from_specs(h1_spec: RotationSpec, h2_spec: RotationSpec) -> Result<Self> {
        Ok(RotationPair {
            h1: h1_spec.materialize()?,
            h2: h2_spec.materialize()?,
            h1_spec,
            h2_spec,
        })
    }
}

/// Hadamard where the dimension is a power of two (and preferred), else a
/// seeded random orthogonal matrix.
pub fn build_rotations(e: usize, r: usize, seed: u64, prefer_hadamard: bool) -> Result<RotationPair> {
    let pick = |dim: usize, s: u64| {
        if prefer_hadamard && dim.is_power_of_two() {
            RotationSpec {
                kind: RotationKind::Hadamard,
                dim,
                seed: 0,
            }
        } else {
            RotationSpec {
                kind: RotationKind::RandomOrthogonal,
                dim,
                seed: s,
            }
        }
    };
    RotationPair::from_specs(pick(e, seed), pick(r, seed.wrapping_add(1)))
}

/// Rotated-and-quantized factors for one layer, ready for the latent
/// engine's quantized path.
#[derive(Debug, Clone)]
pub struct QuantizedLayer {
    /// Q(H1 * W_down * H2^T), E x r.
    pub w_down: QuantizedTensor,
    /// Q(H2 * W_up_role), r x E each.
    pub w_up_q: QuantizedTensor,
    pub w_up_k: QuantizedTensor,
    pub w_up_v: QuantizedTensor,
    pub beta_opt: f64,
    pub weight_clip: f64,
    pub rotations: RotationPair,
    pub spec: QuantSpec,
}

fn rotated_weights(
    factors: &LayerFactors,
    rotations: &RotationPair,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix)> {
    let down = matmul(&matmul(&rotations.h1, &factors.w_down)?, &rotations.h2.transpose())?;
    let up_q = matmul(&rotations.h2, &factors.w_up_q)?;
    let up_k = matmul(&rotations.h2, &factors.w_up_k)?;
    let up_v = matmul(&rotations.h2, &factors.w_up_v)?;
    Ok((down, up_q, up_k, up_v))
}

/// Fake-quantizes the rotated factors at the given beta.
pub fn quantize_layer(
    factors: &LayerFactors,
    rotations: &RotationPair,
    spec: &QuantSpec,
    beta_opt: f64,
) -> Result<QuantizedLayer> {
    spec.validate()?;
    if rotations.h1.rows() != factors.embed_dim() || rotations.h2.rows() != factors.rank {
        return Err(Error::ShapeMismatch {
            context: "rotation pair vs factors".into(),
            left_rows: rotations.h1.rows(),
            left_cols: rotations.h2.rows(),
            right_rows: factors.embed_dim(),
            right_cols: factors.rank,
        });
    }
    let f = factors.with_beta(beta_opt)?;
    let (down, up_q, up_k, up_v) = rotated_weights(&f, rotations)?;
    // One clip ratio per layer, searched over the down-projection (the
    // tensor feeding the cache); applied to every weight tensor.
    let clip = search_weight_clip(&down, spec.weight_bits, Granularity::PerColumn)?;
    Ok(QuantizedLayer {
        w_down: quantize_tensor(&down, spec.weight_bits, Granularity::PerColumn, clip)?,
        w_up_q: quantize_tensor(&up_q, spec.weight_bits, Granularity::PerColumn, clip)?,
        w_up_k: quantize_tensor(&up_k, spec.weight_bits, Granularity::PerColumn, clip)?,
        w_up_v: quantize_tensor(&up_v, spec.weight_bits, Granularity::PerColumn, clip)?,
        beta_opt,
        weight_clip: clip,
        rotations: rotations.clone(),
        spec: spec.clone(),
    })
}

impl QuantizedLayer {
    /// Quantized self-attention projection path for raw activations X:
    /// C = Q(X H1^T) Q(H1 W_down H2^T), cache row = Q(C),
    /// [Q K V] = Q(C) Q(H2 W_up).
    pub fn project(&self, x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let xr = matmul(x, &self.rotations.h1.transpose())?;
        let xq = quantize_tensor(
            &xr,
            self.spec.activation_bits,
            Granularity::PerRow,
            self.spec.clip_ratio_activations,
        )?;
        let c = matmul(&xq.dequant, &self.w_down.dequant)?;
        let cq = quantize_tensor(
            &c,
            self.spec.activation_bits,
            Granularity::PerRow,
            self.spec.clip_ratio_activations,
        )?;
        let up = DenseMatrix::hcat(&[
            &self.w_up_q.dequant,
            &self.w_up_k.dequant,
            &self.w_up_v.dequant,
        ])?;
        let qkv = matmul(&cq.dequant, &up)?;
        Ok((cq.dequant, qkv))
    }
}

/// Grid search for the split exponent: evaluates beta in {0.0, 0.1, ...,
/// 1.0}, measuring the summed squared output error of the quantized path
/// over the calibration activations. Ties resolve to the smaller beta.
pub fn optimize_beta(
    factors: &LayerFactors,
    rotations: &RotationPair,
    spec: &QuantSpec,
    activations: &[DenseMatrix],
) -> Result<f64> {
    if activations.is_empty() {
        return Err(Error::InvalidArgument(
            "optimize_beta requires calibration activations".into(),
        ));
    }
    let mut best = (f64::INFINITY, 0.0);
    for step in 0..BETA_GRID_STEPS {
        let beta = step as f64 / (BETA_GRID_STEPS - 1) as f64;
        let objective = beta_objective(factors, rotations, spec, activations, beta)?;
        if objective < best.0 {
            best = (objective, beta);
        }
    }
    Ok(best.1)
}

/// Summed squared output error of the quantized path at one beta.
///
/// Residuals below the f64 noise floor of the reference output (relative
/// 1e-18 on the squared norms) are reported as exactly zero, so a scheme
/// with no quantization yields identical zeros across the whole grid.
pub fn beta_objective(
    factors: &LayerFactors,
    rotations: &RotationPair,
    spec: &QuantSpec,
    activations: &[DenseMatrix],
    beta: f64,
) -> Result<f64> {
    let up = factors.w_up_concat();
    let layer = quantize_layer(factors, rotations, spec, beta)?;
    let mut objective = 0.0;
    let mut reference = 0.0;
    for x in activations {
        let y = matmul(&matmul(x, &factors.w_down)?, &up)?;
        let (_, y_quant) = layer.project(x)?;
        objective += y.sub(&y_quant)?.frobenius_norm().powi(2);
        reference += y.frobenius_norm().powi(2);
    }
    if objective < 1e-18 * reference {
        objective = 0.0;
    }
    Ok(objective)
}
