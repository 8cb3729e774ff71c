//! Single-sequence attention inference over two cache layouts: a dense
//! baseline buffering K/V per layer (2·E elements per token) and a latent
//! path buffering only the joint down-projection rows (r elements per
//! token), reconstructing K and V through the up-projections on demand.
//!
//! Both paths run full precision or through the rotated fake-quantized
//! weights. Softmax, normalization, and the output projection always run
//! in full precision. Batch is 1; decode is strictly sequential.

use crate::compressed::CompressedModel;
use crate::cost::{self, Scheme};
use crate::error::{Error, Result};
use crate::linalg::{matmul, DenseMatrix};
use crate::model::{apply_rope, causal_attention, mse, rms_norm_rows, softmax_inplace, ToyModel};
use crate::store::CalibrationSet;
use serde::{Deserialize, Serialize};

/// In-memory cache element width; reports count elements, bytes are
/// elements times this.
pub const BYTES_PER_ELEMENT: usize = 8;

fn append_rows(base: &mut DenseMatrix, extra: &DenseMatrix) -> Result<()> {
    if base.rows() == 0 {
        *base = extra.clone();
        return Ok(());
    }
    if base.cols() != extra.cols() {
        return Err(Error::ShapeMismatch {
            context: "cache append".into(),
            left_rows: base.rows(),
            left_cols: base.cols(),
            right_rows: extra.rows(),
            right_cols: extra.cols(),
        });
    }
    let mut data = base.data().to_vec();
    data.extend_from_slice(extra.data());
    *base = DenseMatrix::from_vec(base.rows() + extra.rows(), base.cols(), data)?;
    Ok(())
}

/// Attention of a single query row over `t` cached key/value rows;
/// matches the per-position arithmetic of the full causal pass.
fn single_query_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    heads: usize,
) -> Result<DenseMatrix> {
    let e = q.cols();
    let d = e / heads;
    let t = k.rows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = DenseMatrix::zeros(1, e);
    for h in 0..heads {
        let base = h * d;
        let mut logits = vec![0.0; t];
        for (j, logit) in logits.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q.get(0, base + c) * k.get(j, base + c);
            }
            *logit = dot * scale;
        }
        softmax_inplace(&mut logits);
        for (j, p) in logits.iter().enumerate() {
            for c in 0..d {
                let cur = out.get(0, base + c);
                out.set(0, base + c, cur + p * v.get(j, base + c));
            }
        }
    }
    Ok(out)
}

/// Baseline path: stores K and V per layer, post position encoding.
pub struct DenseEngine<'a> {
    model: &'a ToyModel,
    k_cache: Vec<DenseMatrix>,
    v_cache: Vec<DenseMatrix>,
    len: usize,
    prefilled: bool,
}

impl<'a> DenseEngine<'a> {
    pub fn new(model: &'a ToyModel) -> Self {
        let n = model.layers.len();
        DenseEngine {
            model,
            k_cache: vec![DenseMatrix::zeros(0, 0); n],
            v_cache: vec![DenseMatrix::zeros(0, 0); n],
            len: 0,
            prefilled: false,
        }
    }

    pub fn seen(&self) -> usize {
        self.len
    }

    /// Per-layer cached element counts (2 * E * tokens seen).
    pub fn cache_elements(&self) -> Vec<usize> {
        self.k_cache
            .iter()
            .zip(&self.v_cache)
            .map(|(k, v)| k.rows() * k.cols() + v.rows() * v.cols())
            .collect()
    }

    pub fn prefill(&mut self, input: &DenseMatrix) -> Result<DenseMatrix> {
        if input.rows() == 0 {
            return Err(Error::InvalidArgument("prefill of empty sequence".into()));
        }
        let heads = self.model.config.num_heads;
        let mut x = matmul(input, &self.model.w_in)?;
        for (li, layer) in self.model.layers.iter().enumerate() {
            let xn = rms_norm_rows(&x);
            let mut q = matmul(&xn, &layer.w_q)?;
            let mut k = matmul(&xn, &layer.w_k)?;
            let v = matmul(&xn, &layer.w_v)?;
            if self.model.config.uses_rope {
                apply_rope(&mut q, heads, 0, false);
                apply_rope(&mut k, heads, 0, false);
            }
            let (heads_out, _) = causal_attention(&q, &k, &v, heads)?;
            x = x.add(&matmul(&heads_out, &layer.w_o)?)?;
            self.k_cache[li] = k;
            self.v_cache[li] = v;
        }
        self.len = input.rows();
        self.prefilled = true;
        let out = matmul(&x, &self.model.w_head)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("dense prefill output".into()));
        }
        Ok(out)
    }

    pub fn decode_step(&mut self, input_row: &DenseMatrix) -> Result<DenseMatrix> {
        if !self.prefilled {
            return Err(Error::InvalidArgument("decode before prefill".into()));
        }
        if input_row.rows() != 1 {
            return Err(Error::InvalidArgument("decode_step takes one row".into()));
        }
        let heads = self.model.config.num_heads;
        let mut x = matmul(input_row, &self.model.w_in)?;
        for (li, layer) in self.model.layers.iter().enumerate() {
            let xn = rms_norm_rows(&x);
            let mut q = matmul(&xn, &layer.w_q)?;
            let mut k = matmul(&xn, &layer.w_k)?;
            let v = matmul(&xn, &layer.w_v)?;
            if self.model.config.uses_rope {
                apply_rope(&mut q, heads, self.len, false);
                apply_rope(&mut k, heads, self.len, false);
            }
            append_rows(&mut self.k_cache[li], &k)?;
            append_rows(&mut self.v_cache[li], &v)?;
            let attn = single_query_attention(&q, &self.k_cache[li], &self.v_cache[li], heads)?;
            x = x.add(&matmul(&attn, &layer.w_o)?)?;
        }
        self.len += 1;
        matmul(&x, &self.model.w_head)
    }
}

/// Latent path: stores only the r-wide joint projection rows; K and V are
/// reconstructed through the up-projections at each step. Position
/// encoding, when enabled, is applied to reconstructed keys on demand, so
/// buffered rows are position-free.
pub struct LatentEngine<'a> {
    model: &'a CompressedModel,
    use_quantized: bool,
    cache: Vec<DenseMatrix>,
    len: usize,
    prefilled: bool,
}

impl<'a> LatentEngine<'a> {
    pub fn new(model: &'a CompressedModel, use_quantized: bool) -> Result<Self> {
        if use_quantized && !model.is_quantized() {
            return Err(Error::InvalidArgument(
                "quantized path requested but model carries no quantized layers".into(),
            ));
        }
        let n = model.layers.len();
        Ok(LatentEngine {
            model,
            use_quantized,
            cache: vec![DenseMatrix::zeros(0, 0); n],
            len: 0,
            prefilled: false,
        })
    }

    pub fn seen(&self) -> usize {
        self.len
    }

    /// Per-layer cached element counts (rank * tokens seen).
    pub fn cache_elements(&self) -> Vec<usize> {
        self.cache.iter().map(|c| c.rows() * c.cols()).collect()
    }

    /// Joint projection of normalized activations for one layer:
    /// cache rows plus the concatenated [Q K V] before position encoding.
    fn project_layer(&self, li: usize, xn: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let layer = &self.model.layers[li];
        if self.use_quantized {
            let q = layer.quantized.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("layer {li} has no quantized weights"))
            })?;
            q.project(xn)
        } else {
            let f = &layer.factors;
            let c = matmul(xn, &f.w_down)?;
            let up = DenseMatrix::hcat(&[&f.w_up_q, &f.w_up_k, &f.w_up_v])?;
            let qkv = matmul(&c, &up)?;
            Ok((c, qkv))
        }
    }

    pub fn prefill(&mut self, input: &DenseMatrix) -> Result<DenseMatrix> {
        if input.rows() == 0 {
            return Err(Error::InvalidArgument("prefill of empty sequence".into()));
        }
        let e = self.model.config.embed_dim;
        let heads = self.model.config.num_heads;
        let mut x = matmul(input, &self.model.w_in)?;
        for li in 0..self.model.layers.len() {
            let xn = rms_norm_rows(&x);
            let (c, qkv) = self.project_layer(li, &xn)?;
            let mut q = qkv.col_slice(0, e);
            let mut k = qkv.col_slice(e, 2 * e);
            let v = qkv.col_slice(2 * e, 3 * e);
            if self.model.config.uses_rope {
                apply_rope(&mut q, heads, 0, false);
                apply_rope(&mut k, heads, 0, false);
            }
            let (heads_out, _) = causal_attention(&q, &k, &v, heads)?;
            x = x.add(&matmul(&heads_out, &self.model.layers[li].w_o)?)?;
            self.cache[li] = c;
        }
        self.len = input.rows();
        self.prefilled = true;
        let out = matmul(&x, &self.model.w_head)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("latent prefill output".into()));
        }
        Ok(out)
    }

    pub fn decode_step(&mut self, input_row: &DenseMatrix) -> Result<DenseMatrix> {
        if !self.prefilled {
            return Err(Error::InvalidArgument("decode before prefill".into()));
        }
        if input_row.rows() != 1 {
            return Err(Error::InvalidArgument("decode_step takes one row".into()));
        }
        let e = self.model.config.embed_dim;
        let heads = self.model.config.num_heads;
        let mut x = matmul(input_row, &self.model.w_in)?;
        for li in 0..self.model.layers.len() {
            let xn = rms_norm_rows(&x);
            let (c_row, qkv_row) = self.project_layer(li, &xn)?;
            let mut q = qkv_row.col_slice(0, e);
            append_rows(&mut self.cache[li], &c_row)?;
            let layer = &self.model.layers[li];
            let (up_k, up_v) = if self.use_quantized {
                let ql = layer.quantized.as_ref().unwrap();
                (&ql.w_up_k.dequant, &ql.w_up_v.dequant)
            } else {
                (&layer.factors.w_up_k, &layer.factors.w_up_v)
            };
            // Reconstruct every key/value row from the latent buffer.
            let mut k = matmul(&self.cache[li], up_k)?;
            let v = matmul(&self.cache[li], up_v)?;
            if self.model.config.uses_rope {
                apply_rope(&mut q, heads, self.len, false);
                apply_rope(&mut k, heads, 0, false);
            }
            let attn = single_query_attention(&q, &k, &v, heads)?;
            x = x.add(&matmul(&attn, &layer.w_o)?)?;
        }
        self.len += 1;
        matmul(&x, &self.model.w_head)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ModelVariant<'a> {
    Dense(&'a ToyModel),
    Latent {
        model: &'a CompressedModel,
        quantized: bool,
    },
}

impl ModelVariant<'_> {
    pub fn name(&self) -> String {
        match self {
            ModelVariant::Dense(_) => "dense".into(),
            ModelVariant::Latent { quantized, .. } => {
                if *quantized {
                    "latent-quantized".into()
                } else {
                    "latent".into()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seq_len: usize,
    pub num_samples: usize,
    pub loss: f64,
    pub output_mse_vs_baseline: f64,
    pub ranks: Vec<usize>,
    pub per_layer_cache_elements: Vec<usize>,
    pub per_layer_cache_bytes: Vec<usize>,
    pub r1: f64,
    pub r2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_bits: Option<u32>,
}

/// Runs the variant over the calibration set and reports loss, output MSE
/// against the dense full-precision baseline, measured cache sizes, and
/// the parameter/cache cost ratios relative to the baseline.
pub fn evaluate(
    variant: ModelVariant<'_>,
    baseline: &ToyModel,
    calib: &CalibrationSet,
) -> Result<EvalReport> {
    if calib.num_samples() == 0 {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    let config = match variant {
        ModelVariant::Dense(m) => &m.config,
        ModelVariant::Latent { model, .. } => &model.config,
    };
    if config != &baseline.config {
        return Err(Error::InvalidArgument(
            "variant and baseline model configs differ".into(),
        ));
    }
    let seq_len = calib.seq_len();
    let mut loss = 0.0;
    let mut vs_baseline = 0.0;
    let mut cache_elements = Vec::new();
    for (input, target) in calib.inputs.iter().zip(&calib.targets) {
        let out = match variant {
            ModelVariant::Dense(m) => {
                let mut engine = DenseEngine::new(m);
                let out = engine.prefill(input)?;
                cache_elements = engine.cache_elements();
                out
            }
            ModelVariant::Latent { model, quantized } => {
                let mut engine = LatentEngine::new(model, quantized)?;
                let out = engine.prefill(input)?;
                cache_elements = engine.cache_elements();
                out
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite("evaluation output".into()));
        }
        loss += mse(&out, target)?;
        vs_baseline += mse(&out, &baseline.forward(input)?.output)?;
    }
    let n = calib.num_samples() as f64;
    let (ranks, r1, r2, weight_bits, activation_bits) = match variant {
        ModelVariant::Dense(_) => {
            let ranks = vec![config.embed_dim; config.num_layers];
            (ranks, 1.0, 1.0, None, None)
        }
        ModelVariant::Latent { model, quantized } => {
            let ranks = model.ranks();
            let report = cost::cost(Scheme::JointSvd, config.embed_dim, seq_len, &ranks)?;
            let (wb, ab) = if quantized {
                let spec = model.quant_spec.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("quantized variant lacks a quant spec".into())
                })?;
                (Some(spec.weight_bits), Some(spec.activation_bits))
            } else {
                (None, None)
            };
            (ranks, report.r1, report.r2, wb, ab)
        }
    };
    Ok(EvalReport {
        variant: variant.name(),
        seq_len,
        num_samples: calib.num_samples(),
        loss: loss / n,
        output_mse_vs_baseline: vs_baseline / n,
        ranks,
        per_layer_cache_bytes: cache_elements.iter().map(|e| e * BYTES_PER_ELEMENT).collect(),
        per_layer_cache_elements: cache_elements,
        r1,
        r2,
        weight_bits,
        activation_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressed::CompressedLayer;
    use crate::factorize::{factorize_layer, truncate, WhiteningTransform};
    use crate::quant::{build_rotations, quantize_layer, QuantSpec};
    use crate::store::{generate_synthetic_calibration, generate_toy_checkpoint, ModelConfig};

    fn toy(seed: u64, uses_rope: bool) -> ToyModel {
        let config = ModelConfig {
            num_layers: 3,
            embed_dim: 8,
            num_heads: 2,
            head_dim: 4,
            uses_rope,
            vocab_or_input_dim: 8,
        };
        let tensors = generate_toy_checkpoint(&config, seed);
        ToyModel::from_tensors(&config, &tensors).unwrap()
    }

    fn compress(model: &ToyModel, rank: Option<usize>, quantized: Option<QuantSpec>) -> CompressedModel {
        let e = model.config.embed_dim;
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut factors =
                    factorize_layer(l, &WhiteningTransform::identity(e), 0.5).unwrap();
                if let Some(r) = rank {
                    factors = truncate(&factors, r).unwrap();
                }
                let rotations = build_rotations(e, factors.rank, 11 + i as u64, true).unwrap();
                let quantized = quantized
                    .as_ref()
                    .map(|spec| quantize_layer(&factors, &rotations, spec, 0.5).unwrap());
                CompressedLayer {
                    factors,
                    w_o: l.w_o.clone(),
                    rotations: Some(rotations),
                    quantized,
                }
            })
            .collect();
        CompressedModel {
            config: model.config.clone(),
            w_in: model.w_in.clone(),
            w_head: model.w_head.clone(),
            layers,
            budget_k: None,
            quant_spec: quantized,
        }
    }

    fn input(seed: u64, rows: usize, cols: usize) -> DenseMatrix {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let mut m = DenseMatrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        m
    }

    #[test]
    fn dense_prefill_equals_forward() {
        for &rope in &[false, true] {
            let model = toy(1, rope);
            let x = input(2, 6, 8);
            let mut engine = DenseEngine::new(&model);
            let out = engine.prefill(&x).unwrap();
            let fwd = model.forward(&x).unwrap();
            let diff = out.sub(&fwd.output).unwrap().max_abs();
            assert!(diff < 1e-12, "rope={rope} diff={diff}");
        }
    }

    #[test]
    fn full_rank_latent_matches_dense() {
        for seed in 0..5u64 {
            let model = toy(seed, false);
            let compressed = compress(&model, None, None);
            let x = input(100 + seed, 6, 8);
            let dense = model.forward(&x).unwrap().output;
            let mut engine = LatentEngine::new(&compressed, false).unwrap();
            let latent = engine.prefill(&x).unwrap();
            let diff = dense.sub(&latent).unwrap().max_abs();
            assert!(diff < 1e-6, "seed={seed} diff={diff}");
        }
    }

    #[test]
    fn decode_matches_longer_prefill() {
        for &rope in &[false, true] {
            let model = toy(3, rope);
            let x_full = input(4, 7, 8);
            let x_prefix = x_full.row_slice(0, 6);
            let x_last = x_full.row_slice(6, 7);

            let mut dense = DenseEngine::new(&model);
            dense.prefill(&x_prefix).unwrap();
            let step = dense.decode_step(&x_last).unwrap();
            let full = model.forward(&x_full).unwrap().output;
            let want = full.row_slice(6, 7);
            let diff = step.sub(&want).unwrap().max_abs();
            assert!(diff < 1e-6, "dense rope={rope} diff={diff}");

            let compressed = compress(&model, None, None);
            let mut latent = LatentEngine::new(&compressed, false).unwrap();
            let pre = latent.prefill(&x_full).unwrap();
            let mut latent2 = LatentEngine::new(&compressed, false).unwrap();
            latent2.prefill(&x_prefix).unwrap();
            let step2 = latent2.decode_step(&x_last).unwrap();
            let diff2 = step2.sub(&pre.row_slice(6, 7)).unwrap().max_abs();
            assert!(diff2 < 1e-6, "latent rope={rope} diff={diff2}");
        }
    }

    #[test]
    fn quantized_decode_matches_quantized_prefill() {
        // Per-row activation scales make each cached row independent of
        // its neighbors, so the two schedules agree exactly.
        let model = toy(5, false);
        let compressed = compress(&model, Some(6), Some(QuantSpec::w8a8()));
        let x_full = input(6, 5, 8);
        let mut a = LatentEngine::new(&compressed, true).unwrap();
        let pre = a.prefill(&x_full).unwrap();
        assert!(pre.is_finite());
        let mut b = LatentEngine::new(&compressed, true).unwrap();
        b.prefill(&x_full.row_slice(0, 4)).unwrap();
        let step = b.decode_step(&x_full.row_slice(4, 5)).unwrap();
        let diff = step.sub(&pre.row_slice(4, 5)).unwrap().max_abs();
        assert!(diff < 1e-9, "diff={diff}");
    }

    #[test]
    fn cache_accounting_closed_forms() {
        let config = ModelConfig {
            num_layers: 4,
            embed_dim: 32,
            num_heads: 4,
            head_dim: 8,
            uses_rope: false,
            vocab_or_input_dim: 32,
        };
        let tensors = generate_toy_checkpoint(&config, 9);
        let model = ToyModel::from_tensors(&config, &tensors).unwrap();
        let x = input(10, 16, 32);

        let mut dense = DenseEngine::new(&model);
        dense.prefill(&x).unwrap();
        assert_eq!(dense.cache_elements(), vec![2 * 32 * 16; 4]);
        assert_eq!(dense.cache_elements().iter().sum::<usize>(), 4096);

        let compressed = compress(&model, Some(12), None);
        let mut latent = LatentEngine::new(&compressed, false).unwrap();
        latent.prefill(&x).unwrap();
        assert_eq!(latent.cache_elements(), vec![12 * 16; 4]);
        let total: usize = latent.cache_elements().iter().sum();
        assert_eq!(total, 768);
        assert!((total as f64 / 4096.0 - 0.1875).abs() < 1e-15);
    }

    #[test]
    fn causality_exact() {
        let model = toy(7, true);
        let x = input(8, 6, 8);
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.set(5, c, -3.0 * x2.get(5, c) + 1.0);
        }
        let a = model.forward(&x).unwrap().output;
        let b = model.forward(&x2).unwrap().output;
        for r in 0..5 {
            assert_eq!(a.row(r), b.row(r), "position {r} saw the future");
        }
    }

    #[test]
    fn divergence_monotone_in_rank() {
        let model = toy(11, false);
        let x = input(12, 6, 8);
        let dense = model.forward(&x).unwrap().output;
        let mut prev = f64::INFINITY;
        for r in [2usize, 4, 6, 8] {
            let compressed = compress(&model, Some(r), None);
            let mut engine = LatentEngine::new(&compressed, false).unwrap();
            let out = engine.prefill(&x).unwrap();
            let err = mse(&out, &dense).unwrap();
            assert!(err <= prev + 1e-12, "rank {r}: {err} > {prev}");
            prev = err;
        }
        assert!(prev < 1e-12, "full rank should recover the baseline");
    }

    #[test]
    fn evaluate_baseline_is_exact() {
        let model = toy(13, false);
        let calib = generate_synthetic_calibration(&model.config, 3, 6, 21, &Default::default()).unwrap();
        let report = evaluate(ModelVariant::Dense(&model), &model, &calib).unwrap();
        assert_eq!(report.output_mse_vs_baseline, 0.0);
        assert_eq!(report.r1, 1.0);
        assert_eq!(report.r2, 1.0);
        assert_eq!(report.per_layer_cache_elements, vec![2 * 8 * 6; 3]);
        assert_eq!(report.per_layer_cache_bytes, vec![2 * 8 * 6 * 8; 3]);
    }

    #[test]
    fn evaluate_quantized_reports_bits() {
        let model = toy(15, false);
        let compressed = compress(&model, Some(4), Some(QuantSpec::w8a4()));
        let calib = generate_synthetic_calibration(&model.config, 2, 6, 22, &Default::default()).unwrap();
        let report = evaluate(
            ModelVariant::Latent {
                model: &compressed,
                quantized: true,
            },
            &model,
            &calib,
        )
        .unwrap();
        assert_eq!(report.weight_bits, Some(8));
        assert_eq!(report.activation_bits, Some(4));
        assert!(report.output_mse_vs_baseline > 0.0);
        assert!(report.output_mse_vs_baseline.is_finite());
        assert_eq!(report.per_layer_cache_elements, vec![4 * 6; 3]);
        assert!((report.r2 - 4.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn decode_before_prefill_rejected() {
        let model = toy(17, false);
        let mut dense = DenseEngine::new(&model);
        assert!(dense.decode_step(&input(1, 1, 8)).is_err());
        let compressed = compress(&model, None, None);
        let mut latent = LatentEngine::new(&compressed, false).unwrap();
        assert!(latent.decode_step(&input(1, 1, 8)).is_err());
    }
}
