//! Attention-only toy transformer with exact reverse-mode gradients.
//!
//! Pre-norm RMS blocks, multi-head causal attention, optional RoPE on Q/K
//! after projection, residual connections, and a linear output head.
//! The loss is mean squared error against provided targets; backprop is
//! hand-written and checked against finite differences in the tests.

use crate::error::{Error, Result};
use crate::linalg::{matmul, DenseMatrix};
use crate::store::{CalibrationSet, ModelConfig, Tensor};
use std::collections::HashMap;

const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10000.0;

#[derive(Debug, Clone)]
pub struct AttentionLayerWeights {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_o: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub w_in: DenseMatrix,
    pub layers: Vec<AttentionLayerWeights>,
    pub w_head: DenseMatrix,
}

/// Per-layer gradients of the loss with respect to the QKV projections.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub layer_index: usize,
    pub sample_index: usize,
    pub g_wq: DenseMatrix,
    pub g_wk: DenseMatrix,
    pub g_wv: DenseMatrix,
}

impl GradientRecord {
    /// E x 3E concatenation [g_wq | g_wk | g_wv], the gradient of the
    /// concatenated QKV weight.
    pub fn concat(&self) -> DenseMatrix {
        DenseMatrix::hcat(&[&self.g_wq, &self.g_wk, &self.g_wv]).expect("uniform shapes")
    }
}

/// Full weight gradients, used by the finite-difference checks.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub w_in: DenseMatrix,
    pub layers: Vec<AttentionLayerWeights>,
    pub w_head: DenseMatrix,
}

struct LayerCache {
    x_in: DenseMatrix,
    xn: DenseMatrix,
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    probs: Vec<DenseMatrix>,
    heads_out: DenseMatrix,
}

pub struct ForwardPass {
    pub output: DenseMatrix,
    final_x: DenseMatrix,
    input: DenseMatrix,
    x0_grad_stub: (),
    caches: Vec<LayerCache>,
}

impl ForwardPass {
    /// Normalized attention inputs, one L x E matrix per layer.
    pub fn normed_inputs(&self) -> Vec<&DenseMatrix> {
        self.caches.iter().map(|c| &c.xn).collect()
    }
}

impl ToyModel {
    pub fn from_tensors(config: &ModelConfig, tensors: &HashMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let get = |name: String| -> Result<DenseMatrix> {
            tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))?
                .as_matrix()
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            layers.push(AttentionLayerWeights {
                w_q: get(format!("layers.{i}.w_q"))?,
                w_k: get(format!("layers.{i}.w_k"))?,
                w_v: get(format!("layers.{i}.w_v"))?,
                w_o: get(format!("layers.{i}.w_o"))?,
            });
        }
        Ok(ToyModel {
            config: config.clone(),
            w_in: get("embed.w_in".into())?,
            layers,
            w_head: get("head.w_out".into())?,
        })
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        let mut tensors = HashMap::new();
        tensors.insert("embed.w_in".into(), Tensor::from_matrix(&self.w_in));
        for (i, l) in self.layers.iter().enumerate() {
            tensors.insert(format!("layers.{i}.w_q"), Tensor::from_matrix(&l.w_q));
            tensors.insert(format!("layers.{i}.w_k"), Tensor::from_matrix(&l.w_k));
            tensors.insert(format!("layers.{i}.w_v"), Tensor::from_matrix(&l.w_v));
            tensors.insert(format!("layers.{i}.w_o"), Tensor::from_matrix(&l.w_o));
        }
        tensors.insert("head.w_out".into(), Tensor::from_matrix(&self.w_head));
        tensors
    }

    /// Forward pass retaining the activations backward needs.
    pub fn forward(&self, input: &DenseMatrix) -> Result<ForwardPass> {
        if input.cols() != self.w_in.rows() {
            return Err(Error::ShapeMismatch {
                context: "forward input".into(),
                left_rows: input.rows(),
                left_cols: input.cols(),
                right_rows: self.w_in.rows(),
                right_cols: self.w_in.cols(),
            });
        }
        let heads = self.config.num_heads;
        let mut x = matmul(input, &self.w_in)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let xn = rms_norm_rows(&x);
            let mut q = matmul(&xn, &layer.w_q)?;
            let mut k = matmul(&xn, &layer.w_k)?;
            let v = matmul(&xn, &layer.w_v)?;
            if self.config.uses_rope {
                apply_rope(&mut q, heads, 0, false);
                apply_rope(&mut k, heads, 0, false);
            }
            let (heads_out, probs) = causal_attention(&q, &k, &v, heads)?;
            let attn_out = matmul(&heads_out, &layer.w_o)?;
            let next = x.add(&attn_out)?;
            if !next.is_finite() {
                return Err(Error::NonFinite(format!(
                    "non-finite activation first appears in layer {li}"
                )));
            }
            caches.push(LayerCache {
                x_in: x,
                xn,
                q,
                k,
                v,
                probs,
                heads_out,
            });
            x = next;
        }
        let output = matmul(&x, &self.w_head)?;
        Ok(ForwardPass {
            output,
            final_x: x,
            input: input.clone(),
            x0_grad_stub: (),
            caches,
        })
    }

    /// Mean-squared-error loss of one sample.
    pub fn loss(&self, input: &DenseMatrix, target: &DenseMatrix) -> Result<f64> {
        let fwd = self.forward(input)?;
        mse(&fwd.output, target)
    }

    /// Mean loss over a calibration set.
    pub fn loss_only(&self, calib: &CalibrationSet) -> Result<f64> {
        let mut total = 0.0;
        for (x, t) in calib.inputs.iter().zip(&calib.targets) {
            total += self.loss(x, t)?;
        }
        Ok(total / calib.num_samples() as f64)
    }

    /// Loss and exact gradients for one sample.
    pub fn loss_and_gradients(
        &self,
        input: &DenseMatrix,
        target: &DenseMatrix,
    ) -> Result<(f64, ModelGradients)> {
        let fwd = self.forward(input)?;
        let loss = mse(&fwd.output, target)?;
        let grads = self.backward(&fwd, target)?;
        Ok((loss, grads))
    }

    fn backward(&self, fwd: &ForwardPass, target: &DenseMatrix) -> Result<ModelGradients> {
        let _ = fwd.x0_grad_stub;
        let heads = self.config.num_heads;
        let n = (fwd.output.rows() * fwd.output.cols()) as f64;
        // d/dy of mean((y - t)^2)
        let d_out = fwd.output.sub(target)?.scale(2.0 / n);

        let g_w_head = matmul(&fwd.final_x.transpose(), &d_out)?;
        let mut dx = matmul(&d_out, &self.w_head.transpose())?;

        let mut layer_grads: Vec<AttentionLayerWeights> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&fwd.caches).rev() {
            // x_next = x_in + heads_out * w_o
            let g_w_o = matmul(&cache.heads_out.transpose(), &dx)?;
            let d_heads_out = matmul(&dx, &layer.w_o.transpose())?;

            let (mut dq, dk, dv) =
                causal_attention_backward(&cache.q, &cache.k, &cache.v, &cache.probs, &d_heads_out, heads)?;
            let mut dk = dk;
            if self.config.uses_rope {
                apply_rope(&mut dq, heads, 0, true);
                apply_rope(&mut dk, heads, 0, true);
            }

            let g_wq = matmul(&cache.xn.transpose(), &dq)?;
            let g_wk = matmul(&cache.xn.transpose(), &dk)?;
            let g_wv = matmul(&cache.xn.transpose(), &dv)?;

            let mut dxn = matmul(&dq, &layer.w_q.transpose())?;
            dxn = dxn.add(&matmul(&dk, &layer.w_k.transpose())?)?;
            dxn = dxn.add(&matmul(&dv, &layer.w_v.transpose())?)?;

            let d_from_norm = rms_norm_rows_backward(&cache.x_in, &dxn);
            dx = dx.add(&d_from_norm)?;

            layer_grads.push(AttentionLayerWeights {
                w_q: g_wq,
                w_k: g_wk,
                w_v: g_wv,
                w_o: g_w_o,
            });
        }
        layer_grads.reverse();
        let g_w_in = matmul(&fwd.input.transpose(), &dx)?;
        Ok(ModelGradients {
            w_in: g_w_in,
            layers: layer_grads,
            w_head: g_w_head,
        })
    }

    /// Per-layer QKV gradient records averaged over a calibration set is
    /// left to the caller; this returns one record set per sample.
    pub fn gradient_records(&self, calib: &CalibrationSet) -> Result<Vec<Vec<GradientRecord>>> {
        let mut all = Vec::with_capacity(calib.num_samples());
        for (si, (x, t)) in calib.inputs.iter().zip(&calib.targets).enumerate() {
            let (_, grads) = self.loss_and_gradients(x, t)?;
            let records = grads
                .layers
                .into_iter()
                .enumerate()
                .map(|(li, g)| GradientRecord {
                    layer_index: li,
                    sample_index: si,
                    g_wq: g.w_q,
                    g_wk: g.w_k,
                    g_wv: g.w_v,
                })
                .collect();
            all.push(records);
        }
        Ok(all)
    }
}

pub fn mse(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    let diff = a.sub(b)?;
    let n = (a.rows() * a.cols()) as f64;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / n)
}

/// Rowwise RMS normalization, x / sqrt(mean(x^2) + eps).
pub fn rms_norm_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    let e = x.cols() as f64;
    for r in 0..x.rows() {
        let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / e + RMS_EPS;
        let inv = 1.0 / ms.sqrt();
        for v in out.row_mut(r) {
            *v *= inv;
        }
    }
    out
}

fn rms_norm_rows_backward(x: &DenseMatrix, g: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    let e = x.cols() as f64;
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = g.row(r);
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / e + RMS_EPS;
        let rms = ms.sqrt();
        let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
        for c in 0..x.cols() {
            out.set(r, c, gr[c] / rms - xr[c] * gx / (e * rms.powi(3)));
        }
    }
    out
}

/// Rotary position embedding applied head-wise in place. Row index plus
/// `pos_offset` is the absolute position. `inverse` rotates by the negated
/// angle (the exact adjoint, used in backward and nowhere else).
pub fn apply_rope(x: &mut DenseMatrix, heads: usize, pos_offset: usize, inverse: bool) {
    let e = x.cols();
    let d = e / heads;
    let half = d / 2;
    for r in 0..x.rows() {
        let pos = (r + pos_offset) as f64;
        for h in 0..heads {
            let base = h * d;
            for k in 0..half {
                let theta = pos * ROPE_BASE.powf(-2.0 * k as f64 / d as f64);
                let (sin, cos) = if inverse {
                    ((-theta).sin(), (-theta).cos())
                } else {
                    (theta.sin(), theta.cos())
                };
                let a = x.get(r, base + 2 * k);
                let b = x.get(r, base + 2 * k + 1);
                x.set(r, base + 2 * k, a * cos - b * sin);
                x.set(r, base + 2 * k + 1, a * sin + b * cos);
            }
        }
    }
}

/// Multi-head causal attention over full sequences. Returns the
/// concatenated head outputs and per-head probability matrices.
pub fn causal_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    heads: usize,
) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
    let l = q.rows();
    let e = q.cols();
    let d = e / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = DenseMatrix::zeros(l, e);
    let mut all_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let base = h * d;
        let mut probs = DenseMatrix::zeros(l, l);
        for i in 0..l {
            // Causal: keys 0..=i only.
            let mut logits = vec![0.0; i + 1];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.get(i, base + c) * k.get(j, base + c);
                }
                *logit = dot * scale;
            }
            softmax_inplace(&mut logits);
            for (j, p) in logits.iter().enumerate() {
                probs.set(i, j, *p);
                for c in 0..d {
                    let cur = out.get(i, base + c);
                    out.set(i, base + c, cur + p * v.get(j, base + c));
                }
            }
        }
        all_probs.push(probs);
    }
    Ok((out, all_probs))
}

pub fn softmax_inplace(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

fn causal_attention_backward(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    probs: &[DenseMatrix],
    d_out: &DenseMatrix,
    heads: usize,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let l = q.rows();
    let e = q.cols();
    let d = e / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = DenseMatrix::zeros(l, e);
    let mut dk = DenseMatrix::zeros(l, e);
    let mut dv = DenseMatrix::zeros(l, e);
    for h in 0..heads {
        let base = h * d;
        let p = &probs[h];
        for i in 0..l {
            // dP[i,j] = d_out[i,:] . v[j,:]; dV via P^T d_out.
            let mut dp = vec![0.0; i + 1];
            for (j, dpj) in dp.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += d_out.get(i, base + c) * v.get(j, base + c);
                }
                *dpj = dot;
                let pij = p.get(i, j);
                for c in 0..d {
                    let cur = dv.get(j, base + c);
                    dv.set(j, base + c, cur + pij * d_out.get(i, base + c));
                }
            }
            // Softmax backward: dS = P .* (dP - sum_j dP*P)
            let dot: f64 = dp
                .iter()
                .enumerate()
                .map(|(j, dpj)| dpj * p.get(i, j))
                .sum();
            for (j, dpj) in dp.iter().enumerate() {
                let ds = p.get(i, j) * (dpj - dot) * scale;
                for c in 0..d {
                    let cur = dq.get(i, base + c);
                    dq.set(i, base + c, cur + ds * k.get(j, base + c));
                    let cur = dk.get(j, base + c);
                    dk.set(j, base + c, cur + ds * q.get(i, base + c));
                }
            }
        }
    }
    Ok((dq, dk, dv))
}
