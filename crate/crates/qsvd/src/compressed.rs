//! Compressed-model directory format.
//!
//! A compressed model is a tensor container (factors, pass-through
//! weights, singular-vector bases) plus `qsvd_meta.json` holding per-layer
//! rank, beta, rotation seeds, optional quantization payload (codes and
//! scales, exact in JSON), and the global budget and scheme.

use crate::error::{Error, Result};
use crate::factorize::{LayerFactors, WhiteningKind, WhiteningTransform};
use crate::linalg::DenseMatrix;
use crate::quant::{
    Granularity, QuantSpec, QuantizedLayer, QuantizedTensor, RotationPair, RotationSpec,
};
use crate::store::{self, ModelConfig, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const META_FILE: &str = "qsvd_meta.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizedTensorMeta {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub granularity: Granularity,
    pub codes: Vec<i32>,
    pub scales: Vec<f64>,
    /// Raw values for the 16-bit passthrough, which has no code grid.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<f64>,
}

impl QuantizedTensorMeta {
    fn from_tensor(t: &QuantizedTensor) -> Self {
        QuantizedTensorMeta {
            rows: t.dequant.rows(),
            cols: t.dequant.cols(),
            bits: t.bits,
            granularity: t.granularity,
            codes: t.codes.clone(),
            scales: t.scales.clone(),
            values: if t.bits == 16 {
                t.dequant.data().to_vec()
            } else {
                Vec::new()
            },
        }
    }

    fn to_tensor(&self) -> Result<QuantizedTensor> {
        if self.bits == 16 {
            if self.values.len() != self.rows * self.cols {
                return Err(Error::Format(format!(
                    "passthrough tensor values length {} != {}x{}",
                    self.values.len(),
                    self.rows,
                    self.cols
                )));
            }
            return Ok(QuantizedTensor {
                dequant: DenseMatrix::from_vec(self.rows, self.cols, self.values.clone())?,
                codes: Vec::new(),
                scales: Vec::new(),
                bits: self.bits,
                granularity: self.granularity,
            });
        }
        if self.codes.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "quantized tensor codes length {} != {}x{}",
                self.codes.len(),
                self.rows,
                self.cols
            )));
        }
        let mut dequant = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let g = match self.granularity {
                    Granularity::PerRow => r,
                    Granularity::PerColumn => c,
                    Granularity::PerTensor => 0,
                };
                let scale = *self
                    .scales
                    .get(g)
                    .ok_or_else(|| Error::Format("quantized tensor scales too short".into()))?;
                dequant.set(r, c, self.codes[r * self.cols + c] as f64 * scale);
            }
        }
        Ok(QuantizedTensor {
            dequant,
            codes: self.codes.clone(),
            scales: self.scales.clone(),
            bits: self.bits,
            granularity: self.granularity,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizedLayerMeta {
    pub beta_opt: f64,
    pub weight_clip: f64,
    pub w_down: QuantizedTensorMeta,
    pub w_up_q: QuantizedTensorMeta,
    pub w_up_k: QuantizedTensorMeta,
    pub w_up_v: QuantizedTensorMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMeta {
    pub rank: usize,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_h1: Option<RotationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_h2: Option<RotationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantized: Option<QuantizedLayerMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QsvdMeta {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_k: Option<usize>,
    pub whitening: WhiteningKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant_spec: Option<QuantSpec>,
    pub layers: Vec<LayerMeta>,
}

/// One compressed attention layer: factors plus the untouched output
/// projection, optionally with rotations and a quantized payload.
#[derive(Debug, Clone)]
pub struct CompressedLayer {
    pub factors: LayerFactors,
    pub w_o: DenseMatrix,
    pub rotations: Option<RotationPair>,
    pub quantized: Option<QuantizedLayer>,
}

#[derive(Debug, Clone)]
pub struct CompressedModel {
    pub config: ModelConfig,
    pub w_in: DenseMatrix,
    pub w_head: DenseMatrix,
    pub layers: Vec<CompressedLayer>,
    pub budget_k: Option<usize>,
    pub quant_spec: Option<QuantSpec>,
}

impl CompressedModel {
    pub fn is_full_rank(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.factors.rank == self.config.embed_dim)
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.factors.rank).collect()
    }

    pub fn is_quantized(&self) -> bool {
        self.layers.iter().any(|l| l.quantized.is_some())
    }
}

pub fn save_compressed(dir: &Path, model: &CompressedModel) -> Result<()> {
    let e = model.config.embed_dim;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    tensors.insert("embed.w_in".into(), Tensor::from_matrix(&model.w_in));
    tensors.insert("head.w_out".into(), Tensor::from_matrix(&model.w_head));
    let mut layer_metas = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let f = &layer.factors;
        if f.embed_dim() != e {
            return Err(Error::InvalidArgument(format!(
                "layer {i}: factor width {} != embed dim {e}",
                f.embed_dim()
            )));
        }
        tensors.insert(format!("layers.{i}.w_down"), Tensor::from_matrix(&f.w_down));
        tensors.insert(format!("layers.{i}.w_up_q"), Tensor::from_matrix(&f.w_up_q));
        tensors.insert(format!("layers.{i}.w_up_k"), Tensor::from_matrix(&f.w_up_k));
        tensors.insert(format!("layers.{i}.w_up_v"), Tensor::from_matrix(&f.w_up_v));
        tensors.insert(format!("layers.{i}.svd_u"), Tensor::from_matrix(&f.u));
        tensors.insert(format!("layers.{i}.svd_vt"), Tensor::from_matrix(&f.vt));
        tensors.insert(
            format!("layers.{i}.sigma"),
            Tensor::from_vector(&f.sigma_retained),
        );
        tensors.insert(format!("layers.{i}.w_o"), Tensor::from_matrix(&layer.w_o));
        if f.whitening.kind == WhiteningKind::Activation {
            tensors.insert(
                format!("layers.{i}.whiten_diag"),
                Tensor::from_vector(&f.whitening.diag),
            );
        }
        layer_metas.push(LayerMeta {
            rank: f.rank,
            beta: f.beta,
            rotation_h1: layer.rotations.as_ref().map(|r| r.h1_spec.clone()),
            rotation_h2: layer.rotations.as_ref().map(|r| r.h2_spec.clone()),
            quantized: layer.quantized.as_ref().map(|q| QuantizedLayerMeta {
                beta_opt: q.beta_opt,
                weight_clip: q.weight_clip,
                w_down: QuantizedTensorMeta::from_tensor(&q.w_down),
                w_up_q: QuantizedTensorMeta::from_tensor(&q.w_up_q),
                w_up_k: QuantizedTensorMeta::from_tensor(&q.w_up_k),
                w_up_v: QuantizedTensorMeta::from_tensor(&q.w_up_v),
            }),
        });
    }
    let whitening = model
        .layers
        .first()
        .map(|l| l.factors.whitening.kind)
        .unwrap_or(WhiteningKind::None);
    let meta = QsvdMeta {
        format_version: store::FORMAT_VERSION,
        budget_k: model.budget_k,
        whitening,
        quant_spec: model.quant_spec.clone(),
        layers: layer_metas,
    };
    store::save_container(dir, Some(&model.config), &tensors)?;
    store::save_report(&dir.join(META_FILE), &meta)
}

pub fn parse_meta_bytes(bytes: &[u8]) -> Result<QsvdMeta> {
    let meta: QsvdMeta = serde_json::from_slice(bytes)
        .map_err(|e| Error::Format(format!("{META_FILE}: {e}")))?;
    if meta.format_version != store::FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {META_FILE} format_version {}",
            meta.format_version
        )));
    }
    Ok(meta)
}

pub fn load_compressed(dir: &Path) -> Result<CompressedModel> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(Error::MissingFile(meta_path.display().to_string()));
    }
    let meta = parse_meta_bytes(&std::fs::read(&meta_path).map_err(|source| Error::Io {
        path: meta_path.display().to_string(),
        source,
    })?)?;
    let (manifest, tensors) = store::load_container(dir)?;
    let config = manifest
        .model_config
        .ok_or_else(|| Error::Format("compressed manifest lacks model_config".into()))?;
    config.validate()?;
    if meta.layers.len() != config.num_layers {
        return Err(Error::Format(format!(
            "{} declares {} layers but config has {}",
            META_FILE,
            meta.layers.len(),
            config.num_layers
        )));
    }
    let get = |name: String| -> Result<&Tensor> {
        tensors
            .get(&name)
            .ok_or_else(|| Error::Format(format!("compressed model lacks tensor '{name}'")))
    };
    let e = config.embed_dim;
    let mut layers = Vec::with_capacity(meta.layers.len());
    for (i, lm) in meta.layers.iter().enumerate() {
        let whitening = match meta.whitening {
            WhiteningKind::None => WhiteningTransform::identity(e),
            WhiteningKind::Activation => WhiteningTransform {
                kind: WhiteningKind::Activation,
                diag: get(format!("layers.{i}.whiten_diag"))?.data.clone(),
            },
        };
        let sigma = get(format!("layers.{i}.sigma"))?.data.clone();
        if sigma.len() != lm.rank {
            return Err(Error::Format(format!(
                "layer {i}: sigma length {} != declared rank {}",
                sigma.len(),
                lm.rank
            )));
        }
        let factors = LayerFactors {
            rank: lm.rank,
            beta: lm.beta,
            sigma_retained: sigma,
            w_down: get(format!("layers.{i}.w_down"))?.as_matrix()?,
            w_up_q: get(format!("layers.{i}.w_up_q"))?.as_matrix()?,
            w_up_k: get(format!("layers.{i}.w_up_k"))?.as_matrix()?,
            w_up_v: get(format!("layers.{i}.w_up_v"))?.as_matrix()?,
            whitening,
            u: get(format!("layers.{i}.svd_u"))?.as_matrix()?,
            vt: get(format!("layers.{i}.svd_vt"))?.as_matrix()?,
        };
        let rotations = match (&lm.rotation_h1, &lm.rotation_h2) {
            (Some(h1), Some(h2)) => Some(RotationPair::from_specs(h1.clone(), h2.clone())?),
            (None, None) => None,
            _ => {
                return Err(Error::Format(format!(
                    "layer {i}: rotation pair is half-specified"
                )))
            }
        };
        let quantized = match &lm.quantized {
            Some(qm) => {
                let spec = meta.quant_spec.clone().ok_or_else(|| {
                    Error::Format("quantized layers present but quant_spec missing".into())
                })?;
                let rot = rotations
                    .clone()
                    .ok_or_else(|| Error::Format(format!("layer {i}: quantized without rotations")))?;
                Some(QuantizedLayer {
                    w_down: qm.w_down.to_tensor()?,
                    w_up_q: qm.w_up_q.to_tensor()?,
                    w_up_k: qm.w_up_k.to_tensor()?,
                    w_up_v: qm.w_up_v.to_tensor()?,
                    beta_opt: qm.beta_opt,
                    weight_clip: qm.weight_clip,
                    rotations: rot,
                    spec,
                })
            }
            None => None,
        };
        layers.push(CompressedLayer {
            factors,
            w_o: get(format!("layers.{i}.w_o"))?.as_matrix()?,
            rotations,
            quantized,
        });
    }
    Ok(CompressedModel {
        config,
        w_in: get("embed.w_in".into())?.as_matrix()?,
        w_head: get("head.w_out".into())?.as_matrix()?,
        layers,
        budget_k: meta.budget_k,
        quant_spec: meta.quant_spec,
    })
}
