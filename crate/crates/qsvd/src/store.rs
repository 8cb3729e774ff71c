//! On-disk formats: checkpoints, calibration sets, and the tensor container.
//!
//! A container directory holds `manifest.json` (UTF-8, fixed key order) and
//! `tensors.bin` (little-endian IEEE-754 f32, row-major). Payloads are f32
//! on disk; all in-memory arithmetic stays in f64. Round trips are
//! byte-exact.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

/// Model hyperparameters carried alongside checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub uses_rope: bool,
    pub vocab_or_input_dim: usize,
}

impl ModelConfig {
    /// Default toy config: 4 layers, E=32, 4 heads, input_dim=32.
    pub fn toy_default() -> Self {
        ModelConfig {
            num_layers: 4,
            embed_dim: 32,
            num_heads: 4,
            head_dim: 8,
            uses_rope: false,
            vocab_or_input_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Format(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.head_dim != self.embed_dim / self.num_heads {
            return Err(Error::Format(format!(
                "head_dim {} != embed_dim/num_heads {}",
                self.head_dim,
                self.embed_dim / self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorManifest {
    pub format_version: u32,
    pub checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    pub entries: Vec<ManifestEntry>,
}

/// An n-dimensional tensor; matrices are the 2-D case.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(m: &DenseMatrix) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn as_matrix(&self) -> Result<DenseMatrix> {
        if self.shape.len() != 2 {
            return Err(Error::Format(format!(
                "expected 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        DenseMatrix::from_vec(self.shape[0], self.shape[1], self.data.clone())
    }

    /// Slice `[i, :, :]` of a 3-D tensor as a matrix.
    pub fn slice3(&self, i: usize) -> Result<DenseMatrix> {
        if self.shape.len() != 3 {
            return Err(Error::Format(format!(
                "expected 3-D tensor, got shape {:?}",
                self.shape
            )));
        }
        let (n, r, c) = (self.shape[0], self.shape[1], self.shape[2]);
        if i >= n {
            return Err(Error::Format(format!("slice index {i} out of {n}")));
        }
        DenseMatrix::from_vec(r, c, self.data[i * r * c..(i + 1) * r * c].to_vec())
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn parse_manifest_bytes(bytes: &[u8]) -> Result<TensorManifest> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?;
    let manifest: TensorManifest =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest JSON: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Structural validation: dtype, shape/length agreement, uniqueness,
/// overlap, and blob bounds.
pub fn validate_manifest(manifest: &TensorManifest, blob_len: u64) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for e in &manifest.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name '{}'", e.name)));
        }
        if e.dtype != "f32" {
            return Err(Error::Format(format!(
                "entry '{}': unsupported dtype '{}'",
                e.name, e.dtype
            )));
        }
        let implied = 4u64 * e.shape.iter().map(|&s| s as u64).product::<u64>();
        if implied != e.length {
            return Err(Error::ShapeInconsistency {
                name: e.name.clone(),
                declared: e.length,
                implied,
            });
        }
        let end = e.offset.checked_add(e.length).ok_or_else(|| Error::OutOfBounds {
            name: e.name.clone(),
            offset: e.offset,
            length: e.length,
            blob_len,
        })?;
        if end > blob_len {
            return Err(Error::OutOfBounds {
                name: e.name.clone(),
                offset: e.offset,
                length: e.length,
                blob_len,
            });
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!(
                "overlapping tensors '{}' and '{}'",
                w[0].2, w[1].2
            )));
        }
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Writes a tensor container. Entries are laid out in sorted-name order so
/// identical content always produces identical bytes.
pub fn save_container(
    dir: &Path,
    config: Option<&ModelConfig>,
    tensors: &HashMap<String, Tensor>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut names: Vec<&String> = tensors.keys().collect();
    names.sort();
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for name in names {
        let t = &tensors[name];
        let offset = blob.len() as u64;
        for &v in &t.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset,
            length: 4 * t.num_elements() as u64,
        });
    }
    let manifest = TensorManifest {
        format_version: FORMAT_VERSION,
        checksum: sha256_hex(&blob),
        model_config: config.cloned(),
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    write_file(&dir.join("tensors.bin"), &blob)?;
    write_file(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(())
}

pub fn load_container(dir: &Path) -> Result<(TensorManifest, HashMap<String, Tensor>)> {
    let manifest = parse_manifest_bytes(&read_file(&dir.join("manifest.json"))?)?;
    let blob = read_file(&dir.join("tensors.bin"))?;
    validate_manifest(&manifest, blob.len() as u64)?;
    let actual = sha256_hex(&blob);
    if actual != manifest.checksum {
        return Err(Error::ChecksumMismatch {
            path: dir.join("tensors.bin").display().to_string(),
            expected: manifest.checksum.clone(),
            actual,
        });
    }
    let mut tensors = HashMap::new();
    for e in &manifest.entries {
        let start = e.offset as usize;
        let end = (e.offset + e.length) as usize;
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(
            e.name.clone(),
            Tensor {
                shape: e.shape.clone(),
                data,
            },
        );
    }
    Ok((manifest, tensors))
}

/// Checkpoint = container whose manifest carries a `ModelConfig`.
pub fn save_checkpoint(
    dir: &Path,
    config: &ModelConfig,
    tensors: &HashMap<String, Tensor>,
) -> Result<()> {
    config.validate()?;
    save_container(dir, Some(config), tensors)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, HashMap<String, Tensor>)> {
    let (manifest, tensors) = load_container(dir)?;
    let config = manifest
        .model_config
        .ok_or_else(|| Error::Format("checkpoint manifest lacks model_config".into()))?;
    config.validate()?;
    Ok((config, tensors))
}

/// Calibration inputs and per-sequence supervision targets.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    /// N matrices, each L x input_dim.
    pub inputs: Vec<DenseMatrix>,
    /// N matrices, each L x out_dim.
    pub targets: Vec<DenseMatrix>,
}

impl CalibrationSet {
    pub fn num_samples(&self) -> usize {
        self.inputs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.rows())
    }
}

/// Options for the synthetic calibration generator.
#[derive(Debug, Clone)]
pub struct CalibrationGenOptions {
    /// Channels scaled by `outlier_scale` to plant channelwise outliers.
    pub outlier_channels: Vec<usize>,
    pub outlier_scale: f64,
}

impl Default for CalibrationGenOptions {
    fn default() -> Self {
        CalibrationGenOptions {
            outlier_channels: vec![3],
            outlier_scale: 50.0,
        }
    }
}

/// Deterministic seeded Gaussian inputs with planted channelwise outliers,
/// plus Gaussian targets.
pub fn generate_synthetic_calibration(
    config: &ModelConfig,
    n: usize,
    l: usize,
    seed: u64,
    options: &CalibrationGenOptions,
) -> Result<CalibrationSet> {
    if n == 0 || l == 0 {
        return Err(Error::InvalidArgument("N and L must be >= 1".into()));
    }
    let input_dim = config.vocab_or_input_dim;
    let out_dim = config.vocab_or_input_dim;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = DenseMatrix::zeros(l, input_dim);
        for v in x.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for &c in &options.outlier_channels {
            if c < input_dim {
                x.scale_col(c, options.outlier_scale);
            }
        }
        let mut t = DenseMatrix::zeros(l, out_dim);
        for v in t.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        inputs.push(x);
        targets.push(t);
    }
    Ok(CalibrationSet { inputs, targets })
}

pub fn save_calibration(dir: &Path, set: &CalibrationSet) -> Result<()> {
    let n = set.inputs.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty calibration set".into()));
    }
    let (l, in_dim) = (set.inputs[0].rows(), set.inputs[0].cols());
    let (tl, out_dim) = (set.targets[0].rows(), set.targets[0].cols());
    let mut inputs = Vec::with_capacity(n * l * in_dim);
    let mut targets = Vec::with_capacity(n * tl * out_dim);
    for (x, t) in set.inputs.iter().zip(&set.targets) {
        inputs.extend_from_slice(x.data());
        targets.extend_from_slice(t.data());
    }
    let mut tensors = HashMap::new();
    tensors.insert(
        "inputs".to_string(),
        Tensor {
            shape: vec![n, l, in_dim],
            data: inputs,
        },
    );
    tensors.insert(
        "targets".to_string(),
        Tensor {
            shape: vec![n, tl, out_dim],
            data: targets,
        },
    );
    save_container(dir, None, &tensors)
}

pub fn load_calibration(dir: &Path) -> Result<CalibrationSet> {
    let (_, tensors) = load_container(dir)?;
    let inputs_t = tensors
        .get("inputs")
        .ok_or_else(|| Error::Format("calibration container lacks 'inputs'".into()))?;
    let targets_t = tensors
        .get("targets")
        .ok_or_else(|| Error::Format("calibration container lacks 'targets'".into()))?;
    if inputs_t.shape.len() != 3 || targets_t.shape.len() != 3 {
        return Err(Error::Format("calibration tensors must be 3-D".into()));
    }
    let n = inputs_t.shape[0];
    if targets_t.shape[0] != n {
        return Err(Error::Format("inputs/targets sample count mismatch".into()));
    }
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        inputs.push(inputs_t.slice3(i)?);
        targets.push(targets_t.slice3(i)?);
    }
    Ok(CalibrationSet { inputs, targets })
}

/// Writes a JSON report with the struct's declared key order.
pub fn save_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    write_file(path, json.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Seeded Gaussian toy-model weights for the generator CLI and tests.
pub fn generate_toy_checkpoint(config: &ModelConfig, seed: u64) -> HashMap<String, Tensor> {
    let e = config.embed_dim;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut gauss = |rows: usize, cols: usize, scale: f64| {
        let mut m = DenseMatrix::zeros(rows, cols);
        for v in m.data_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = g * scale;
        }
        Tensor::from_matrix(&m)
    };
    let wscale = 1.0 / (e as f64).sqrt();
    let mut tensors = HashMap::new();
    tensors.insert(
        "embed.w_in".into(),
        gauss(config.vocab_or_input_dim, e, wscale),
    );
    for layer in 0..config.num_layers {
        for role in ["w_q", "w_k", "w_v", "w_o"] {
            tensors.insert(format!("layers.{layer}.{role}"), gauss(e, e, wscale));
        }
    }
    tensors.insert(
        "head.w_out".into(),
        gauss(e, config.vocab_or_input_dim, wscale),
    );
    // Keep f32 round trips exact: snap to f32 grid once here.
    for t in tensors.values_mut() {
        for v in &mut t.data {
            *v = *v as f32 as f64;
        }
    }
    let _ = rng.gen::<u64>();
    tensors
}
