//! Pipeline stages behind the command-line tool. Each stage consumes the
//! previous stage's directory or JSON artifact and is deterministic given
//! (inputs, seed); every report echoes the effective configuration and
//! its hash.

use crate::compressed::{self, CompressedLayer, CompressedModel};
use crate::config::{BudgetSpec, PipelineConfig, RotationChoice, Whitening};
use crate::cost::{self, CostReport, Scheme};
use crate::engine::{self, EvalReport, ModelVariant};
use crate::error::{Error, Result};
use crate::factorize::{
    compute_whitening, factorize_layer, reconstruct_qkv, truncate, WhiteningTransform,
};
use crate::linalg::DenseMatrix;
use crate::model::{AttentionLayerWeights, ToyModel};
use crate::quant::{optimize_beta, quantize_layer, RotationKind, RotationPair, RotationSpec};
use crate::rank::{allocate, score_identity, score_identity_whitened, ImportanceTable, RankAllocation};
use crate::store::{self, CalibrationSet};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Report envelope: stage payload plus the configuration that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report<T> {
    pub config: PipelineConfig,
    pub config_hash: String,
    #[serde(flatten)]
    pub payload: T,
}

impl<T> Report<T> {
    pub fn new(config: &PipelineConfig, payload: T) -> Self {
        Report {
            config: config.clone(),
            config_hash: config.hash(),
            payload,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorizeSummary {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub ranks: Vec<usize>,
    pub beta: f64,
    pub whitening: Whitening,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub embed_dim: usize,
    pub num_layers: usize,
    #[serde(flatten)]
    pub table: ImportanceTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocationReport {
    pub embed_dim: usize,
    // Not flattened: integer map keys survive JSON only without the
    // buffering that flatten introduces.
    pub allocation: RankAllocation,
}

/// Rebuilds a dense model from factors; exact when factors are full rank.
pub fn to_toy(model: &CompressedModel) -> Result<ToyModel> {
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let (w_q, w_k, w_v) = reconstruct_qkv(&l.factors)?;
            Ok(AttentionLayerWeights {
                w_q,
                w_k,
                w_v,
                w_o: l.w_o.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyModel {
        config: model.config.clone(),
        w_in: model.w_in.clone(),
        layers,
        w_head: model.w_head.clone(),
    })
}

fn load_calib(path: &Path) -> Result<CalibrationSet> {
    store::load_calibration(path)
}

/// Per-layer normalized attention inputs over a calibration set,
/// `result[layer][sample]`.
fn layer_inputs(model: &ToyModel, calib: &CalibrationSet) -> Result<Vec<Vec<DenseMatrix>>> {
    let mut per_layer = vec![Vec::with_capacity(calib.num_samples()); model.layers.len()];
    for input in &calib.inputs {
        let fwd = model.forward(input)?;
        for (li, xn) in fwd.normed_inputs().into_iter().enumerate() {
            per_layer[li].push(xn.clone());
        }
    }
    Ok(per_layer)
}

/// Full-rank joint factorization of every attention layer.
pub fn stage_factorize(
    model_dir: &Path,
    calib_path: Option<&Path>,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<Report<FactorizeSummary>> {
    cfg.validate()?;
    let (config, tensors) = store::load_checkpoint(model_dir)?;
    let model = ToyModel::from_tensors(&config, &tensors)?;
    let beta = cfg.beta_mode.fixed_or_default();
    let whitenings: Vec<WhiteningTransform> = match cfg.whitening {
        Whitening::None => vec![WhiteningTransform::identity(config.embed_dim); config.num_layers],
        Whitening::Activation => {
            let calib_path = calib_path.ok_or_else(|| {
                Error::Usage("whitening=activation requires --calib".into())
            })?;
            let calib = load_calib(calib_path)?;
            layer_inputs(&model, &calib)?
                .iter()
                .map(|inputs| compute_whitening(inputs))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let layers = model
        .layers
        .iter()
        .zip(&whitenings)
        .map(|(l, w)| {
            Ok(CompressedLayer {
                factors: factorize_layer(l, w, beta)?,
                w_o: l.w_o.clone(),
                rotations: None,
                quantized: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = FactorizeSummary {
        num_layers: config.num_layers,
        embed_dim: config.embed_dim,
        ranks: layers.iter().map(|l| l.factors.rank).collect(),
        beta,
        whitening: cfg.whitening,
    };
    let compressed = CompressedModel {
        config,
        w_in: model.w_in.clone(),
        w_head: model.w_head.clone(),
        layers,
        budget_k: None,
        quant_spec: None,
    };
    compressed::save_compressed(out_dir, &compressed)?;
    let report = Report::new(cfg, summary);
    store::save_report(&out_dir.join("factorize_report.json"), &report)?;
    Ok(report)
}

/// First-order importance of every retained singular value, from exact
/// gradients over the calibration set.
pub fn stage_score(
    factored_dir: &Path,
    calib_path: &Path,
    out_path: &Path,
    cfg: &PipelineConfig,
) -> Result<Report<ScoreReport>> {
    cfg.validate()?;
    let model = compressed::load_compressed(factored_dir)?;
    let toy = to_toy(&model)?;
    let calib = load_calib(calib_path)?;
    let grads = toy.gradient_records(&calib)?;
    let factors: Vec<_> = model.layers.iter().map(|l| l.factors.clone()).collect();
    let whitened = model
        .layers
        .iter()
        .any(|l| l.factors.whitening.kind == crate::factorize::WhiteningKind::Activation);
    let table = if whitened {
        score_identity_whitened(&factors, &grads)?
    } else {
        score_identity(&factors, &grads)?
    };
    let report = Report::new(
        cfg,
        ScoreReport {
            embed_dim: model.config.embed_dim,
            num_layers: model.config.num_layers,
            table,
        },
    );
    store::save_report(out_path, &report)?;
    Ok(report)
}

/// Resolves the budget against the model shape (a ratio budget converts
/// to a global count first) and allocates ranks by global importance.
pub fn stage_allocate(
    scores_path: &Path,
    out_path: &Path,
    cfg: &PipelineConfig,
) -> Result<Report<AllocationReport>> {
    cfg.validate()?;
    let scores: Report<ScoreReport> = store::load_json(scores_path)?;
    let payload = &scores.payload;
    let budget = match cfg.budget {
        BudgetSpec::Count(k) => k,
        BudgetSpec::Ratio(r) => cost::budget_for_ratio(r, payload.embed_dim, payload.num_layers)?,
    };
    let allocation = allocate(&payload.table, budget)?;
    let report = Report::new(
        cfg,
        AllocationReport {
            embed_dim: payload.embed_dim,
            allocation,
        },
    );
    store::save_report(out_path, &report)?;
    Ok(report)
}

/// Truncates the full-rank factors to the allocated ranks.
pub fn stage_compress(
    factored_dir: &Path,
    allocation_path: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<CompressedModel> {
    cfg.validate()?;
    let mut model = compressed::load_compressed(factored_dir)?;
    let alloc: Report<AllocationReport> = store::load_json(allocation_path)?;
    let alloc = &alloc.payload.allocation;
    if alloc.per_layer_rank.len() != model.layers.len() {
        return Err(Error::Usage(format!(
            "allocation covers {} layers, model has {}",
            alloc.per_layer_rank.len(),
            model.layers.len()
        )));
    }
    for (li, layer) in model.layers.iter_mut().enumerate() {
        let r = *alloc
            .per_layer_rank
            .get(&li)
            .ok_or_else(|| Error::Usage(format!("allocation lacks layer {li}")))?;
        layer.factors = truncate(&layer.factors, r)?;
    }
    model.budget_k = Some(alloc.budget);
    compressed::save_compressed(out_dir, &model)?;
    Ok(model)
}

fn rotation_pair_for(
    choice: RotationChoice,
    e: usize,
    r: usize,
    seed: u64,
) -> Result<RotationPair> {
    match choice {
        RotationChoice::None => Ok(RotationPair::identity(e, r)),
        RotationChoice::Hadamard | RotationChoice::Random => {
            let pick = |dim: usize, s: u64| {
                if choice == RotationChoice::Hadamard && dim.is_power_of_two() {
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
    }
}

/// Rotates and fake-quantizes the factors of every layer, optionally
/// searching the split exponent per layer on calibration activations.
pub fn stage_quantize(
    compressed_dir: &Path,
    calib_path: Option<&Path>,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<CompressedModel> {
    cfg.validate()?;
    let spec = cfg.quant_spec()?;
    let mut model = compressed::load_compressed(compressed_dir)?;
    let needs_calib = matches!(cfg.beta_mode, crate::config::BetaMode::Search);
    let activations = if needs_calib {
        let calib_path = calib_path
            .ok_or_else(|| Error::Usage("beta=search requires --calib".into()))?;
        let toy = to_toy(&model)?;
        Some(layer_inputs(&toy, &load_calib(calib_path)?)?)
    } else {
        None
    };
    let e = model.config.embed_dim;
    for (li, layer) in model.layers.iter_mut().enumerate() {
        let rotations = rotation_pair_for(
            cfg.rotation,
            e,
            layer.factors.rank,
            cfg.seed.wrapping_add(2 * li as u64),
        )?;
        let beta = match &activations {
            Some(acts) => optimize_beta(&layer.factors, &rotations, &spec, &acts[li])?,
            None => cfg.beta_mode.fixed_or_default(),
        };
        layer.quantized = Some(quantize_layer(&layer.factors, &rotations, &spec, beta)?);
        layer.rotations = Some(rotations);
    }
    model.quant_spec = Some(spec);
    compressed::save_compressed(out_dir, &model)?;
    Ok(model)
}

/// Runs the latent engine over the calibration set against the dense
/// full-precision baseline.
pub fn stage_eval(
    compressed_dir: &Path,
    model_dir: &Path,
    calib_path: &Path,
    out_path: &Path,
    cfg: &PipelineConfig,
) -> Result<Report<EvalReport>> {
    cfg.validate()?;
    let model = compressed::load_compressed(compressed_dir)?;
    let (config, tensors) = store::load_checkpoint(model_dir)?;
    let baseline = ToyModel::from_tensors(&config, &tensors)?;
    let calib = load_calib(calib_path)?;
    let quantized = model.is_quantized();
    let eval = engine::evaluate(
        ModelVariant::Latent {
            model: &model,
            quantized,
        },
        &baseline,
        &calib,
    )?;
    let report = Report::new(cfg, eval);
    store::save_report(out_path, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostComparison {
    pub embed_dim: usize,
    pub seq_len: usize,
    pub ranks: Vec<usize>,
    pub schemes: Vec<CostReport>,
}

/// Three-scheme cost comparison for a compressed model (or a uniform-rank
/// hypothetical when no model directory is given).
pub fn stage_cost(
    compressed_dir: Option<&Path>,
    seq_len: usize,
    uniform: Option<(usize, usize, usize)>,
    cfg: &PipelineConfig,
) -> Result<Report<CostComparison>> {
    cfg.validate()?;
    let (embed_dim, ranks) = match (compressed_dir, uniform) {
        (Some(dir), _) => {
            let model = compressed::load_compressed(dir)?;
            (model.config.embed_dim, model.ranks())
        }
        (None, Some((e, r, layers))) => (e, vec![r; layers]),
        (None, None) => {
            return Err(Error::Usage(
                "cost needs a compressed model dir or explicit shape".into(),
            ))
        }
    };
    let schemes = vec![
        cost::cost(Scheme::Dense, embed_dim, seq_len, &ranks)?,
        cost::cost(Scheme::PerMatrixSvd, embed_dim, seq_len, &ranks)?,
        cost::cost(Scheme::JointSvd, embed_dim, seq_len, &ranks)?,
    ];
    Ok(Report::new(
        cfg,
        CostComparison {
            embed_dim,
            seq_len,
            ranks,
            schemes,
        },
    ))
}

/// Aligned text rendering of the three-scheme comparison.
pub fn cost_table(cmp: &CostComparison) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>12} {:>12} {:>14} {:>8} {:>8}\n",
        "scheme", "alpha", "eta", "gamma", "R1", "R2"
    ));
    for s in &cmp.schemes {
        let name = match s.scheme {
            Scheme::Dense => "dense",
            Scheme::PerMatrixSvd => "per-matrix-svd",
            Scheme::JointSvd => "joint-svd",
        };
        out.push_str(&format!(
            "{:<16} {:>12} {:>12} {:>14} {:>7.2}% {:>7.2}%\n",
            name,
            s.alpha,
            s.eta,
            s.gamma,
            s.r1 * 100.0,
            s.r2 * 100.0
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BetaMode;
    use crate::store::{
        generate_synthetic_calibration, generate_toy_checkpoint, save_calibration,
        save_checkpoint, ModelConfig,
    };
    use std::path::PathBuf;
    use tempfile::tempdir;

    fn setup(dir: &Path, config: &ModelConfig, seed: u64) -> (PathBuf, PathBuf) {
        let model_dir = dir.join("model");
        let calib_dir = dir.join("calib");
        let tensors = generate_toy_checkpoint(config, seed);
        save_checkpoint(&model_dir, config, &tensors).unwrap();
        let calib =
            generate_synthetic_calibration(config, 4, 8, seed + 1, &Default::default()).unwrap();
        save_calibration(&calib_dir, &calib).unwrap();
        (model_dir, calib_dir)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            embed_dim: 8,
            num_heads: 2,
            head_dim: 4,
            uses_rope: false,
            vocab_or_input_dim: 8,
        }
    }

    #[test]
    fn full_chain_fp_full_rank_recovers_baseline() {
        let tmp = tempdir().unwrap();
        let (model_dir, calib_dir) = setup(tmp.path(), &small_config(), 31);
        let cfg = PipelineConfig::default();

        let fac = tmp.path().join("fac");
        stage_factorize(&model_dir, None, &fac, &cfg).unwrap();
        let scores = tmp.path().join("scores.json");
        stage_score(&fac, &calib_dir, &scores, &cfg).unwrap();
        let alloc = tmp.path().join("alloc.json");
        stage_allocate(&scores, &alloc, &cfg).unwrap();
        let comp = tmp.path().join("comp");
        stage_compress(&fac, &alloc, &comp, &cfg).unwrap();
        let quant = tmp.path().join("quant");
        stage_quantize(&comp, None, &quant, &cfg).unwrap();
        let eval_path = tmp.path().join("eval.json");
        let report = stage_eval(&quant, &model_dir, &calib_dir, &eval_path, &cfg).unwrap();
        assert!(
            report.payload.output_mse_vs_baseline <= 1e-6,
            "mse = {}",
            report.payload.output_mse_vs_baseline
        );
        // Full rank r = E caches E elements per token vs 2E dense.
        assert_eq!(report.payload.r2, 0.5);
        // Report on disk parses back.
        let back: Report<EvalReport> = store::load_json(&eval_path).unwrap();
        assert_eq!(back.config_hash, cfg.hash());
    }

    #[test]
    fn ratio_budget_lands_near_target() {
        let tmp = tempdir().unwrap();
        let config = ModelConfig {
            num_layers: 2,
            embed_dim: 16,
            num_heads: 2,
            head_dim: 8,
            uses_rope: false,
            vocab_or_input_dim: 16,
        };
        let (model_dir, calib_dir) = setup(tmp.path(), &config, 37);
        let mut cfg = PipelineConfig::default();
        cfg.budget = BudgetSpec::Ratio(0.1875);

        let fac = tmp.path().join("fac");
        stage_factorize(&model_dir, None, &fac, &cfg).unwrap();
        let scores = tmp.path().join("scores.json");
        stage_score(&fac, &calib_dir, &scores, &cfg).unwrap();
        let alloc = tmp.path().join("alloc.json");
        let alloc_report = stage_allocate(&scores, &alloc, &cfg).unwrap();
        assert_eq!(alloc_report.payload.allocation.budget, 12); // 0.1875 * 2*16*2
        let comp = tmp.path().join("comp");
        stage_compress(&fac, &alloc, &comp, &cfg).unwrap();
        let eval_path = tmp.path().join("eval.json");
        let report = stage_eval(&comp, &model_dir, &calib_dir, &eval_path, &cfg).unwrap();
        let slack = 1.0 / (2.0 * 16.0 * 2.0);
        assert!((report.payload.r2 - 0.1875).abs() <= slack);
    }

    #[test]
    fn factorize_is_deterministic_on_disk() {
        let tmp = tempdir().unwrap();
        let (model_dir, _) = setup(tmp.path(), &small_config(), 41);
        let cfg = PipelineConfig::default();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        stage_factorize(&model_dir, None, &a, &cfg).unwrap();
        stage_factorize(&model_dir, None, &b, &cfg).unwrap();
        for f in ["manifest.json", "tensors.bin", "qsvd_meta.json", "factorize_report.json"] {
            assert_eq!(
                std::fs::read(a.join(f)).unwrap(),
                std::fs::read(b.join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn whitening_without_calib_is_usage_error() {
        let tmp = tempdir().unwrap();
        let (model_dir, _) = setup(tmp.path(), &small_config(), 43);
        let mut cfg = PipelineConfig::default();
        cfg.whitening = Whitening::Activation;
        let err = stage_factorize(&model_dir, None, &tmp.path().join("out"), &cfg).unwrap_err();
        assert_eq!(err.kind().exit_code(), 3);
    }

    #[test]
    fn quantize_search_and_w4a4_chain_is_finite() {
        let tmp = tempdir().unwrap();
        let (model_dir, calib_dir) = setup(tmp.path(), &small_config(), 47);
        let mut cfg = PipelineConfig::default();
        cfg.scheme = "w4a4".into();
        cfg.beta_mode = BetaMode::Search;
        cfg.budget = BudgetSpec::Count(10);

        let fac = tmp.path().join("fac");
        stage_factorize(&model_dir, None, &fac, &cfg).unwrap();
        let scores = tmp.path().join("scores.json");
        stage_score(&fac, &calib_dir, &scores, &cfg).unwrap();
        let alloc = tmp.path().join("alloc.json");
        stage_allocate(&scores, &alloc, &cfg).unwrap();
        let comp = tmp.path().join("comp");
        stage_compress(&fac, &alloc, &comp, &cfg).unwrap();
        let quant = tmp.path().join("quant");
        stage_quantize(&comp, Some(&calib_dir), &quant, &cfg).unwrap();
        let eval_path = tmp.path().join("eval.json");
        let report = stage_eval(&quant, &model_dir, &calib_dir, &eval_path, &cfg).unwrap();
        assert!(report.payload.loss.is_finite());
        assert!(report.payload.output_mse_vs_baseline.is_finite());
        assert_eq!(report.payload.weight_bits, Some(4));
    }

    #[test]
    fn whitened_chain_runs_and_scores() {
        let tmp = tempdir().unwrap();
        let (model_dir, calib_dir) = setup(tmp.path(), &small_config(), 53);
        let mut cfg = PipelineConfig::default();
        cfg.whitening = Whitening::Activation;
        let fac = tmp.path().join("fac");
        stage_factorize(&model_dir, Some(&calib_dir), &fac, &cfg).unwrap();
        let scores = tmp.path().join("scores.json");
        let report = stage_score(&fac, &calib_dir, &scores, &cfg).unwrap();
        assert_eq!(report.payload.table.method, "identity_whitened");
        // Whitened full-rank factors still reconstruct the dense model.
        let eval_path = tmp.path().join("eval.json");
        let eval = stage_eval(&fac, &model_dir, &calib_dir, &eval_path, &cfg).unwrap();
        assert!(eval.payload.output_mse_vs_baseline <= 1e-6);
    }

    #[test]
    fn cost_stage_matches_eval_ratio() {
        let tmp = tempdir().unwrap();
        let (model_dir, calib_dir) = setup(tmp.path(), &small_config(), 59);
        let mut cfg = PipelineConfig::default();
        cfg.budget = BudgetSpec::Count(8);
        let fac = tmp.path().join("fac");
        stage_factorize(&model_dir, None, &fac, &cfg).unwrap();
        let scores = tmp.path().join("scores.json");
        stage_score(&fac, &calib_dir, &scores, &cfg).unwrap();
        let alloc = tmp.path().join("alloc.json");
        stage_allocate(&scores, &alloc, &cfg).unwrap();
        let comp = tmp.path().join("comp");
        stage_compress(&fac, &alloc, &comp, &cfg).unwrap();

        let cost_report = stage_cost(Some(&comp), 8, None, &cfg).unwrap();
        let joint = &cost_report.payload.schemes[2];
        let eval_path = tmp.path().join("eval.json");
        let eval = stage_eval(&comp, &model_dir, &calib_dir, &eval_path, &cfg).unwrap();
        assert_eq!(joint.r2, eval.payload.r2);
        let table = cost_table(&cost_report.payload);
        assert!(table.contains("joint-svd") && table.contains("dense"));
    }

    #[test]
    fn stage_mismatch_names_missing_artifact() {
        let tmp = tempdir().unwrap();
        let cfg = PipelineConfig::default();
        let missing = tmp.path().join("nope");
        let err = stage_quantize(&missing, None, &tmp.path().join("out"), &cfg).unwrap_err();
        assert_eq!(err.kind().exit_code(), 2);
    }
}
