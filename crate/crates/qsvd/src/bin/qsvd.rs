//! Command-line front end for the compression pipeline.
//!
//! Exit codes: 0 success, 2 format error, 3 usage error, 4 numerical
//! failure. Errors are emitted as JSON on stderr. Flags override the
//! config file, which overrides defaults.

use clap::{Args, Parser, Subcommand};
use qsvd::config::PipelineConfig;
use qsvd::error::{Error, ErrorKind, Result};
use qsvd::pipeline;
use qsvd::store::{self, ModelConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qsvd", version, about = "Joint-SVD attention compression pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Global rank budget: count:<k> or ratio:<R2>.
    #[arg(long)]
    budget: Option<String>,
    /// Quantization scheme: fp, w8a8, w8a4, w4a4.
    #[arg(long)]
    scheme: Option<String>,
    /// Split exponent: fixed:<v> or search.
    #[arg(long)]
    beta: Option<String>,
    /// Whitening: none or activation.
    #[arg(long)]
    whiten: Option<String>,
    /// Rotation: hadamard, random, or none.
    #[arg(long)]
    rotation: Option<String>,
    /// Worker thread cap for all stages.
    #[arg(long)]
    threads: Option<usize>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg: PipelineConfig = match &self.config {
            Some(path) => store::load_json(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(b) = &self.budget {
            cfg.budget = b.parse()?;
        }
        if let Some(s) = &self.scheme {
            cfg.scheme = s.clone();
        }
        if let Some(b) = &self.beta {
            cfg.beta_mode = b.parse()?;
        }
        if let Some(w) = &self.whiten {
            cfg.whitening = w.parse()?;
        }
        if let Some(r) = &self.rotation {
            cfg.rotation = r.parse()?;
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        cfg.validate()?;
        if let Some(t) = cfg.threads {
            // First initialization wins; later identical runs are no-ops.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy checkpoint and calibration set.
    Gen {
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write a calibration container here.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        embed_dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = false)]
        rope: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Full-rank joint factorization of every attention layer.
    Factorize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// First-order importance scores for all retained singular values.
    Score {
        /// Factorized model directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Output scores JSON.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Global top-k rank allocation from a scores file.
    Allocate {
        /// Scores JSON from `score`.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Truncate full-rank factors to an allocation.
    Compress {
        /// Factorized model directory.
        #[arg(long)]
        model: PathBuf,
        /// Allocation JSON from `allocate`.
        #[arg(long)]
        allocation: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Rotate and fake-quantize compressed factors.
    Quantize {
        /// Compressed model directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate a compressed model against its dense baseline.
    Eval {
        /// Compressed (optionally quantized) model directory.
        #[arg(long)]
        model: PathBuf,
        /// Original dense checkpoint directory.
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Output report JSON.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Three-scheme parameter/cache/FLOP comparison.
    Cost {
        /// Compressed model directory (or use --embed-dim/--rank/--layers).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            out,
            calib,
            layers,
            embed_dim,
            heads,
            seq_len,
            samples,
            rope,
            common,
        } => {
            let cfg = common.resolve()?;
            if embed_dim == 0 || heads == 0 || embed_dim % heads != 0 {
                return Err(Error::Usage(format!(
                    "embed dim {embed_dim} must be a positive multiple of {heads} heads"
                )));
            }
            let config = ModelConfig {
                num_layers: layers,
                embed_dim,
                num_heads: heads,
                head_dim: embed_dim / heads,
                uses_rope: rope,
                vocab_or_input_dim: embed_dim,
            };
            config.validate()?;
            let tensors = store::generate_toy_checkpoint(&config, cfg.seed);
            store::save_checkpoint(&out, &config, &tensors)?;
            if let Some(calib_dir) = calib {
                let set = store::generate_synthetic_calibration(
                    &config,
                    samples,
                    seq_len,
                    cfg.seed.wrapping_add(1),
                    &Default::default(),
                )?;
                store::save_calibration(&calib_dir, &set)?;
            }
            Ok(())
        }
        Command::Factorize {
            model,
            calib,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            pipeline::stage_factorize(&model, calib.as_deref(), &out, &cfg)?;
            Ok(())
        }
        Command::Score {
            model,
            calib,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            pipeline::stage_score(&model, &calib, &out, &cfg)?;
            Ok(())
        }
        Command::Allocate {
            scores,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            pipeline::stage_allocate(&scores, &out, &cfg)?;
            Ok(())
        }
        Command::Compress {
            model,
            allocation,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            pipeline::stage_compress(&model, &allocation, &out, &cfg)?;
            Ok(())
        }
        Command::Quantize {
            model,
            calib,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            pipeline::stage_quantize(&model, calib.as_deref(), &out, &cfg)?;
            Ok(())
        }
        Command::Eval {
            model,
            baseline,
            calib,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            pipeline::stage_eval(&model, &baseline, &calib, &out, &cfg)?;
            Ok(())
        }
        Command::Cost {
            model,
            seq_len,
            embed_dim,
            rank,
            layers,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            let uniform = match (embed_dim, rank, layers) {
                (Some(e), Some(r), Some(l)) => Some((e, r, l)),
                (None, None, None) => None,
                _ => {
                    return Err(Error::Usage(
                        "--embed-dim, --rank, and --layers must be given together".into(),
                    ))
                }
            };
            let report = pipeline::stage_cost(model.as_deref(), seq_len, uniform, &cfg)?;
            print!("{}", pipeline::cost_table(&report.payload));
            if let Some(out) = out {
                store::save_report(&out, &report)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            if e.use_stderr() {
                eprintln!(
                    "{}",
                    serde_json::json!({"error": "usage", "message": e.to_string()})
                );
                return ExitCode::from(ErrorKind::Usage.exit_code() as u8);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": err.kind().as_str(), "message": err.to_string()})
            );
            ExitCode::from(err.kind().exit_code() as u8)
        }
    }
}
