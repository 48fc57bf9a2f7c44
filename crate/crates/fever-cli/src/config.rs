//! Pipeline configuration: JSON file with command-line flag overrides (flags
//! win), relative paths resolved against `FEVER_FORGE_DATA` when set.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use fever_core::encoder::{EncoderConfig, ParamDtype};
use fever_core::sentretrieval::{LossMode, SamplingStrategy};

pub const ENV_DATA_ROOT: &str = "FEVER_FORGE_DATA";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub wiki: PathBuf,
    pub train_claims: PathBuf,
    /// Claims to retrieve/predict/score against; defaults to `train_claims`.
    pub eval_claims: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub workers: usize,
    pub k_docs: usize,
    pub mode: LossMode,
    pub sampling: SamplingStrategy,
    pub threshold: Option<f64>,
    /// None uses the mode default (1 epoch; 3 for pairwise HNM).
    pub retrieval_epochs: Option<usize>,
    pub retrieval_lr: f64,
    pub verify_epochs: usize,
    pub verify_lr: f64,
    pub verify_batch: usize,
    pub max_vocab: usize,
    pub scoring_batch: usize,
    pub checkpoint_dtype: ParamDtype,
    pub encoder: EncoderConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            wiki: PathBuf::from("wiki.jsonl"),
            train_claims: PathBuf::from("claims.jsonl"),
            eval_claims: None,
            out_dir: PathBuf::from("out"),
            seed: 42,
            workers: 0,
            k_docs: 7,
            mode: LossMode::Pointwise,
            sampling: SamplingStrategy::Random,
            threshold: None,
            retrieval_epochs: None,
            retrieval_lr: 1e-3,
            verify_epochs: 2,
            verify_lr: 1e-3,
            verify_batch: 32,
            max_vocab: 512,
            scoring_batch: 64,
            checkpoint_dtype: ParamDtype::F64,
            encoder: EncoderConfig::default(),
        }
    }
}

/// Flag-level overrides; every field beats the config file when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<LossMode>,
    pub sampling: Option<SamplingStrategy>,
    pub threshold: Option<f64>,
    pub k_docs: Option<usize>,
    pub epochs: Option<usize>,
    pub workers: Option<usize>,
}

pub fn data_root() -> PathBuf {
    std::env::var_os(ENV_DATA_ROOT)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

impl PipelineConfig {
    /// Load the config file (or defaults), apply flag overrides, and resolve
    /// relative paths against the data root.
    pub fn load(config_path: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig> {
        let mut cfg = match config_path {
            Some(path) => {
                let content = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config file {}", path.display()))?;
                serde_json::from_str(&content)
                    .with_context(|| format!("cannot parse config file {}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            cfg.mode = mode;
        }
        if let Some(sampling) = overrides.sampling {
            cfg.sampling = sampling;
        }
        if let Some(threshold) = overrides.threshold {
            cfg.threshold = Some(threshold);
        }
        if let Some(k) = overrides.k_docs {
            cfg.k_docs = k;
        }
        if let Some(epochs) = overrides.epochs {
            cfg.retrieval_epochs = Some(epochs);
            cfg.verify_epochs = epochs;
        }
        if let Some(workers) = overrides.workers {
            cfg.workers = workers;
        }

        let root = data_root();
        cfg.wiki = resolve(&root, &cfg.wiki);
        cfg.train_claims = resolve(&root, &cfg.train_claims);
        cfg.eval_claims = cfg.eval_claims.map(|p| resolve(&root, &p));
        cfg.out_dir = resolve(&root, &cfg.out_dir);
        Ok(cfg)
    }

    pub fn eval_claims_path(&self) -> &Path {
        self.eval_claims.as_deref().unwrap_or(&self.train_claims)
    }

    /// Stage seeds fan out from the top-level seed by stage index.
    pub fn stage_seed(&self, stage_index: u64) -> u64 {
        self.seed.wrapping_add(stage_index)
    }

    pub fn validate_inputs(&self) -> Result<()> {
        for (name, path) in [
            ("wiki dump", self.wiki.as_path()),
            ("train claims", self.train_claims.as_path()),
            ("eval claims", self.eval_claims_path()),
        ] {
            anyhow::ensure!(
                path.exists(),
                "missing {name} file: {}",
                path.display()
            );
        }
        Ok(())
    }

    // Artifact paths under out_dir.
    pub fn index_path(&self) -> PathBuf {
        self.out_dir.join("index.json")
    }
    pub fn vocab_path(&self) -> PathBuf {
        self.out_dir.join("vocab.txt")
    }
    pub fn retriever_ckpt_path(&self) -> PathBuf {
        self.out_dir.join("retriever.ckpt")
    }
    pub fn retriever_log_path(&self) -> PathBuf {
        self.out_dir.join("retriever_train_log.json")
    }
    pub fn scored_path(&self) -> PathBuf {
        self.out_dir.join("retrieval_scored.jsonl")
    }
    pub fn retrieval_predictions_path(&self) -> PathBuf {
        self.out_dir.join("retrieval_predictions.jsonl")
    }
    pub fn train_retrieval_predictions_path(&self) -> PathBuf {
        if self.eval_claims.is_none() || self.eval_claims.as_deref() == Some(&self.train_claims) {
            self.retrieval_predictions_path()
        } else {
            self.out_dir.join("retrieval_predictions_train.jsonl")
        }
    }
    pub fn verifier_ckpt_path(&self) -> PathBuf {
        self.out_dir.join("verifier.ckpt")
    }
    pub fn verifier_log_path(&self) -> PathBuf {
        self.out_dir.join("verifier_train_log.json")
    }
    pub fn predictions_path(&self) -> PathBuf {
        self.out_dir.join("predictions.jsonl")
    }
    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join("report.json")
    }
    pub fn pr_curve_path(&self) -> PathBuf {
        self.out_dir.join("pr_curve.csv")
    }

    /// Log the fully resolved config next to the artifacts it produced.
    pub fn write_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(self.out_dir.join("config.json"), json + "\n")?;
        Ok(())
    }
}
