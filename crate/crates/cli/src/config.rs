//! The experiment configuration file.
//!
//! One TOML file drives every pipeline stage. Absent keys fall back to
//! the documented defaults, unknown keys are rejected, and every value
//! is range-checked at load time with the offending key named in the
//! error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use cllmr_core::inferencer::{DebiasTarget, InferenceConfig, InferenceMode};
use cllmr_core::profiles::Dataset;
use cllmr_core::spectrum::NoiseMode;
use cllmr_core::trainer::losses::AlignmentForm;
use cllmr_core::trainer::{EncoderChoice, TrainSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{key}: {message}")]
    Constraint { key: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `synthetic` or a path to a tab-separated interaction file.
    pub source: String,
    /// Prompt template family for profile generation.
    pub dataset: Dataset,
    /// Optional JSON-lines item metadata (`{"id", "title", ...}`) for
    /// file-backed datasets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta: Option<PathBuf>,
    /// Rows below this rating are dropped at load time.
    pub min_rating: f64,
    pub split_seed: u64,
    pub ratios: [u32; 3],
    /// Synthetic-source shape knobs, ignored for file sources.
    pub users: usize,
    pub items: usize,
    pub blocks: usize,
    pub interactions_per_user: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "synthetic".to_string(),
            dataset: Dataset::Custom,
            meta: None,
            min_rating: 0.0,
            split_seed: 0,
            ratios: [4, 1, 1],
            users: 500,
            items: 300,
            blocks: 4,
            interactions_per_user: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilesSection {
    /// `mock` or `http`; `http` reads its endpoint from the
    /// environment.
    pub provider: String,
    /// `hash_mock` or `file`.
    pub embedder: String,
    /// Vector width of the hash-mock embedder.
    pub embed_dim: usize,
    /// CEMB files for the `file` embedder, keyed by dense node id.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_embedding_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item_embedding_file: Option<PathBuf>,
}

impl Default for ProfilesSection {
    fn default() -> Self {
        ProfilesSection {
            provider: "mock".to_string(),
            embedder: "hash_mock".to_string(),
            embed_dim: 64,
            user_embedding_file: None,
            item_embedding_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    pub rank: usize,
    pub epsilon: f64,
    pub sign_mode: NoiseMode,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection { rank: 32, epsilon: 0.01, sign_mode: NoiseMode::SignAligned }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: EncoderChoice,
    /// Hidden widths of the encoder trunks.
    pub hidden: Vec<usize>,
    pub pretrain_epochs: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { kind: EncoderChoice::Conditioned, hidden: vec![128], pretrain_epochs: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub dim: usize,
    pub layers: usize,
    pub init_scale: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection { dim: 32, layers: 2, init_scale: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub lr: f64,
    pub batch: usize,
    /// Alignment loss weight β.
    pub beta: f64,
    /// Alignment temperature τ.
    pub tau: f64,
    pub elbo_weight: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub gates: bool,
    pub alignment: bool,
    pub alignment_form: AlignmentForm,
    /// Validation cutoff for early stopping.
    pub eval_n: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            lr: 1e-3,
            batch: 4096,
            beta: 0.1,
            tau: 1.0,
            elbo_weight: 1.0,
            patience: 10,
            max_epochs: 100,
            gates: true,
            alignment: true,
            alignment_form: AlignmentForm::CrossPair,
            eval_n: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub alpha: f64,
    pub n_list: Vec<usize>,
    pub mode: InferenceMode,
    pub target: DebiasTarget,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let base = InferenceConfig::default();
        InferenceSection { alpha: base.alpha, n_list: base.n_list, mode: base.mode, target: base.target }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every named random stream derives from it.
    pub seed: u64,
    /// Artifact directory, overridable by `--out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub profiles: ProfilesSection,
    pub spectrum: SpectrumSection,
    pub encoder: EncoderSection,
    pub backbone: BackboneSection,
    pub trainer: TrainerSection,
    pub inference: InferenceSection,
}

fn check(ok: bool, key: &'static str, message: String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Constraint { key, message })
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = self;
        check(!c.data.source.is_empty(), "data.source", "must not be empty".into())?;
        check(c.data.min_rating >= 0.0, "data.min_rating", "must be nonnegative".into())?;
        check(
            c.data.ratios.iter().all(|&r| r >= 1),
            "data.ratios",
            format!("every share must be at least 1, got {:?}", c.data.ratios),
        )?;
        if c.data.source == "synthetic" {
            check(c.data.users >= 1, "data.users", "must be at least 1".into())?;
            check(c.data.items >= 1, "data.items", "must be at least 1".into())?;
            check(c.data.blocks >= 1, "data.blocks", "must be at least 1".into())?;
            check(
                c.data.interactions_per_user >= 1,
                "data.interactions_per_user",
                "must be at least 1".into(),
            )?;
        }
        check(
            matches!(c.profiles.provider.as_str(), "mock" | "http"),
            "profiles.provider",
            format!("must be 'mock' or 'http', got '{}'", c.profiles.provider),
        )?;
        check(
            matches!(c.profiles.embedder.as_str(), "hash_mock" | "file"),
            "profiles.embedder",
            format!("must be 'hash_mock' or 'file', got '{}'", c.profiles.embedder),
        )?;
        check(c.profiles.embed_dim >= 1, "profiles.embed_dim", "must be at least 1".into())?;
        if c.profiles.embedder == "file" {
            check(
                c.profiles.user_embedding_file.is_some() && c.profiles.item_embedding_file.is_some(),
                "profiles.embedder",
                "the file embedder needs user_embedding_file and item_embedding_file".into(),
            )?;
        }
        check(
            c.spectrum.rank >= 1,
            "spectrum.rank",
            format!("must be at least 1, got {}", c.spectrum.rank),
        )?;
        check(
            c.spectrum.epsilon >= 0.0,
            "spectrum.epsilon",
            format!("must be nonnegative, got {}", c.spectrum.epsilon),
        )?;
        check(c.backbone.dim >= 1, "backbone.dim", "must be at least 1".into())?;
        check(
            c.backbone.init_scale > 0.0,
            "backbone.init_scale",
            format!("must be positive, got {}", c.backbone.init_scale),
        )?;
        check(c.trainer.lr > 0.0, "trainer.lr", format!("must be positive, got {}", c.trainer.lr))?;
        check(c.trainer.batch >= 1, "trainer.batch", "must be at least 1".into())?;
        check(c.trainer.beta >= 0.0, "trainer.beta", "must be nonnegative".into())?;
        check(c.trainer.tau > 0.0, "trainer.tau", format!("must be positive, got {}", c.trainer.tau))?;
        check(c.trainer.elbo_weight >= 0.0, "trainer.elbo_weight", "must be nonnegative".into())?;
        check(c.trainer.max_epochs >= 1, "trainer.max_epochs", "must be at least 1".into())?;
        check(c.trainer.eval_n >= 1, "trainer.eval_n", "must be at least 1".into())?;
        check(
            c.inference.alpha >= 0.0,
            "inference.alpha",
            format!("must be nonnegative, got {}", c.inference.alpha),
        )?;
        check(!c.inference.n_list.is_empty(), "inference.n_list", "must not be empty".into())?;
        check(
            c.inference.n_list.iter().all(|&n| n >= 1),
            "inference.n_list",
            "every cutoff must be at least 1".into(),
        )?;
        Ok(())
    }

    /// Assembles the trainer's settings from the relevant sections.
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            embed_dim: self.backbone.dim,
            layers: self.backbone.layers,
            lr: self.trainer.lr,
            batch_size: self.trainer.batch,
            max_epochs: self.trainer.max_epochs,
            patience: self.trainer.patience,
            align_weight: self.trainer.beta,
            temperature: self.trainer.tau,
            elbo_weight: self.trainer.elbo_weight,
            init_scale: self.backbone.init_scale,
            sse_hidden: self.encoder.hidden.clone(),
            sse_pretrain_epochs: self.encoder.pretrain_epochs,
            encoder: self.encoder.kind,
            use_gates: self.trainer.gates,
            use_alignment: self.trainer.alignment,
            alignment_form: self.trainer.alignment_form,
            eval_n: self.trainer.eval_n,
            seed: self.seed,
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            alpha: self.inference.alpha,
            n_list: self.inference.n_list.clone(),
            mode: self.inference.mode,
            target: self.inference.target,
        }
    }

    /// Canonical content hash covering every setting and the seed.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = toml::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads, parses, and validates a configuration file. An empty file
/// yields the defaults.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    config.validate()?;
    Ok(config)
}
