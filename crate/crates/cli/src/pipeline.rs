//! The staged experiment pipeline.
//!
//! Each stage reads the artifacts of earlier stages from the output
//! directory and writes its own into a stage subdirectory, capped by a
//! `manifest.json` recording the configuration hash and the seeds in
//! play. A stage whose manifest already matches the current
//! configuration is skipped unless forced, and a missing upstream
//! manifest is reported as a dependency error naming the stage to run
//! first. A lock file at the output root keeps concurrent runs out of
//! the same directory.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use cllmr_core::cemb::{self, Precision};
use cllmr_core::dataio::{self, load_split_dir, write_split_dir, SplitSet};
use cllmr_core::inferencer::{
    self, run_ablation, singular_spectrum, AblationContext, RankingReport, Variant,
};
use cllmr_core::profiles::{
    build_item_prompt, build_user_prompt, embed_profiles, generate_profiles, read_profiles,
    write_profiles, Embedder, HttpProvider, InteractedItem, MockProvider, NodeKind,
    ProfileProvider, ProfileText, PromptText,
};
use cllmr_core::spectrum::{self, build_conditioners, conditioner_table, ConditionerMode, Side, SpectralFactors};
use cllmr_core::synth;
use cllmr_core::trainer::{self, checkpoint, SideInputs};

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{out} is busy: another run holds {lock}; delete the file if that run is gone")]
    Locked { out: PathBuf, lock: PathBuf },
    #[error("stage `{stage}` needs artifacts from `{needed}`; run `{needed}` first")]
    MissingDependency { stage: &'static str, needed: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Profile(#[from] cllmr_core::profiles::ProfileError),
    #[error(transparent)]
    Spectrum(#[from] spectrum::SpectrumError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Infer(#[from] inferencer::InferError),
    #[error(transparent)]
    Table(#[from] cemb::CembError),
}

fn io_err(path: &Path, source: std::io::Error) -> StageError {
    StageError::Io { path: path.to_path_buf(), source }
}

/// The pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PrepareData,
    GenerateProfiles,
    EmbedProfiles,
    BuildSpectrum,
    Train,
    Evaluate,
    Ablate,
    Diagnose,
    Sweep,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::PrepareData,
        Stage::GenerateProfiles,
        Stage::EmbedProfiles,
        Stage::BuildSpectrum,
        Stage::Train,
        Stage::Evaluate,
        Stage::Ablate,
        Stage::Diagnose,
        Stage::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PrepareData => "prepare-data",
            Stage::GenerateProfiles => "generate-profiles",
            Stage::EmbedProfiles => "embed-profiles",
            Stage::BuildSpectrum => "build-spectrum",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
            Stage::Diagnose => "diagnose",
            Stage::Sweep => "sweep",
        }
    }

    /// Subdirectory of the output root this stage writes into.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::PrepareData => "data",
            Stage::GenerateProfiles => "profiles",
            Stage::EmbedProfiles => "embeddings",
            Stage::BuildSpectrum => "spectrum",
            Stage::Train => "train",
            Stage::Evaluate => "eval",
            Stage::Ablate => "ablate",
            Stage::Diagnose => "diagnose",
            Stage::Sweep => "sweep",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether a stage did work or found its artifacts current.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// What every finished stage directory records: which stage wrote it,
/// under which configuration, and with which seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

/// Holds the output-root lock for the duration of a stage run.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(out: &Path) -> Result<LockGuard, StageError> {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "held by a running pipeline stage");
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StageError::Locked { out: out.to_path_buf(), lock: path })
            }
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data fields");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StageError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| StageError::Format { path: path.to_path_buf(), message: e.to_string() })
}

/// A validated configuration bound to an output directory.
pub struct Pipeline {
    config: ExperimentConfig,
    out: PathBuf,
    force: bool,
    hash: String,
}

impl Pipeline {
    /// Validates the configuration, pins it to `out` (the directory
    /// joins the content hash), and returns the runnable pipeline.
    pub fn new(
        mut config: ExperimentConfig,
        out: PathBuf,
        force: bool,
    ) -> Result<Pipeline, StageError> {
        config.out = Some(out.clone());
        config.validate()?;
        let hash = config.hash();
        Ok(Pipeline { config, out, force, hash })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Runs one stage under the output-root lock.
    pub fn run(&self, stage: Stage) -> Result<StageStatus, StageError> {
        let _lock = LockGuard::acquire(&self.out)?;
        match stage {
            Stage::PrepareData => self.prepare_data(),
            Stage::GenerateProfiles => self.generate_profiles(),
            Stage::EmbedProfiles => self.embed_profiles(),
            Stage::BuildSpectrum => self.build_spectrum(),
            Stage::Train => self.train(),
            Stage::Evaluate => self.evaluate(),
            Stage::Ablate => self.ablate(None),
            Stage::Diagnose => self.diagnose(),
            Stage::Sweep => self.sweep(),
        }
    }

    /// Runs a single ablation variant under the lock.
    pub fn run_variant(&self, variant: Variant) -> Result<StageStatus, StageError> {
        let _lock = LockGuard::acquire(&self.out)?;
        self.ablate(Some(variant))
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir())
    }

    fn up_to_date(&self, dir: &Path, stage_name: &str) -> bool {
        if self.force {
            return false;
        }
        let manifest: Result<StageManifest, _> = read_json(&dir.join(MANIFEST_FILE));
        manifest.is_ok_and(|m| m.stage == stage_name && m.config_hash == self.hash)
    }

    /// Writes the stage manifest; runs last so a crashed stage is never
    /// mistaken for a finished one.
    fn finish(&self, dir: &Path, stage_name: &str, seeds: Vec<u64>) -> Result<(), StageError> {
        let manifest = StageManifest {
            stage: stage_name.to_string(),
            config_hash: self.hash.clone(),
            seeds,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    fn require(&self, stage: Stage, needed: Stage) -> Result<(), StageError> {
        let manifest = self.stage_dir(needed).join(MANIFEST_FILE);
        if manifest.exists() {
            Ok(())
        } else {
            Err(StageError::MissingDependency { stage: stage.name(), needed: needed.name() })
        }
    }

    fn load_splits(&self) -> Result<SplitSet, StageError> {
        Ok(load_split_dir(&self.stage_dir(Stage::PrepareData))?)
    }

    fn prepare_data(&self) -> Result<StageStatus, StageError> {
        let dir = self.stage_dir(Stage::PrepareData);
        if self.up_to_date(&dir, Stage::PrepareData.name()) {
            return Ok(StageStatus::Skipped);
        }
        let d = &self.config.data;
        if d.source == "synthetic" {
            let full = synth::dataset(
                d.users,
                d.items,
                d.blocks,
                d.interactions_per_user,
                d.split_seed,
            );
            let splits = full.split((d.ratios[0], d.ratios[1], d.ratios[2]), d.split_seed)?;
            write_split_dir(&dir, &splits)?;
            self.write_synthetic_meta(&dir, &splits)?;
        } else {
            let full = dataio::load_interactions(Path::new(&d.source), d.min_rating)?;
            let splits = full.split((d.ratios[0], d.ratios[1], d.ratios[2]), d.split_seed)?;
            write_split_dir(&dir, &splits)?;
            if let Some(meta) = &d.meta {
                fs::copy(meta, dir.join("item_meta.jsonl")).map_err(|e| io_err(meta, e))?;
            }
        }
        self.finish(&dir, Stage::PrepareData.name(), vec![d.split_seed])?;
        Ok(StageStatus::Ran)
    }

    fn write_synthetic_meta(&self, dir: &Path, splits: &SplitSet) -> Result<(), StageError> {
        let d = &self.config.data;
        let mut meta = String::new();
        for item in 0..d.items {
            let mut obj = serde_json::Map::new();
            obj.insert("id".to_string(), serde_json::json!(item));
            for (key, value) in synth::item_meta(item as u32, d.blocks) {
                obj.insert(key, serde_json::Value::String(value));
            }
            meta.push_str(&serde_json::Value::Object(obj).to_string());
            meta.push('\n');
        }
        let meta_path = dir.join("item_meta.jsonl");
        fs::write(&meta_path, meta).map_err(|e| io_err(&meta_path, e))?;

        let mut reviews = String::new();
        for it in &splits.train.interactions {
            let text = synth::review(it.user, it.item, d.blocks);
            reviews.push_str(&format!("{}\t{}\t{}\n", it.user, it.item, text));
        }
        let reviews_path = dir.join("reviews.tsv");
        fs::write(&reviews_path, reviews).map_err(|e| io_err(&reviews_path, e))
    }

    fn generate_profiles(&self) -> Result<StageStatus, StageError> {
        let stage = Stage::GenerateProfiles;
        let dir = self.stage_dir(stage);
        if self.up_to_date(&dir, stage.name()) {
            return Ok(StageStatus::Skipped);
        }
        self.require(stage, Stage::PrepareData)?;
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

        let splits = self.load_splits()?;
        let data_dir = self.stage_dir(Stage::PrepareData);
        let meta = read_item_meta(&data_dir.join("item_meta.jsonl"))?;
        let reviews = read_reviews(&data_dir.join("reviews.tsv"))?;

        let provider: Box<dyn ProfileProvider> = match self.config.profiles.provider.as_str() {
            "mock" => Box::new(MockProvider::new(self.config.seed)),
            _ => Box::new(HttpProvider::from_env()?),
        };
        let dataset = self.config.data.dataset;

        let mut feedback_by_item: HashMap<u32, Vec<String>> = HashMap::new();
        for ((_, item), text) in &reviews {
            feedback_by_item.entry(*item).or_default().push(text.clone());
        }
        for texts in feedback_by_item.values_mut() {
            texts.sort();
        }

        let mut item_prompts: Vec<(u32, PromptText)> = Vec::new();
        for item in 0..splits.train.n_items as u32 {
            let fields = meta.get(&item).ok_or_else(|| StageError::Format {
                path: data_dir.join("item_meta.jsonl"),
                message: format!("item {item} has no metadata row"),
            })?;
            let feedback = feedback_by_item.get(&item).cloned().unwrap_or_default();
            item_prompts.push((item, build_item_prompt(fields, &feedback, dataset)?));
        }
        let item_profiles = generate_profiles(&*provider, &item_prompts)?;
        write_profiles(&dir.join("items.jsonl"), &item_profiles)?;

        let summaries: HashMap<u32, &str> = item_profiles
            .iter()
            .map(|p| (p.node_id, p.summarisation.as_str()))
            .collect();
        let by_user = splits.train.items_by_user();
        let mut user_prompts: Vec<(u32, PromptText)> = Vec::new();
        let mut cold_users: Vec<u32> = Vec::new();
        for (user, items) in by_user.iter().enumerate() {
            let user = user as u32;
            if items.is_empty() {
                cold_users.push(user);
                continue;
            }
            let interacted: Vec<InteractedItem> = items
                .iter()
                .map(|&item| InteractedItem {
                    title: meta
                        .get(&item)
                        .and_then(|m| m.get("title").cloned())
                        .unwrap_or_else(|| format!("Item {item}")),
                    description: summaries.get(&item).unwrap_or(&"None").to_string(),
                    review: reviews.get(&(user, item)).cloned().unwrap_or_else(|| "None".into()),
                })
                .collect();
            user_prompts.push((user, build_user_prompt(&interacted, dataset)?));
        }
        let mut user_profiles = generate_profiles(&*provider, &user_prompts)?;
        for user in cold_users {
            user_profiles.push(ProfileText {
                node_id: user,
                kind: NodeKind::User,
                summarisation: "No interaction history available.".to_string(),
                reasoning: "The training split holds no items for this user.".to_string(),
            });
        }
        user_profiles.sort_by_key(|p| p.node_id);
        write_profiles(&dir.join("users.jsonl"), &user_profiles)?;

        self.finish(&dir, stage.name(), vec![self.config.seed])?;
        Ok(StageStatus::Ran)
    }

    fn embed_profiles(&self) -> Result<StageStatus, StageError> {
        let stage = Stage::EmbedProfiles;
        let dir = self.stage_dir(stage);
        if self.up_to_date(&dir, stage.name()) {
            return Ok(StageStatus::Skipped);
        }
        self.require(stage, Stage::GenerateProfiles)?;
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

        let splits = self.load_splits()?;
        let profile_dir = self.stage_dir(Stage::GenerateProfiles);
        let p = &self.config.profiles;
        let pick = |file: &Option<PathBuf>| -> Embedder {
            match p.embedder.as_str() {
                "file" => Embedder::FileImport {
                    path: file.clone().expect("validated when the embedder is `file`"),
                },
                _ => Embedder::HashMock { dim: p.embed_dim },
            }
        };

        for (name, total, embedder) in [
            ("users", splits.train.n_users, pick(&p.user_embedding_file)),
            ("items", splits.train.n_items, pick(&p.item_embedding_file)),
        ] {
            let profiles = read_profiles(&profile_dir.join(format!("{name}.jsonl")))?;
            let table = embed_profiles(&profiles, &embedder)?;
            let matrix = table.to_matrix(total)?;
            cemb::write_table(&dir.join(format!("{name}.cemb")), &matrix, Precision::F64)?;
        }

        self.finish(&dir, stage.name(), vec![])?;
        Ok(StageStatus::Ran)
    }

    fn build_spectrum(&self) -> Result<StageStatus, StageError> {
        let stage = Stage::BuildSpectrum;
        let dir = self.stage_dir(stage);
        if self.up_to_date(&dir, stage.name()) {
            return Ok(StageStatus::Skipped);
        }
        self.require(stage, Stage::PrepareData)?;
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

        let splits = self.load_splits()?;
        let factors =
            spectrum::truncated_svd(&splits.train, self.config.spectrum.rank, self.config.seed)?;
        cemb::write_table(&dir.join("left.cemb"), &factors.left, Precision::F64)?;
        cemb::write_table(&dir.join("right.cemb"), &factors.right, Precision::F64)?;
        write_sigma(&dir.join("sigma.csv"), &factors.singular_values)?;

        self.finish(&dir, stage.name(), vec![self.config.seed])?;
        Ok(StageStatus::Ran)
    }

    fn load_factors(&self) -> Result<SpectralFactors, StageError> {
        let dir = self.stage_dir(Stage::BuildSpectrum);
        let left = cemb::read_table(&dir.join("left.cemb"))?;
        let right = cemb::read_table(&dir.join("right.cemb"))?;
        let singular_values = read_sigma(&dir.join("sigma.csv"))?;
        Ok(SpectralFactors { k: singular_values.len(), left, right, singular_values })
    }

    /// Conditioners for both sides under the configured noise settings,
    /// stacked into trainer-ready tables.
    fn side_inputs(&self) -> Result<SideInputs, StageError> {
        let factors = self.load_factors()?;
        let dir = self.stage_dir(Stage::EmbedProfiles);
        let user_text = cemb::read_table(&dir.join("users.cemb"))?;
        let item_text = cemb::read_table(&dir.join("items.cemb"))?;
        let s = &self.config.spectrum;
        let mut tables = Vec::new();
        for side in [Side::User, Side::Item] {
            let conditioners = build_conditioners(
                &factors,
                side,
                s.epsilon,
                s.sign_mode,
                ConditionerMode::PerNode,
                self.config.seed,
            )?;
            tables.push(conditioner_table(&conditioners));
        }
        let item_cond = tables.pop().expect("two sides pushed");
        let user_cond = tables.pop().expect("two sides pushed");
        Ok(SideInputs { user_text, item_text, user_cond, item_cond })
    }

    fn train(&self) -> Result<StageStatus, StageError> {
        let stage = Stage::Train;
        let dir = self.stage_dir(stage);
        if self.up_to_date(&dir, stage.name()) {
            return Ok(StageStatus::Skipped);
        }
        self.require(stage, Stage::PrepareData)?;
        let settings = self.config.train_settings();
        let side = if settings.encoder == trainer::EncoderChoice::None {
            None
        } else {
            self.require(stage, Stage::EmbedProfiles)?;
            self.require(stage, Stage::BuildSpectrum)?;
            Some(self.side_inputs()?)
        };
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

        let splits = self.load_splits()?;
        let state = trainer::fit(&splits.train, &splits.val, side.as_ref(), &settings)?;
        checkpoint::save(&dir.join("checkpoint"), &state)?;
        let log_path = dir.join("log.jsonl");
        fs::write(&log_path, trainer::render_training_log(&state.history))
            .map_err(|e| io_err(&log_path, e))?;

        self.finish(&dir, stage.name(), vec![self.config.seed])?;
        Ok(StageStatus::Ran)
    }

    fn evaluate(&self) -> Result<StageStatus, StageError> {
        let stage = Stage::Evaluate;
        let dir = self.stage_dir(stage);
        if self.up_to_date(&dir, stage.name()) {
            return Ok(StageStatus::Skipped);
        }
        self.require(stage, Stage::Train)?;
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

        let splits = self.load_splits()?;
        let state = checkpoint::load(&self.stage_dir(Stage::Train).join("checkpoint"))?;
        let inference = self.config.inference_config();
        let report = inferencer::evaluate(
            &state.model,
            &inference,
            &splits.train,
            Some(&splits.val),
            &splits.test,
        )?;
        write_json(&dir.join("report.json"), &report)?;

        if state.model.gates.is_some() {
            let mut sweep = Vec::new();
            for alpha in [0.0, 0.25, 0.5, 1.0] {
                let config = inferencer::InferenceConfig { alpha, ..inference.clone() };
                let report = inferencer::evaluate(
                    &state.model,
                    &config,
                    &splits.train,
                    Some(&splits.val),
                    &splits.test,
                )?;
                sweep.push(AlphaPoint {
                    alpha,
                    recall: report.recall,
                    ndcg: report.ndcg,
                });
            }
            write_json(&dir.join("alpha_sweep.json"), &sweep)?;
        }

        self.finish(&dir, stage.name(), vec![self.config.seed])?;
        Ok(StageStatus::Ran)
    }

    fn ablation_requirements(&self, stage: Stage) -> Result<(), StageError> {
        self.require(stage, Stage::PrepareData)?;
        self.require(stage, Stage::EmbedProfiles)?;
        self.require(stage, Stage::BuildSpectrum)
    }

    fn ablate(&self, only: Option<Variant>) -> Result<StageStatus, StageError> {
        let stage = Stage::Ablate;
        let dir = self.stage_dir(stage);
        if only.is_none() && self.up_to_date(&dir, stage.name()) {
            return Ok(StageStatus::Skipped);
        }
        self.ablation_requirements(stage)?;
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

        let splits = self.load_splits()?;
        let embed_dir = self.stage_dir(Stage::EmbedProfiles);
        let user_text = cemb::read_table(&embed_dir.join("users.cemb"))?;
        let item_text = cemb::read_table(&embed_dir.join("items.cemb"))?;
        let factors = self.load_factors()?;
        let ctx = AblationContext {
            train: &splits.train,
            val: &splits.val,
            test: &splits.test,
            user_text: &user_text,
            item_text: &item_text,
            factors: &factors,
            epsilon: self.config.spectrum.epsilon,
            settings: self.config.train_settings(),
            inference: self.config.inference_config(),
        };

        let variants: &[Variant] = match &only {
            Some(v) => std::slice::from_ref(v),
            None => &Variant::ALL,
        };
        let mut any_ran = false;
        for &variant in variants {
            let vdir = dir.join(variant.name());
            if self.up_to_date(&vdir, variant.name()) {
                continue;
            }
            fs::create_dir_all(&vdir).map_err(|e| io_err(&vdir, e))?;
            let outcome = run_ablation(variant, &ctx)?;
            write_json(&vdir.join("report.json"), &outcome.report)?;
            write_json(&vdir.join("diagnostics.json"), &outcome.diagnostics)?;
            self.finish(&vdir, variant.name(), vec![self.config.seed])?;
            any_ran = true;
        }
        if only.is_none() {
            self.finish(&dir, stage.name(), vec![self.config.seed])?;
        }
        Ok(if any_ran { StageStatus::Ran } else { StageStatus::Skipped })
    }

    fn diagnose(&self) -> Result<StageStatus, StageError> {
        let stage = Stage::Diagnose;
        let dir = self.stage_dir(stage);
        if self.up_to_date(&dir, stage.name()) {
            return Ok(StageStatus::Skipped);
        }
        self.require(stage, Stage::Train)?;
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

        let state = checkpoint::load(&self.stage_dir(Stage::Train).join("checkpoint"))?;
        let factual;
        let table: &Array2<f64> = match &state.model.side {
            Some(side) => side,
            None => {
                factual = state.model.factual().mat;
                &factual
            }
        };
        let diagnostics = singular_spectrum(table)?;
        write_sigma(&dir.join("spectrum.csv"), &diagnostics.singular_values)?;
        write_json(&dir.join("diagnostics.json"), &diagnostics)?;

        self.finish(&dir, stage.name(), vec![self.config.seed])?;
        Ok(StageStatus::Ran)
    }

    /// Retrains across the spectrum grid: three ranks at the configured
    /// noise scale, then five noise scales at the configured rank. Each
    /// cell runs the basic pipeline in its own subdirectory and its
    /// test report is copied up next to the summary.
    fn sweep(&self) -> Result<StageStatus, StageError> {
        let stage = Stage::Sweep;
        let dir = self.stage_dir(stage);
        if self.up_to_date(&dir, stage.name()) {
            return Ok(StageStatus::Skipped);
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

        let mut cells: Vec<(String, ExperimentConfig)> = Vec::new();
        for rank in SWEEP_RANKS {
            let mut config = self.config.clone();
            config.spectrum.rank = rank;
            cells.push((format!("rank_{rank}"), config));
        }
        for epsilon in SWEEP_EPSILONS {
            let mut config = self.config.clone();
            config.spectrum.epsilon = epsilon;
            cells.push((format!("eps_{epsilon}"), config));
        }

        let mut summary = Vec::new();
        for (name, config) in cells {
            let rank = config.spectrum.rank;
            let epsilon = config.spectrum.epsilon;
            let sub = Pipeline::new(config, dir.join("runs").join(&name), self.force)?;
            for sub_stage in [
                Stage::PrepareData,
                Stage::GenerateProfiles,
                Stage::EmbedProfiles,
                Stage::BuildSpectrum,
                Stage::Train,
                Stage::Evaluate,
            ] {
                sub.run(sub_stage)?;
            }
            let report_src = sub.stage_dir(Stage::Evaluate).join("report.json");
            let report: RankingReport = read_json(&report_src)?;
            let dest = dir.join(format!("{name}.json"));
            fs::copy(&report_src, &dest).map_err(|e| io_err(&dest, e))?;
            summary.push(SweepCell {
                name,
                rank,
                epsilon,
                n_list: report.config.n_list.clone(),
                recall: report.recall,
                ndcg: report.ndcg,
            });
        }
        write_json(&dir.join("summary.json"), &summary)?;

        self.finish(&dir, stage.name(), vec![self.config.seed])?;
        Ok(StageStatus::Ran)
    }
}

const SWEEP_RANKS: [usize; 3] = [16, 32, 64];
const SWEEP_EPSILONS: [f64; 5] = [0.001, 0.005, 0.01, 0.05, 0.1];

/// One evaluated correction strength in the factual-to-counterfactual
/// sweep written next to the main report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// One grid cell of the spectrum sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub name: String,
    pub rank: usize,
    pub epsilon: f64,
    pub n_list: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

fn write_sigma(path: &Path, values: &[f64]) -> Result<(), StageError> {
    let mut text = String::from("index,value\n");
    for (i, v) in values.iter().enumerate() {
        text.push_str(&format!("{i},{v}\n"));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_sigma(path: &Path) -> Result<Vec<f64>, StageError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |line: usize, what: &str| StageError::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {what}"),
    };
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "index,value" {
                return Err(bad(1, "expected the header `index,value`"));
            }
            continue;
        }
        let (_, value) = line.split_once(',').ok_or_else(|| bad(i + 1, "expected two columns"))?;
        values.push(
            value.parse::<f64>().map_err(|_| bad(i + 1, "second column is not a number"))?,
        );
    }
    Ok(values)
}

type ItemMeta = HashMap<u32, std::collections::BTreeMap<String, String>>;

fn read_item_meta(path: &Path) -> Result<ItemMeta, StageError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |line: usize, what: String| StageError::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {what}"),
    };
    let mut meta = ItemMeta::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let object: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
        let mut fields = std::collections::BTreeMap::new();
        let mut id = None;
        for (key, value) in object {
            if key == "id" {
                id = value.as_u64();
                continue;
            }
            let text = match value {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            fields.insert(key, text);
        }
        let id = id.ok_or_else(|| bad(i + 1, "missing an integer `id`".to_string()))?;
        if meta.insert(id as u32, fields).is_some() {
            return Err(bad(i + 1, format!("item {id} appears twice")));
        }
    }
    Ok(meta)
}

fn read_reviews(path: &Path) -> Result<HashMap<(u32, u32), String>, StageError> {
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |line: usize, what: &str| StageError::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {what}"),
    };
    let mut reviews = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let user = parts
            .next()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| bad(i + 1, "first column is not a user index"))?;
        let item = parts
            .next()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| bad(i + 1, "second column is not an item index"))?;
        let text = parts.next().ok_or_else(|| bad(i + 1, "missing the review column"))?;
        reviews.insert((user, item), text.to_string());
    }
    Ok(reviews)
}
