//! Ranking, evaluation, counterfactual correction, and the ablation
//! harness.
//!
//! Scoring always starts from the gated embeddings `e`. Counterfactual
//! mode subtracts `α` times the gate vector before ranking, undoing
//! part of the propensity the gates learned; factual mode ranks `e`
//! as-is. Metrics are plain Recall and NDCG at the requested cutoffs.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::EmbeddingTable;
use crate::dataio::InteractionDataset;
use crate::par;
use crate::spectrum::{
    self, build_conditioners, conditioner_table, NoiseMode, Side, SpectralFactors,
};
use crate::trainer::{
    self, fit, EncoderChoice, SideInputs, TrainError, TrainSettings, TrainedState,
};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("user {user} is outside the table's {n_users} users")]
    UnknownUser { user: u32, n_users: usize },
    #[error("vectors have lengths {left} and {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("alpha must be nonnegative, got {alpha}")]
    NegativeAlpha { alpha: f64 },
    #[error("runner-up metric must be positive, got {runner_up}")]
    NonPositiveRunnerUp { runner_up: f64 },
    #[error("counterfactual mode with alpha > 0 needs a model trained with gates")]
    MissingGates,
    #[error("metric cutoffs must be nonempty")]
    EmptyCutoffs,
    #[error("unknown ablation variant '{name}'")]
    UnknownVariant { name: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Spectrum(#[from] spectrum::SpectrumError),
}

/// Whether ranking corrects for the learned propensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Rank `e − α·correction`.
    #[default]
    Counterfactual,
    /// Rank the gated embeddings untouched.
    Factual,
}

/// What gets scaled by `α` and subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasTarget {
    /// The raw gate vector `g`.
    #[default]
    Gate,
    /// The gate-weighted share of the embedding itself, `g ⊙ e`, so
    /// each coordinate shrinks in proportion to its gate value.
    GatedComponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Correction strength; zero reproduces factual ranking exactly.
    pub alpha: f64,
    /// Cutoff depths for Recall and NDCG.
    pub n_list: Vec<usize>,
    pub mode: InferenceMode,
    pub target: DebiasTarget,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha: 0.5,
            n_list: vec![10, 30, 50],
            mode: InferenceMode::Counterfactual,
            target: DebiasTarget::Gate,
        }
    }
}

/// `ẽ = e − α·g` for one node.
pub fn debias(e: &[f64], g: &[f64], alpha: f64) -> Result<Vec<f64>, InferError> {
    if alpha < 0.0 {
        return Err(InferError::NegativeAlpha { alpha });
    }
    if e.len() != g.len() {
        return Err(InferError::DimMismatch { left: e.len(), right: g.len() });
    }
    Ok(e.iter().zip(g).map(|(e, g)| e - alpha * g).collect())
}

/// Items of `table` ranked for `user` by descending score, ties broken
/// toward the smaller item index, with `exclude` removed.
pub fn rank_items(
    table: &EmbeddingTable,
    user: u32,
    exclude: &[u32],
) -> Result<Vec<u32>, InferError> {
    if user as usize >= table.n_users {
        return Err(InferError::UnknownUser { user, n_users: table.n_users });
    }
    let mut excluded = vec![false; table.n_items()];
    for &i in exclude {
        excluded[i as usize] = true;
    }
    let u = table.user_row(user);
    let mut scored: Vec<(u32, f64)> = (0..table.n_items() as u32)
        .filter(|&i| !excluded[i as usize])
        .map(|i| (i, table.item_row(i).dot(&u)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Fraction of `relevant` appearing in the first `n` ranked items.
/// `relevant` must be sorted ascending and nonempty.
pub fn recall_at_n(ranked: &[u32], relevant: &[u32], n: usize) -> f64 {
    assert!(!relevant.is_empty(), "relevant set must be nonempty");
    let hits = ranked
        .iter()
        .take(n)
        .filter(|i| relevant.binary_search(i).is_ok())
        .count();
    hits as f64 / relevant.len() as f64
}

/// Binary NDCG: each hit at 1-based position `p ≤ n` earns
/// `1/log2(p+1)`, normalized by the best arrangement of
/// `min(|relevant|, n)` hits. `relevant` must be sorted and nonempty.
pub fn ndcg_at_n(ranked: &[u32], relevant: &[u32], n: usize) -> f64 {
    assert!(!relevant.is_empty(), "relevant set must be nonempty");
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(n)).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    dcg / ideal
}

/// Relative improvement of `best` over `runner_up`, in percent.
pub fn improvement(best: f64, runner_up: f64) -> Result<f64, InferError> {
    if runner_up <= 0.0 {
        return Err(InferError::NonPositiveRunnerUp { runner_up });
    }
    Ok((best - runner_up) / runner_up * 100.0)
}

/// One evaluated user's metrics, parallel to the report's `n_list`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserReport {
    pub user: u32,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

/// Evaluation output: mean metrics per cutoff, the per-user table they
/// are the means of, and the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub config: InferenceConfig,
    /// Mean Recall per entry of `config.n_list`.
    pub recall: Vec<f64>,
    /// Mean NDCG per entry of `config.n_list`.
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
    /// Users with no relevant items in the evaluated split.
    pub users_skipped: usize,
    /// Mean per-node norm ratio between the ranked and the gated
    /// embeddings; 1.0 means the correction changed nothing.
    pub retained_effect: f64,
    pub per_user: Vec<UserReport>,
    #[serde(skip)]
    pub runtime_seconds: f64,
}

fn scoring_table(
    model: &trainer::RecModel,
    config: &InferenceConfig,
) -> Result<(EmbeddingTable, f64), InferError> {
    if config.alpha < 0.0 {
        return Err(InferError::NegativeAlpha { alpha: config.alpha });
    }
    let factual = model.factual();
    let ranked = match (config.mode, &model.gates) {
        (InferenceMode::Factual, _) => factual.mat.clone(),
        (InferenceMode::Counterfactual, Some(g)) => match config.target {
            DebiasTarget::Gate => &factual.mat - &(g * config.alpha),
            DebiasTarget::GatedComponent => {
                &factual.mat * &g.mapv(|x| 1.0 - config.alpha * x)
            }
        },
        (InferenceMode::Counterfactual, None) => {
            if config.alpha > 0.0 {
                return Err(InferError::MissingGates);
            }
            factual.mat.clone()
        }
    };
    let mut ratio_sum = 0.0;
    for r in 0..factual.mat.nrows() {
        let before = factual.mat.row(r).dot(&factual.mat.row(r)).sqrt();
        let after = ranked.row(r).dot(&ranked.row(r)).sqrt();
        ratio_sum += if before > 0.0 { after / before } else { 1.0 };
    }
    let retained = ratio_sum / factual.mat.nrows() as f64;
    Ok((EmbeddingTable::from_mat(ranked, model.n_users), retained))
}

/// The embedding table rankings are computed from under `config`:
/// factual mode returns the gated embeddings, counterfactual mode the
/// corrected ones. Items subtract their own gate vector; users
/// likewise.
pub fn counterfactual_table(
    model: &trainer::RecModel,
    config: &InferenceConfig,
) -> Result<EmbeddingTable, InferError> {
    scoring_table(model, config).map(|(table, _)| table)
}

/// Ranks every user and scores the `eval` split. Items a user touched
/// in `train` (and in `prior`, when given) are excluded from their
/// ranking; users without relevant items in `eval` are skipped and
/// counted.
pub fn evaluate(
    model: &trainer::RecModel,
    config: &InferenceConfig,
    train: &InteractionDataset,
    prior: Option<&InteractionDataset>,
    eval: &InteractionDataset,
) -> Result<RankingReport, InferError> {
    if config.n_list.is_empty() {
        return Err(InferError::EmptyCutoffs);
    }
    let start = Instant::now();
    let (table, retained_effect) = scoring_table(model, config)?;

    let train_items = train.items_by_user();
    let prior_items = prior.map(|p| p.items_by_user());
    let eval_items = eval.items_by_user();

    let per_user_options = par::map_indexed(model.n_users, |u| {
        let relevant = &eval_items[u];
        if relevant.is_empty() {
            return None;
        }
        let mut exclude = train_items[u].clone();
        if let Some(prior) = &prior_items {
            exclude.extend_from_slice(&prior[u]);
        }
        let ranked = rank_items(&table, u as u32, &exclude).expect("user within table");
        let recall = config.n_list.iter().map(|&n| recall_at_n(&ranked, relevant, n)).collect();
        let ndcg = config.n_list.iter().map(|&n| ndcg_at_n(&ranked, relevant, n)).collect();
        Some(UserReport { user: u as u32, recall, ndcg })
    });

    let per_user: Vec<UserReport> = per_user_options.into_iter().flatten().collect();
    let users_evaluated = per_user.len();
    let users_skipped = model.n_users - users_evaluated;

    let mut recall = vec![0.0; config.n_list.len()];
    let mut ndcg = vec![0.0; config.n_list.len()];
    for rep in &per_user {
        for (acc, x) in recall.iter_mut().zip(&rep.recall) {
            *acc += x;
        }
        for (acc, x) in ndcg.iter_mut().zip(&rep.ndcg) {
            *acc += x;
        }
    }
    let denom = users_evaluated.max(1) as f64;
    for v in recall.iter_mut().chain(ndcg.iter_mut()) {
        *v /= denom;
    }

    Ok(RankingReport {
        config: config.clone(),
        recall,
        ndcg,
        users_evaluated,
        users_skipped,
        retained_effect,
        per_user,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean factual Recall at one cutoff; the trainer's early-stopping
/// metric.
pub fn validation_recall(
    model: &trainer::RecModel,
    train: &InteractionDataset,
    val: &InteractionDataset,
    n: usize,
) -> f64 {
    let config = InferenceConfig {
        alpha: 0.0,
        n_list: vec![n],
        mode: InferenceMode::Factual,
        target: DebiasTarget::Gate,
    };
    evaluate(model, &config, train, None, val)
        .expect("factual evaluation with a fixed cutoff cannot fail")
        .recall[0]
}

/// Collapse verdicts at fixed fractions of the table width.
const COLLAPSE_FRACTIONS: [f64; 3] = [0.5, 0.25, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseCheck {
    /// Fraction of the full width the effective rank is compared to.
    pub fraction: f64,
    pub collapsed: bool,
}

/// Spectral health of a representation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumDiagnostics {
    /// Descending singular values of the table.
    pub singular_values: Vec<f64>,
    /// `exp` of the entropy of the normalized spectrum; ranges from 1
    /// (one direction dominates) to the table width.
    pub effective_rank: f64,
    pub collapse: Vec<CollapseCheck>,
}

/// `exp(−Σ p ln p)` over the normalized spectrum; 1.0 for an all-zero
/// spectrum.
pub fn effective_rank(singular_values: &[f64]) -> f64 {
    let total: f64 = singular_values.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let entropy: f64 = singular_values
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    entropy.exp()
}

/// Full singular spectrum of a table plus summary diagnostics.
pub fn singular_spectrum(table: &Array2<f64>) -> Result<SpectrumDiagnostics, InferError> {
    let k = table.nrows().min(table.ncols());
    let factors = spectrum::truncated_svd_matrix(table, k, 0)?;
    let eff = effective_rank(&factors.singular_values);
    let width = table.ncols() as f64;
    let collapse = COLLAPSE_FRACTIONS
        .iter()
        .map(|&fraction| CollapseCheck { fraction, collapsed: eff < fraction * width })
        .collect();
    Ok(SpectrumDiagnostics {
        singular_values: factors.singular_values,
        effective_rank: eff,
        collapse,
    })
}

/// The ablation grid: which pieces of the full method are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Everything on, counterfactual inference.
    Full,
    /// Trained exactly like `Full`, ranked with `α = 0`.
    WoConf,
    /// Plain deterministic encoder instead of the variational one.
    WoSse,
    /// Symmetric conditioner noise instead of sign-aligned.
    WoSign,
    /// No conditioner noise at all.
    WoNoise,
    /// Bare backbone: no side information, gates, or alignment.
    Base,
    /// Contrastive side encoder without gates or correction.
    RlmconLike,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WoConf,
        Variant::WoSse,
        Variant::WoSign,
        Variant::WoNoise,
        Variant::Base,
        Variant::RlmconLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoConf => "wo_conf",
            Variant::WoSse => "wo_sse",
            Variant::WoSign => "wo_sign",
            Variant::WoNoise => "wo_noise",
            Variant::Base => "base",
            Variant::RlmconLike => "rlmcon_like",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = InferError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| InferError::UnknownVariant { name: s.to_string() })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything an ablation run needs: the splits, the text embeddings,
/// the spectral factors, and the base configuration the variants
/// perturb.
#[derive(Debug, Clone)]
pub struct AblationContext<'a> {
    pub train: &'a InteractionDataset,
    pub val: &'a InteractionDataset,
    pub test: &'a InteractionDataset,
    pub user_text: &'a Array2<f64>,
    pub item_text: &'a Array2<f64>,
    pub factors: &'a SpectralFactors,
    /// Conditioner noise scale for the variants that keep noise.
    pub epsilon: f64,
    pub settings: TrainSettings,
    pub inference: InferenceConfig,
}

/// A finished ablation run: test-set report, spectral diagnostics of
/// the side representations (of the ranked embeddings when the variant
/// has none), and the trained state itself.
#[derive(Debug)]
pub struct AblationOutcome {
    pub report: RankingReport,
    pub diagnostics: SpectrumDiagnostics,
    pub state: TrainedState,
}

fn side_inputs_for(
    variant: Variant,
    ctx: &AblationContext<'_>,
) -> Result<Option<SideInputs>, InferError> {
    let noise_mode = match variant {
        Variant::WoSign => NoiseMode::Symmetric,
        _ => NoiseMode::SignAligned,
    };
    let epsilon = match variant {
        Variant::WoNoise => 0.0,
        _ => ctx.epsilon,
    };
    match variant {
        Variant::Base => Ok(None),
        _ => {
            let seed = ctx.settings.seed;
            let users = build_conditioners(
                ctx.factors,
                Side::User,
                epsilon,
                noise_mode,
                spectrum::ConditionerMode::PerNode,
                seed,
            )?;
            let items = build_conditioners(
                ctx.factors,
                Side::Item,
                epsilon,
                noise_mode,
                spectrum::ConditionerMode::PerNode,
                seed,
            )?;
            Ok(Some(SideInputs {
                user_text: ctx.user_text.clone(),
                item_text: ctx.item_text.clone(),
                user_cond: conditioner_table(&users),
                item_cond: conditioner_table(&items),
            }))
        }
    }
}

fn settings_for(variant: Variant, base: &TrainSettings) -> TrainSettings {
    let mut s = base.clone();
    match variant {
        Variant::Full | Variant::WoConf | Variant::WoSign | Variant::WoNoise => {}
        Variant::WoSse => s.encoder = EncoderChoice::Plain,
        Variant::Base => {
            s.encoder = EncoderChoice::None;
            s.use_gates = false;
            s.use_alignment = false;
        }
        Variant::RlmconLike => {
            s.encoder = EncoderChoice::Plain;
            s.use_gates = false;
        }
    }
    s
}

fn inference_for(variant: Variant, base: &InferenceConfig) -> InferenceConfig {
    let mut c = base.clone();
    match variant {
        Variant::Full | Variant::WoSse | Variant::WoSign | Variant::WoNoise => {}
        Variant::WoConf => c.alpha = 0.0,
        Variant::Base | Variant::RlmconLike => {
            c.mode = InferenceMode::Factual;
            c.alpha = 0.0;
        }
    }
    c
}

/// Trains and evaluates one ablation variant on the test split.
pub fn run_ablation(
    variant: Variant,
    ctx: &AblationContext<'_>,
) -> Result<AblationOutcome, InferError> {
    let side = side_inputs_for(variant, ctx)?;
    let settings = settings_for(variant, &ctx.settings);
    let state = fit(ctx.train, ctx.val, side.as_ref(), &settings)?;
    let config = inference_for(variant, &ctx.inference);
    let report = evaluate(&state.model, &config, ctx.train, Some(ctx.val), ctx.test)?;
    let diagnostics = match &state.model.side {
        Some(side) => singular_spectrum(side)?,
        None => singular_spectrum(&state.model.factual().mat)?,
    };
    Ok(AblationOutcome { report, diagnostics, state })
}
