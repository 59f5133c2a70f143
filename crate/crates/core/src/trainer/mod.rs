//! Joint training of the graph recommender, the side-information
//! encoders, and the propensity gates.
//!
//! One optimizer updates every trainable tensor. Each step samples a
//! batch of `(user, positive, negative)` triples, scores them with the
//! gated embeddings, and combines three terms: the pairwise ranking
//! loss, the encoder loss weighted by `elbo_weight`, and the
//! contrastive alignment loss weighted by `align_weight`. Ranking and
//! alignment both consume the gated embeddings, so the gates receive
//! gradient from both paths.

pub mod checkpoint;
pub mod losses;

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, EmbeddingTable};
use crate::dataio::{build_normalized_adjacency, InteractionDataset, NormalizedAdjacency};
use crate::encoders::{
    side_representations_chunked, BaselineEncoder, SseConfig, SseModel,
};
use crate::nn::{sigmoid, Adam, Dense, Tensors};
use crate::seeds;
use losses::{alignment_backward, AlignmentForm};

const SIDE_CHUNK_ROWS: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split has no interactions")]
    EmptyTraining,
    #[error("encoder '{encoder}' needs side inputs but none were given")]
    MissingSideInputs { encoder: String },
    #[error("{table} has {got} rows, dataset expects {want}")]
    SideShape { table: &'static str, got: usize, want: usize },
    #[error("loss became non-finite during epoch {epoch}")]
    NumericalFailure { epoch: usize },
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
}

/// Which side-information encoder feeds the gates and the alignment
/// loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    /// Variational encoder with a spectral conditional prior.
    #[default]
    Conditioned,
    /// Deterministic MLP straight from the text embeddings.
    Plain,
    /// No side information at all; the plain backbone.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Width of the collaborative embeddings, and with it the side
    /// representations and gates.
    pub embed_dim: usize,
    /// Propagation depth of the graph backbone.
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Number of consecutive non-improving validation epochs tolerated
    /// before stopping; zero stops at the first one.
    pub patience: usize,
    /// Weight β on the alignment loss.
    pub align_weight: f64,
    /// Softmax temperature τ of the alignment loss.
    pub temperature: f64,
    /// Weight on the encoder loss when the variational encoder is
    /// active.
    pub elbo_weight: f64,
    /// Standard deviation of the embedding initialization.
    pub init_scale: f64,
    /// Hidden widths of the encoder trunks.
    pub sse_hidden: Vec<usize>,
    /// When nonzero, the variational encoders are trained alone for
    /// this many full-batch epochs and then frozen for the joint run.
    pub sse_pretrain_epochs: usize,
    pub encoder: EncoderChoice,
    pub use_gates: bool,
    pub use_alignment: bool,
    pub alignment_form: AlignmentForm,
    /// Validation cutoff for early stopping (Recall at this depth).
    pub eval_n: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            embed_dim: 32,
            layers: 2,
            lr: 1e-3,
            batch_size: 4096,
            max_epochs: 100,
            patience: 10,
            align_weight: 0.1,
            temperature: 1.0,
            elbo_weight: 1.0,
            init_scale: 0.1,
            sse_hidden: vec![128],
            sse_pretrain_epochs: 0,
            encoder: EncoderChoice::Conditioned,
            use_gates: true,
            use_alignment: true,
            alignment_form: AlignmentForm::CrossPair,
            eval_n: 10,
            seed: 0,
        }
    }
}

/// Per-node text embeddings and spectral conditioners, users and items
/// kept separate.
#[derive(Debug, Clone)]
pub struct SideInputs {
    pub user_text: Array2<f64>,
    pub item_text: Array2<f64>,
    pub user_cond: Array2<f64>,
    pub item_cond: Array2<f64>,
}

/// Affine map from a side representation to per-dimension gate values
/// in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNetwork {
    pub affine: Dense,
}

impl GateNetwork {
    pub fn new(side_dim: usize, gate_dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (side_dim as f64).sqrt();
        GateNetwork { affine: Dense::random(side_dim, gate_dim, std, rng) }
    }

    /// All-zero weights; gates come out exactly one half everywhere.
    pub fn zeros(side_dim: usize, gate_dim: usize) -> Self {
        GateNetwork { affine: Dense::zeros(side_dim, gate_dim) }
    }

    pub fn zeros_like(&self) -> Self {
        GateNetwork { affine: self.affine.zeros_like() }
    }

    /// `σ(W s + b)` per row.
    pub fn gate_values(&self, side: &Array2<f64>) -> Array2<f64> {
        self.affine.forward(side).mapv(sigmoid)
    }

    /// Accumulates parameter gradients and returns the gradient with
    /// respect to the side representations.
    pub fn backward(
        &self,
        side: &Array2<f64>,
        gates: &Array2<f64>,
        grad_gates: &Array2<f64>,
        grads: &mut GateNetwork,
    ) -> Array2<f64> {
        let g_pre = grad_gates * &gates.mapv(|g| g * (1.0 - g));
        self.affine.backward(side, &g_pre, &mut grads.affine)
    }
}

impl Tensors for GateNetwork {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.affine.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.affine.collect_mut(prefix, out);
    }
}

/// Elementwise product of gate values and raw embeddings.
pub fn apply_gate(gates: &Array2<f64>, raw: &Array2<f64>) -> Array2<f64> {
    assert_eq!(gates.dim(), raw.dim(), "gates and embeddings must share a shape");
    gates * raw
}

/// The side-encoder pair, one per node family.
#[derive(Debug, Clone, PartialEq)]
pub enum SideStack {
    Conditioned { user: SseModel, item: SseModel },
    Plain { user: BaselineEncoder, item: BaselineEncoder },
    None,
}

/// Every trainable network apart from the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub stack: SideStack,
    /// `(user gate, item gate)` when gating is enabled.
    pub gates: Option<(GateNetwork, GateNetwork)>,
}

impl Nets {
    pub fn zeros_like(&self) -> Self {
        let stack = match &self.stack {
            SideStack::Conditioned { user, item } => SideStack::Conditioned {
                user: user.zeros_like(),
                item: item.zeros_like(),
            },
            SideStack::Plain { user, item } => {
                SideStack::Plain { user: user.zeros_like(), item: item.zeros_like() }
            }
            SideStack::None => SideStack::None,
        };
        let gates = self.gates.as_ref().map(|(u, i)| (u.zeros_like(), i.zeros_like()));
        Nets { stack, gates }
    }
}

impl Tensors for Nets {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        let tag = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        match &self.stack {
            SideStack::Conditioned { user, item } => {
                user.collect(&tag("user_enc"), out);
                item.collect(&tag("item_enc"), out);
            }
            SideStack::Plain { user, item } => {
                user.collect(&tag("user_enc"), out);
                item.collect(&tag("item_enc"), out);
            }
            SideStack::None => {}
        }
        if let Some((u, i)) = &self.gates {
            u.collect(&tag("user_gate"), out);
            i.collect(&tag("item_gate"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        let tag = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        match &mut self.stack {
            SideStack::Conditioned { user, item } => {
                user.collect_mut(&tag("user_enc"), out);
                item.collect_mut(&tag("item_enc"), out);
            }
            SideStack::Plain { user, item } => {
                user.collect_mut(&tag("user_enc"), out);
                item.collect_mut(&tag("item_enc"), out);
            }
            SideStack::None => {}
        }
        if let Some((u, i)) = &mut self.gates {
            u.collect_mut(&tag("user_gate"), out);
            i.collect_mut(&tag("item_gate"), out);
        }
    }
}

/// Full trainable state: the embedding table plus every network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// Users first, then items; one row per node.
    pub base: Array2<f64>,
    pub nets: Nets,
}

impl ModelState {
    pub fn zeros_like(&self) -> Self {
        ModelState { base: Array2::zeros(self.base.dim()), nets: self.nets.zeros_like() }
    }
}

impl Tensors for ModelState {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        let tag = if prefix.is_empty() { "base".to_string() } else { format!("{prefix}.base") };
        out.push((tag, self.base.as_slice().expect("standard layout")));
        self.nets.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        let tag = if prefix.is_empty() { "base".to_string() } else { format!("{prefix}.base") };
        out.push((tag, self.base.as_slice_mut().expect("standard layout")));
        self.nets.collect_mut(prefix, out);
    }
}

/// Materialized tables ready for scoring; everything inference needs,
/// nothing it does not.
#[derive(Debug, Clone, PartialEq)]
pub struct RecModel {
    pub n_users: usize,
    pub n_items: usize,
    /// Graph-smoothed embeddings, users first.
    pub propagated: Array2<f64>,
    /// Gate values per node, same layout, when gating is enabled.
    pub gates: Option<Array2<f64>>,
    /// Side representations per node when an encoder is active.
    pub side: Option<Array2<f64>>,
}

impl RecModel {
    pub fn dim(&self) -> usize {
        self.propagated.ncols()
    }

    /// Gated embeddings `e = g ⊙ ê`, the scores' left and right factors.
    pub fn factual(&self) -> EmbeddingTable {
        let mat = match &self.gates {
            Some(g) => apply_gate(g, &self.propagated),
            None => self.propagated.clone(),
        };
        EmbeddingTable::from_mat(mat, self.n_users)
    }
}

/// One optimizer step's sampled triples, with the unique node sets the
/// loss terms work over and the reparameterization draws for the
/// variational encoders.
#[derive(Debug, Clone)]
pub struct Batch {
    pub users: Vec<u32>,
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
    /// First-appearance order.
    pub unique_users: Vec<u32>,
    /// Positives in first-appearance order, then unseen negatives.
    pub unique_items: Vec<u32>,
    /// Slots in `unique_items` holding positive items, first-appearance
    /// order; the item half of the alignment loss runs over these.
    pub pos_slots: Vec<usize>,
    pub eps_user: Option<Array2<f64>>,
    pub eps_item: Option<Array2<f64>>,
}

impl Batch {
    pub fn new(users: Vec<u32>, pos: Vec<u32>, neg: Vec<u32>) -> Self {
        assert_eq!(users.len(), pos.len());
        assert_eq!(users.len(), neg.len());
        assert!(!users.is_empty(), "batch must be nonempty");

        let mut unique_users = Vec::new();
        let mut user_slot = HashMap::new();
        for &u in &users {
            user_slot.entry(u).or_insert_with(|| {
                unique_users.push(u);
                unique_users.len() - 1
            });
        }
        let mut unique_items = Vec::new();
        let mut item_slot = HashMap::new();
        let mut pos_slots = Vec::new();
        for &i in &pos {
            let next = unique_items.len();
            let slot = *item_slot.entry(i).or_insert_with(|| {
                unique_items.push(i);
                next
            });
            if !pos_slots.contains(&slot) {
                pos_slots.push(slot);
            }
        }
        for &j in &neg {
            let next = unique_items.len();
            item_slot.entry(j).or_insert_with(|| {
                unique_items.push(j);
                next
            });
        }
        Batch { users, pos, neg, unique_users, unique_items, pos_slots, eps_user: None, eps_item: None }
    }

    /// Attaches standard-normal reparameterization draws sized for the
    /// unique node sets.
    pub fn with_noise(mut self, latent_dim: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |rows: usize| {
            Array2::from_shape_fn((rows, latent_dim), |_| rng.sample::<f64, _>(StandardNormal))
        };
        self.eps_user = Some(draw(self.unique_users.len()));
        self.eps_item = Some(draw(self.unique_items.len()));
        self
    }
}

/// Loss readings from one batch pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchTerms {
    pub bpr: f64,
    pub align: f64,
    pub elbo: f64,
    /// `bpr + align_weight·align + elbo_weight·elbo`.
    pub total: f64,
}

fn gather_rows(table: &Array2<f64>, ids: &[u32], offset: usize) -> Array2<f64> {
    let mut out = Array2::zeros((ids.len(), table.ncols()));
    for (r, &id) in ids.iter().enumerate() {
        out.row_mut(r).assign(&table.row(offset + id as usize));
    }
    out
}

/// One loss evaluation over a batch; see [`batch_gradients`] for the
/// differentiated version.
pub fn batch_loss(
    state: &ModelState,
    adj: &NormalizedAdjacency,
    side: Option<&SideInputs>,
    batch: &Batch,
    settings: &TrainSettings,
) -> BatchTerms {
    batch_pass(state, adj, side, batch, settings, false).0
}

/// Loss and gradients over a batch, the gradients shaped like the
/// model state itself.
pub fn batch_gradients(
    state: &ModelState,
    adj: &NormalizedAdjacency,
    side: Option<&SideInputs>,
    batch: &Batch,
    settings: &TrainSettings,
) -> (BatchTerms, ModelState) {
    let (terms, grads) = batch_pass(state, adj, side, batch, settings, true);
    (terms, grads.expect("gradients requested"))
}

struct FamilyPass {
    side_rep: Array2<f64>,
    gates: Option<Array2<f64>>,
    gated: Array2<f64>,
    elbo: f64,
}

fn batch_pass(
    state: &ModelState,
    adj: &NormalizedAdjacency,
    side: Option<&SideInputs>,
    batch: &Batch,
    settings: &TrainSettings,
    with_grads: bool,
) -> (BatchTerms, Option<ModelState>) {
    let n_users = adj.n_users();
    let propagated = backbone::propagate(adj, &state.base, settings.layers);

    let raw_user = gather_rows(&propagated, &batch.unique_users, 0);
    let raw_item = gather_rows(&propagated, &batch.unique_items, n_users);

    enum FamilyCache<'a> {
        Conditioned { model: &'a SseModel, cache: crate::encoders::SseCache },
        Plain { model: &'a BaselineEncoder, cache: crate::nn::MlpCache },
        None,
    }

    let run_family = |ids: &[u32],
                          raw: &Array2<f64>,
                          texts: Option<&Array2<f64>>,
                          conds: Option<&Array2<f64>>,
                          eps: Option<&Array2<f64>>,
                          model_user_side: bool|
     -> (FamilyPass, FamilyCache<'_>) {
        let gate_net = state.nets.gates.as_ref().map(|(u, i)| if model_user_side { u } else { i });
        match &state.nets.stack {
            SideStack::Conditioned { user, item } => {
                let model = if model_user_side { user } else { item };
                let x_rows = gather_rows(texts.expect("side inputs checked"), ids, 0);
                let c_rows = gather_rows(conds.expect("side inputs checked"), ids, 0);
                let (terms, cache) =
                    model.elbo_with_noise(&x_rows, &c_rows, eps.expect("noise attached"));
                let side_rep = cache.posterior().mu.clone();
                let gates = gate_net.map(|g| g.gate_values(&side_rep));
                let gated = match &gates {
                    Some(g) => apply_gate(g, raw),
                    None => raw.clone(),
                };
                (
                    FamilyPass { side_rep, gates, gated, elbo: terms.total },
                    FamilyCache::Conditioned { model, cache },
                )
            }
            SideStack::Plain { user, item } => {
                let model = if model_user_side { user } else { item };
                let x_rows = gather_rows(texts.expect("side inputs checked"), ids, 0);
                let (side_rep, cache) = model.forward(&x_rows);
                let gates = gate_net.map(|g| g.gate_values(&side_rep));
                let gated = match &gates {
                    Some(g) => apply_gate(g, raw),
                    None => raw.clone(),
                };
                (
                    FamilyPass { side_rep, gates, gated, elbo: 0.0 },
                    FamilyCache::Plain { model, cache },
                )
            }
            SideStack::None => (
                FamilyPass {
                    side_rep: Array2::zeros((0, 0)),
                    gates: None,
                    gated: raw.clone(),
                    elbo: 0.0,
                },
                FamilyCache::None,
            ),
        }
    };

    let (user_pass, user_cache) = run_family(
        &batch.unique_users,
        &raw_user,
        side.map(|s| &s.user_text),
        side.map(|s| &s.user_cond),
        batch.eps_user.as_ref(),
        true,
    );
    let (item_pass, item_cache) = run_family(
        &batch.unique_items,
        &raw_item,
        side.map(|s| &s.item_text),
        side.map(|s| &s.item_cond),
        batch.eps_item.as_ref(),
        false,
    );

    let user_slot: HashMap<u32, usize> =
        batch.unique_users.iter().enumerate().map(|(s, &u)| (u, s)).collect();
    let item_slot: HashMap<u32, usize> =
        batch.unique_items.iter().enumerate().map(|(s, &i)| (i, s)).collect();

    let n_pairs = batch.users.len();
    let mut pos_scores = Vec::with_capacity(n_pairs);
    let mut neg_scores = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let su = user_slot[&batch.users[k]];
        let si = item_slot[&batch.pos[k]];
        let sj = item_slot[&batch.neg[k]];
        pos_scores.push(user_pass.gated.row(su).dot(&item_pass.gated.row(si)));
        neg_scores.push(user_pass.gated.row(su).dot(&item_pass.gated.row(sj)));
    }
    let bpr = losses::bpr_loss(&pos_scores, &neg_scores);

    let has_side = !matches!(state.nets.stack, SideStack::None);
    let align_on = settings.use_alignment && has_side;

    let mut align = 0.0;
    let mut align_grads: Option<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> = None;
    if align_on {
        let mut pos_anchor = Array2::zeros((batch.pos_slots.len(), item_pass.gated.ncols()));
        let mut pos_side = Array2::zeros((batch.pos_slots.len(), item_pass.side_rep.ncols()));
        for (r, &slot) in batch.pos_slots.iter().enumerate() {
            pos_anchor.row_mut(r).assign(&item_pass.gated.row(slot));
            pos_side.row_mut(r).assign(&item_pass.side_rep.row(slot));
        }
        if with_grads {
            let (lu, g_au, g_su) = alignment_backward(
                &user_pass.gated,
                &user_pass.side_rep,
                settings.temperature,
                settings.alignment_form,
            );
            let (li, g_ai, g_si) = alignment_backward(
                &pos_anchor,
                &pos_side,
                settings.temperature,
                settings.alignment_form,
            );
            align = lu + li;
            align_grads = Some((g_au, g_su, g_ai, g_si));
        } else {
            align = losses::alignment_loss(
                &user_pass.gated,
                &user_pass.side_rep,
                settings.temperature,
                settings.alignment_form,
            ) + losses::alignment_loss(
                &pos_anchor,
                &pos_side,
                settings.temperature,
                settings.alignment_form,
            );
        }
    }

    let elbo = user_pass.elbo + item_pass.elbo;
    let terms = BatchTerms {
        bpr,
        align,
        elbo,
        total: bpr + settings.align_weight * align + settings.elbo_weight * elbo,
    };

    if !with_grads {
        return (terms, None);
    }

    let dim = state.base.ncols();
    let (g_pos, g_neg) = losses::bpr_score_grads(&pos_scores, &neg_scores);
    let mut g_e_user: Array2<f64> = Array2::zeros((batch.unique_users.len(), dim));
    let mut g_e_item: Array2<f64> = Array2::zeros((batch.unique_items.len(), dim));
    for k in 0..n_pairs {
        let su = user_slot[&batch.users[k]];
        let si = item_slot[&batch.pos[k]];
        let sj = item_slot[&batch.neg[k]];
        let e_u = user_pass.gated.row(su).to_owned();
        {
            let mut row = g_e_user.row_mut(su);
            row += &(&item_pass.gated.row(si) * g_pos[k]);
            row += &(&item_pass.gated.row(sj) * g_neg[k]);
        }
        g_e_item.row_mut(si).scaled_add(g_pos[k], &e_u);
        g_e_item.row_mut(sj).scaled_add(g_neg[k], &e_u);
    }

    let mut g_side_user: Array2<f64> = Array2::zeros(user_pass.side_rep.dim());
    let mut g_side_item: Array2<f64> = Array2::zeros(item_pass.side_rep.dim());
    if let Some((g_au, g_su, g_ai, g_si)) = align_grads {
        g_e_user += &(&g_au * settings.align_weight);
        g_side_user += &(&g_su * settings.align_weight);
        for (r, &slot) in batch.pos_slots.iter().enumerate() {
            g_e_item.row_mut(slot).scaled_add(settings.align_weight, &g_ai.row(r));
            g_side_item.row_mut(slot).scaled_add(settings.align_weight, &g_si.row(r));
        }
    }

    let mut grads = state.zeros_like();

    let gate_backward = |pass: &FamilyPass,
                             raw: &Array2<f64>,
                             g_e: &Array2<f64>,
                             g_side: &mut Array2<f64>,
                             user_side: bool,
                             grads: &mut Nets|
     -> Array2<f64> {
        match (&pass.gates, &state.nets.gates) {
            (Some(gates), Some((gu, gi))) => {
                let net = if user_side { gu } else { gi };
                let holder = grads.gates.as_mut().expect("gate grads allocated");
                let g_net = if user_side { &mut holder.0 } else { &mut holder.1 };
                let g_gates = g_e * raw;
                *g_side += &net.backward(&pass.side_rep, gates, &g_gates, g_net);
                g_e * gates
            }
            _ => g_e.clone(),
        }
    };

    let g_raw_user = gate_backward(
        &user_pass,
        &raw_user,
        &g_e_user,
        &mut g_side_user,
        true,
        &mut grads.nets,
    );
    let g_raw_item = gate_backward(
        &item_pass,
        &raw_item,
        &g_e_item,
        &mut g_side_item,
        false,
        &mut grads.nets,
    );

    match (user_cache, item_cache) {
        (
            FamilyCache::Conditioned { model: mu, cache: cu, .. },
            FamilyCache::Conditioned { model: mi, cache: ci, .. },
        ) => {
            let (gu_holder, gi_holder) = match &mut grads.nets.stack {
                SideStack::Conditioned { user, item } => (user, item),
                _ => unreachable!("grad holder mirrors the state stack"),
            };
            mu.backward_weighted(&cu, settings.elbo_weight, Some(&g_side_user), gu_holder);
            mi.backward_weighted(&ci, settings.elbo_weight, Some(&g_side_item), gi_holder);
        }
        (FamilyCache::Plain { model: mu, cache: cu }, FamilyCache::Plain { model: mi, cache: ci }) => {
            let (gu_holder, gi_holder) = match &mut grads.nets.stack {
                SideStack::Plain { user, item } => (user, item),
                _ => unreachable!("grad holder mirrors the state stack"),
            };
            mu.backward(&cu, &g_side_user, gu_holder);
            mi.backward(&ci, &g_side_item, gi_holder);
        }
        (FamilyCache::None, FamilyCache::None) => {}
        _ => unreachable!("families share one stack"),
    }

    let mut g_prop: Array2<f64> = Array2::zeros(propagated.dim());
    for (slot, &u) in batch.unique_users.iter().enumerate() {
        let mut row = g_prop.row_mut(u as usize);
        row += &g_raw_user.row(slot);
    }
    for (slot, &i) in batch.unique_items.iter().enumerate() {
        let mut row = g_prop.row_mut(n_users + i as usize);
        row += &g_raw_item.row(slot);
    }
    grads.base = backbone::propagate_backward(adj, &g_prop, settings.layers);

    (terms, Some(grads))
}

/// One epoch's log line; serialized as one JSON object per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_bpr: f64,
    pub loss_align: f64,
    pub loss_elbo: f64,
    #[serde(rename = "val_recall@10")]
    pub val_recall: f64,
}

/// Everything `fit` hands back: the best model by validation recall,
/// the settings that produced it, and the full epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedState {
    pub model: RecModel,
    pub settings: TrainSettings,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn check_side(
    side: Option<&SideInputs>,
    settings: &TrainSettings,
    n_users: usize,
    n_items: usize,
) -> Result<(), TrainError> {
    if settings.encoder == EncoderChoice::None {
        return Ok(());
    }
    let side = side.ok_or_else(|| TrainError::MissingSideInputs {
        encoder: format!("{:?}", settings.encoder).to_lowercase(),
    })?;
    let checks = [
        ("user text embeddings", side.user_text.nrows(), n_users),
        ("item text embeddings", side.item_text.nrows(), n_items),
        ("user conditioners", side.user_cond.nrows(), n_users),
        ("item conditioners", side.item_cond.nrows(), n_items),
    ];
    for (table, got, want) in checks {
        if got != want {
            return Err(TrainError::SideShape { table, got, want });
        }
    }
    Ok(())
}

/// Fresh, untrained state for the given data and settings; `fit` starts
/// from exactly this, so callers can measure the untrained baseline.
pub fn initial_state(
    train: &InteractionDataset,
    side: Option<&SideInputs>,
    settings: &TrainSettings,
) -> Result<ModelState, TrainError> {
    check_side(side, settings, train.n_users, train.n_items)?;
    let base = backbone::init_embeddings(
        train.n_users,
        train.n_items,
        settings.embed_dim,
        settings.init_scale,
        settings.seed,
    )
    .mat;

    let stack = match settings.encoder {
        EncoderChoice::Conditioned => {
            let side = side.expect("checked above");
            let mut rng_u = seeds::rng(settings.seed, "user-encoder");
            let mut rng_i = seeds::rng(settings.seed, "item-encoder");
            let user = SseModel::new(
                &SseConfig {
                    input_dim: side.user_text.ncols(),
                    conditioner_dim: side.user_cond.ncols(),
                    latent_dim: settings.embed_dim,
                    hidden: settings.sse_hidden.clone(),
                },
                &mut rng_u,
            );
            let item = SseModel::new(
                &SseConfig {
                    input_dim: side.item_text.ncols(),
                    conditioner_dim: side.item_cond.ncols(),
                    latent_dim: settings.embed_dim,
                    hidden: settings.sse_hidden.clone(),
                },
                &mut rng_i,
            );
            SideStack::Conditioned { user, item }
        }
        EncoderChoice::Plain => {
            let side = side.expect("checked above");
            let mut rng_u = seeds::rng(settings.seed, "user-encoder");
            let mut rng_i = seeds::rng(settings.seed, "item-encoder");
            let user = BaselineEncoder::new(
                side.user_text.ncols(),
                &settings.sse_hidden,
                settings.embed_dim,
                &mut rng_u,
            );
            let item = BaselineEncoder::new(
                side.item_text.ncols(),
                &settings.sse_hidden,
                settings.embed_dim,
                &mut rng_i,
            );
            SideStack::Plain { user, item }
        }
        EncoderChoice::None => SideStack::None,
    };

    let gates = if settings.use_gates && settings.encoder != EncoderChoice::None {
        let mut rng_gu = seeds::rng(settings.seed, "user-gate");
        let mut rng_gi = seeds::rng(settings.seed, "item-gate");
        Some((
            GateNetwork::new(settings.embed_dim, settings.embed_dim, &mut rng_gu),
            GateNetwork::new(settings.embed_dim, settings.embed_dim, &mut rng_gi),
        ))
    } else {
        None
    };

    Ok(ModelState { base, nets: Nets { stack, gates } })
}

/// Freezes a trained state into score-ready tables.
pub fn materialize(
    state: &ModelState,
    adj: &NormalizedAdjacency,
    side: Option<&SideInputs>,
    settings: &TrainSettings,
) -> RecModel {
    let propagated = backbone::propagate(adj, &state.base, settings.layers);
    let (side_rep, gates) = match &state.nets.stack {
        SideStack::Conditioned { user, item } => {
            let side = side.expect("conditioned stack needs side inputs");
            let su = side_representations_chunked(user, &side.user_text, &side.user_cond, SIDE_CHUNK_ROWS);
            let si = side_representations_chunked(item, &side.item_text, &side.item_cond, SIDE_CHUNK_ROWS);
            stack_families(state, su, si)
        }
        SideStack::Plain { user, item } => {
            let side = side.expect("plain stack needs side inputs");
            let su = user.forward(&side.user_text).0;
            let si = item.forward(&side.item_text).0;
            stack_families(state, su, si)
        }
        SideStack::None => (None, None),
    };
    RecModel {
        n_users: adj.n_users(),
        n_items: adj.n_items(),
        propagated,
        gates,
        side: side_rep,
    }
}

fn stack_families(
    state: &ModelState,
    side_user: Array2<f64>,
    side_item: Array2<f64>,
) -> (Option<Array2<f64>>, Option<Array2<f64>>) {
    let gates = state.nets.gates.as_ref().map(|(gu, gi)| {
        let g_u = gu.gate_values(&side_user);
        let g_i = gi.gate_values(&side_item);
        ndarray::concatenate(Axis(0), &[g_u.view(), g_i.view()]).expect("equal widths")
    });
    let side = ndarray::concatenate(Axis(0), &[side_user.view(), side_item.view()])
        .expect("equal widths");
    (Some(side), gates)
}

fn sample_negative(
    rated: &[u32],
    n_items: usize,
    rng: &mut ChaCha8Rng,
) -> Option<u32> {
    if rated.len() >= n_items {
        return None;
    }
    loop {
        let cand = rng.gen_range(0..n_items as u32);
        if rated.binary_search(&cand).is_err() {
            return Some(cand);
        }
    }
}

fn pretrain_encoders(
    state: &mut ModelState,
    side: &SideInputs,
    settings: &TrainSettings,
) -> Result<(), TrainError> {
    let SideStack::Conditioned { user, item } = &mut state.nets.stack else {
        return Ok(());
    };
    let mut rng = seeds::rng(settings.seed, "sse-pretrain");
    let mut opt_u = Adam::new(settings.lr);
    let mut opt_i = Adam::new(settings.lr);
    for epoch in 0..settings.sse_pretrain_epochs {
        for (model, opt, x, c) in [
            (&mut *user, &mut opt_u, &side.user_text, &side.user_cond),
            (&mut *item, &mut opt_i, &side.item_text, &side.item_cond),
        ] {
            let (terms, cache) = model.elbo(x, c, &mut rng);
            if !terms.total.is_finite() {
                return Err(TrainError::NumericalFailure { epoch });
            }
            let mut grads = model.zeros_like();
            model.backward(&cache, &mut grads);
            opt.step(model.tensors_mut(), grads.tensors());
        }
    }
    Ok(())
}

/// Trains the full stack and returns the best state by validation
/// recall.
///
/// Epochs stream shuffled `(user, positive)` pairs in batches, each
/// paired with a uniformly sampled non-interacted negative. After each
/// epoch the model is materialized and scored on the validation split;
/// training stops once that metric has failed to improve for more than
/// `patience` consecutive epochs, or at `max_epochs`.
pub fn fit(
    train: &InteractionDataset,
    val: &InteractionDataset,
    side: Option<&SideInputs>,
    settings: &TrainSettings,
) -> Result<TrainedState, TrainError> {
    if train.interactions.is_empty() {
        return Err(TrainError::EmptyTraining);
    }
    let adj = build_normalized_adjacency(train)?;
    let mut state = initial_state(train, side, settings)?;

    let frozen_encoders = settings.sse_pretrain_epochs > 0
        && matches!(state.nets.stack, SideStack::Conditioned { .. });
    if frozen_encoders {
        pretrain_encoders(&mut state, side.expect("checked in initial_state"), settings)?;
    }
    let trainable = |name: &str| {
        !frozen_encoders || !(name.starts_with("user_enc") || name.starts_with("item_enc"))
    };

    let rated = train.items_by_user();
    let conditioned = matches!(state.nets.stack, SideStack::Conditioned { .. });

    let mut shuffle_rng = seeds::rng(settings.seed, "batch-shuffle");
    let mut negative_rng = seeds::rng(settings.seed, "negative-sampling");
    let mut noise_rng = seeds::rng(settings.seed, "sse-noise");
    let mut opt = Adam::new(settings.lr);

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, RecModel)> = None;
    let mut failures = 0usize;

    for epoch in 0..settings.max_epochs {
        let mut order: Vec<usize> = (0..train.interactions.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let mut users = Vec::with_capacity(chunk.len());
            let mut pos = Vec::with_capacity(chunk.len());
            let mut neg = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let it = &train.interactions[k];
                let Some(j) =
                    sample_negative(&rated[it.user as usize], train.n_items, &mut negative_rng)
                else {
                    continue;
                };
                users.push(it.user);
                pos.push(it.item);
                neg.push(j);
            }
            if users.is_empty() {
                continue;
            }
            let mut batch = Batch::new(users, pos, neg);
            if conditioned {
                batch = batch.with_noise(settings.embed_dim, &mut noise_rng);
            }

            let (terms, grads) = batch_gradients(&state, &adj, side, &batch, settings);
            if !terms.total.is_finite() {
                return Err(TrainError::NumericalFailure { epoch });
            }
            let params: Vec<_> =
                state.tensors_mut().into_iter().filter(|(n, _)| trainable(n)).collect();
            let grad_slices: Vec<_> =
                grads.tensors().into_iter().filter(|(n, _)| trainable(n)).collect();
            opt.step(params, grad_slices);

            sums.0 += terms.total;
            sums.1 += terms.bpr;
            sums.2 += terms.align;
            sums.3 += terms.elbo;
            batches += 1;
        }

        let model = materialize(&state, &adj, side, settings);
        let val_recall = crate::inferencer::validation_recall(&model, train, val, settings.eval_n);
        let denom = batches.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            loss_total: sums.0 / denom,
            loss_bpr: sums.1 / denom,
            loss_align: sums.2 / denom,
            loss_elbo: sums.3 / denom,
            val_recall,
        });

        let improved = best.as_ref().map_or(true, |(_, r, _)| val_recall > *r);
        if improved {
            best = Some((epoch, val_recall, model));
            failures = 0;
        } else {
            failures += 1;
            if failures > settings.patience {
                break;
            }
        }
    }

    let (best_epoch, _, model) = best.expect("at least one epoch ran");
    Ok(TrainedState { model, settings: settings.clone(), best_epoch, history })
}

/// Serializes epoch records as one JSON object per line.
pub fn render_training_log(history: &[EpochRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec).expect("plain fields"));
        out.push('\n');
    }
    out
}
