//! Embedding table and light graph propagation.
//!
//! User and item embeddings live in one `(n_users + n_items) × d` table.
//! Propagation averages the powers of the normalized adjacency applied
//! to the base table, `mean(E, AE, …, A^L E)`, which smooths each node
//! toward its graph neighborhood without any per-layer weights. Scores
//! are plain dot products between propagated rows.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataio::NormalizedAdjacency;
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// Users first, then items.
    pub mat: Array2<f64>,
    pub n_users: usize,
}

impl EmbeddingTable {
    pub fn n_items(&self) -> usize {
        self.mat.nrows() - self.n_users
    }

    pub fn dim(&self) -> usize {
        self.mat.ncols()
    }

    pub fn user_row(&self, user: u32) -> ArrayView1<'_, f64> {
        self.mat.row(user as usize)
    }

    pub fn item_row(&self, item: u32) -> ArrayView1<'_, f64> {
        self.mat.row(self.n_users + item as usize)
    }

    pub fn from_mat(mat: Array2<f64>, n_users: usize) -> Self {
        assert!(n_users <= mat.nrows());
        EmbeddingTable { mat, n_users }
    }
}

/// Fresh table with entries drawn from `N(0, init_scale²)`.
pub fn init_embeddings(
    n_users: usize,
    n_items: usize,
    dim: usize,
    init_scale: f64,
    seed: u64,
) -> EmbeddingTable {
    let mut rng = seeds::rng(seed, "embeddings");
    let mat = Array2::from_shape_fn((n_users + n_items, dim), |_| {
        init_scale * rng.sample::<f64, _>(StandardNormal)
    });
    EmbeddingTable { mat, n_users }
}

/// `mean(E, AE, …, A^L E)` over the whole node table.
pub fn propagate(adj: &NormalizedAdjacency, base: &Array2<f64>, layers: usize) -> Array2<f64> {
    let mut acc = base.clone();
    let mut cur = base.clone();
    for _ in 0..layers {
        cur = adj.matmul(&cur);
        acc += &cur;
    }
    acc / (layers + 1) as f64
}

/// Single-threaded twin of [`propagate`]; the two agree bitwise.
pub fn propagate_sequential(
    adj: &NormalizedAdjacency,
    base: &Array2<f64>,
    layers: usize,
) -> Array2<f64> {
    let mut acc = base.clone();
    let mut cur = base.clone();
    for _ in 0..layers {
        cur = adj.matmul_sequential(&cur);
        acc += &cur;
    }
    acc / (layers + 1) as f64
}

/// Gradient of [`propagate`] with respect to the base table. The
/// adjacency is symmetric and each power contributes equally, so the
/// backward map is propagation itself applied to the output gradient.
pub fn propagate_backward(
    adj: &NormalizedAdjacency,
    grad_out: &Array2<f64>,
    layers: usize,
) -> Array2<f64> {
    propagate(adj, grad_out, layers)
}

/// Dot-product score between a propagated user row and item row.
pub fn predict_score(propagated: &EmbeddingTable, user: u32, item: u32) -> f64 {
    propagated.user_row(user).dot(&propagated.item_row(item))
}
