//! Spectral conditioners from the training interaction matrix.
//!
//! A truncated SVD of the (binary) user-item matrix yields factors
//! `U Σ Vᵀ`; each user's conditioner is its row of `UΣ` and each item's
//! its row of `VΣ`, so every node carries a rank-k summary of where it
//! sits in the interaction structure. A small signed perturbation is
//! added on top: each coordinate moves by `ε·ω` away from zero, in the
//! direction it already points, so the orientation of the conditioner
//! is preserved while its scale wobbles.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dataio::InteractionDataset;
use crate::seeds;

/// Matrices at most this many cells take the exact dense route;
/// larger ones use the randomized range finder.
const DENSE_CELL_LIMIT: usize = 4_000_000;
const OVERSAMPLE: usize = 8;
const POWER_ITERATIONS: usize = 4;

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("rank {k} out of range; must satisfy 1 <= k <= {max}")]
    RankOutOfRange { k: usize, max: usize },
    #[error("noise scale must be nonnegative, got {epsilon}")]
    NegativeNoise { epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

/// Which matrix the SVD factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatrixSource {
    /// Binary interaction matrix: 1 where an interaction exists.
    #[default]
    Raw,
    /// Degree-normalized matrix: 1/sqrt(deg(u)·deg(i)) on edges.
    DegreeNormalized,
}

/// How noise perturbs a conditioner coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `m = m̂ + ε·(ω ⊙ sign(m̂))`: moves each coordinate away from zero.
    #[default]
    SignAligned,
    /// `m = m̂ + ε·(2ω − 1)`: symmetric, orientation-blind noise.
    Symmetric,
}

/// What a node's conditioner is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConditionerMode {
    /// Row of `UΣ` (users) or `VΣ` (items).
    #[default]
    PerNode,
    /// The singular-value vector itself, shared by every node.
    GlobalSpectrum,
}

/// Rank-k factors of the interaction matrix, singular values descending.
#[derive(Debug, Clone)]
pub struct SpectralFactors {
    pub k: usize,
    /// n_users × k.
    pub left: Array2<f64>,
    /// n_items × k.
    pub right: Array2<f64>,
    pub singular_values: Vec<f64>,
}

/// A node's clean and noise-perturbed conditioner, with the recorded draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConditioner {
    pub node_id: u32,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub noise_scale: f64,
    pub draw: Vec<f64>,
}

struct RectCsr {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl RectCsr {
    fn from_dataset(ds: &InteractionDataset, source: MatrixSource) -> Self {
        let mut row_deg = vec![0usize; ds.n_users];
        let mut col_deg = vec![0usize; ds.n_items];
        for it in &ds.interactions {
            row_deg[it.user as usize] += 1;
            col_deg[it.item as usize] += 1;
        }
        let mut offsets = vec![0usize; ds.n_users + 1];
        for u in 0..ds.n_users {
            offsets[u + 1] = offsets[u] + row_deg[u];
        }
        let mut cols = vec![0u32; offsets[ds.n_users]];
        let mut weights = vec![0.0; offsets[ds.n_users]];
        let mut cursor = offsets.clone();
        for it in &ds.interactions {
            let u = it.user as usize;
            let w = match source {
                MatrixSource::Raw => 1.0,
                MatrixSource::DegreeNormalized => {
                    1.0 / ((row_deg[u] * col_deg[it.item as usize]) as f64).sqrt()
                }
            };
            cols[cursor[u]] = it.item;
            weights[cursor[u]] = w;
            cursor[u] += 1;
        }
        let mut csr = RectCsr { n_rows: ds.n_users, n_cols: ds.n_items, offsets, cols, weights };
        csr.sort_rows();
        csr
    }

    fn from_dense(a: &Array2<f64>) -> Self {
        let (n_rows, n_cols) = a.dim();
        let mut offsets = vec![0usize; n_rows + 1];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for r in 0..n_rows {
            for c in 0..n_cols {
                if a[[r, c]] != 0.0 {
                    cols.push(c as u32);
                    weights.push(a[[r, c]]);
                }
            }
            offsets[r + 1] = cols.len();
        }
        RectCsr { n_rows, n_cols, offsets, cols, weights }
    }

    fn sort_rows(&mut self) {
        for r in 0..self.n_rows {
            let range = self.offsets[r]..self.offsets[r + 1];
            let mut row: Vec<(u32, f64)> = self.cols[range.clone()]
                .iter()
                .copied()
                .zip(self.weights[range.clone()].iter().copied())
                .collect();
            row.sort_unstable_by_key(|&(c, _)| c);
            for (k, (c, w)) in row.into_iter().enumerate() {
                self.cols[range.start + k] = c;
                self.weights[range.start + k] = w;
            }
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for k in self.offsets[r]..self.offsets[r + 1] {
                m[(r, self.cols[k] as usize)] = self.weights[k];
            }
        }
        m
    }

    /// `A · x`.
    fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_rows, x.ncols());
        for r in 0..self.n_rows {
            for k in self.offsets[r]..self.offsets[r + 1] {
                let c = self.cols[k] as usize;
                let w = self.weights[k];
                for j in 0..x.ncols() {
                    out[(r, j)] += w * x[(c, j)];
                }
            }
        }
        out
    }

    /// `Aᵀ · x`.
    fn tr_mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_cols, x.ncols());
        for r in 0..self.n_rows {
            for k in self.offsets[r]..self.offsets[r + 1] {
                let c = self.cols[k] as usize;
                let w = self.weights[k];
                for j in 0..x.ncols() {
                    out[(c, j)] += w * x[(r, j)];
                }
            }
        }
        out
    }
}

/// Truncated SVD of the binary training matrix (dense or randomized by size).
pub fn truncated_svd(
    train: &InteractionDataset,
    k: usize,
    seed: u64,
) -> Result<SpectralFactors, SpectrumError> {
    truncated_svd_source(train, k, seed, MatrixSource::Raw)
}

/// As [`truncated_svd`] with an explicit choice of factored matrix.
pub fn truncated_svd_source(
    train: &InteractionDataset,
    k: usize,
    seed: u64,
    source: MatrixSource,
) -> Result<SpectralFactors, SpectrumError> {
    let csr = RectCsr::from_dataset(train, source);
    factorize(&csr, k, seed)
}

/// Truncated SVD of an arbitrary dense matrix; rows play the user role.
pub fn truncated_svd_matrix(
    a: &Array2<f64>,
    k: usize,
    seed: u64,
) -> Result<SpectralFactors, SpectrumError> {
    factorize(&RectCsr::from_dense(a), k, seed)
}

/// Forces the randomized path regardless of size; used for cross-checks.
pub fn truncated_svd_matrix_randomized(
    a: &Array2<f64>,
    k: usize,
    seed: u64,
) -> Result<SpectralFactors, SpectrumError> {
    let csr = RectCsr::from_dense(a);
    check_rank(&csr, k)?;
    let (left, sv, right) = randomized_svd(&csr, k, seed);
    Ok(canonicalized(k, left, sv, right))
}

fn check_rank(csr: &RectCsr, k: usize) -> Result<(), SpectrumError> {
    let max = csr.n_rows.min(csr.n_cols);
    if k == 0 || k > max {
        return Err(SpectrumError::RankOutOfRange { k, max });
    }
    Ok(())
}

fn factorize(csr: &RectCsr, k: usize, seed: u64) -> Result<SpectralFactors, SpectrumError> {
    check_rank(csr, k)?;
    let (left, sv, right) = if csr.n_rows * csr.n_cols <= DENSE_CELL_LIMIT {
        dense_svd(&csr.to_dense(), k)
    } else {
        randomized_svd(csr, k, seed)
    };
    Ok(canonicalized(k, left, sv, right))
}

/// Orients each factor pair so the left vector's largest-magnitude entry
/// is positive; SVD signs are otherwise arbitrary and this keeps
/// conditioners stable across algorithms.
fn canonicalized(
    k: usize,
    mut left: Array2<f64>,
    singular_values: Vec<f64>,
    mut right: Array2<f64>,
) -> SpectralFactors {
    for j in 0..k {
        let mut arg = 0;
        for i in 0..left.nrows() {
            if left[[i, j]].abs() > left[[arg, j]].abs() {
                arg = i;
            }
        }
        if left[[arg, j]] < 0.0 {
            for i in 0..left.nrows() {
                left[[i, j]] = -left[[i, j]];
            }
            for i in 0..right.nrows() {
                right[[i, j]] = -right[[i, j]];
            }
        }
    }
    SpectralFactors { k, left, right, singular_values }
}

fn top_k(
    u: &DMatrix<f64>,
    sv: &[f64],
    v_t: &DMatrix<f64>,
    k: usize,
) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).expect("finite singular values").then(i.cmp(&j)));
    let order = &order[..k];
    let left = Array2::from_shape_fn((u.nrows(), k), |(i, j)| u[(i, order[j])]);
    let right = Array2::from_shape_fn((v_t.ncols(), k), |(i, j)| v_t[(order[j], i)]);
    let values = order.iter().map(|&j| sv[j]).collect();
    (left, values, right)
}

fn dense_svd(a: &DMatrix<f64>, k: usize) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    top_k(&u, &sv, &v_t, k)
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let cols = m.ncols();
    let qr = m.qr();
    let q = qr.q();
    q.columns(0, cols.min(q.ncols())).into_owned()
}

fn randomized_svd(csr: &RectCsr, k: usize, seed: u64) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
    let sketch = (k + OVERSAMPLE).min(csr.n_rows.min(csr.n_cols));
    let mut rng = seeds::rng(seed, "rsvd");
    let omega =
        DMatrix::from_fn(csr.n_cols, sketch, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut q = orthonormalize(csr.mul_dense(&omega));
    for _ in 0..POWER_ITERATIONS {
        let z = orthonormalize(csr.tr_mul_dense(&q));
        q = orthonormalize(csr.mul_dense(&z));
    }
    // B = Qᵀ·A is small (sketch × n_cols); its exact SVD lifts back through Q.
    let b = csr.tr_mul_dense(&q).transpose();
    let svd = b.clone().svd(true, true);
    let u_b = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let u = &q * &u_b;
    top_k(&u, &sv, &v_t, k)
}

/// A node's clean conditioner: its spectral row scaled by the singular values.
pub fn node_conditioner(factors: &SpectralFactors, node: u32, side: Side) -> Vec<f64> {
    node_conditioner_mode(factors, node, side, ConditionerMode::PerNode)
}

pub fn node_conditioner_mode(
    factors: &SpectralFactors,
    node: u32,
    side: Side,
    mode: ConditionerMode,
) -> Vec<f64> {
    match mode {
        ConditionerMode::GlobalSpectrum => factors.singular_values.clone(),
        ConditionerMode::PerNode => {
            let table = match side {
                Side::User => &factors.left,
                Side::Item => &factors.right,
            };
            let row = table.row(node as usize);
            row.iter().zip(&factors.singular_values).map(|(x, s)| x * s).collect()
        }
    }
}

fn zero_aware_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl SpectralConditioner {
    /// Builds a conditioner from an explicit draw `ω ∈ [0,1]^k`.
    pub fn with_draw(
        node_id: u32,
        clean: Vec<f64>,
        epsilon: f64,
        mode: NoiseMode,
        draw: Vec<f64>,
    ) -> Result<Self, SpectrumError> {
        if epsilon < 0.0 {
            return Err(SpectrumError::NegativeNoise { epsilon });
        }
        assert_eq!(clean.len(), draw.len(), "draw must match conditioner length");
        let noisy = clean
            .iter()
            .zip(&draw)
            .map(|(&m, &w)| match mode {
                NoiseMode::SignAligned => m + epsilon * w * zero_aware_sign(m),
                NoiseMode::Symmetric => m + epsilon * (2.0 * w - 1.0),
            })
            .collect();
        Ok(SpectralConditioner { node_id, clean, noisy, noise_scale: epsilon, draw })
    }
}

/// Perturbs a clean conditioner with a fresh uniform draw from `rng`.
pub fn inject_noise(
    node_id: u32,
    clean: Vec<f64>,
    epsilon: f64,
    mode: NoiseMode,
    rng: &mut impl Rng,
) -> Result<SpectralConditioner, SpectrumError> {
    if epsilon < 0.0 {
        return Err(SpectrumError::NegativeNoise { epsilon });
    }
    let draw: Vec<f64> = (0..clean.len()).map(|_| rng.gen::<f64>()).collect();
    SpectralConditioner::with_draw(node_id, clean, epsilon, mode, draw)
}

/// Conditioners for every node on one side, with a seed-determined draw.
pub fn build_conditioners(
    factors: &SpectralFactors,
    side: Side,
    epsilon: f64,
    noise_mode: NoiseMode,
    conditioner_mode: ConditionerMode,
    seed: u64,
) -> Result<Vec<SpectralConditioner>, SpectrumError> {
    let n = match side {
        Side::User => factors.left.nrows(),
        Side::Item => factors.right.nrows(),
    };
    let tag = match side {
        Side::User => "noise-user",
        Side::Item => "noise-item",
    };
    let mut rng = seeds::rng(seed, tag);
    (0..n)
        .map(|node| {
            let clean = node_conditioner_mode(factors, node as u32, side, conditioner_mode);
            inject_noise(node as u32, clean, epsilon, noise_mode, &mut rng)
        })
        .collect()
}

/// Stacks the noisy conditioner rows into a dense table.
pub fn conditioner_table(conditioners: &[SpectralConditioner]) -> Array2<f64> {
    let rows = conditioners.len();
    let dim = conditioners.first().map_or(0, |c| c.noisy.len());
    let mut out = Array2::zeros((rows, dim));
    for (i, c) in conditioners.iter().enumerate() {
        assert_eq!(c.node_id as usize, i, "conditioners must be in node order");
        for (j, &x) in c.noisy.iter().enumerate() {
            out[[i, j]] = x;
        }
    }
    out
}
