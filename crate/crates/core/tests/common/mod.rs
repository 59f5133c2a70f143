//! Shared test oracles, written independently of the library's numerics.

#![allow(dead_code)]

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
/// returned in descending order. Used as an independent reference for
/// singular values via the Gram matrix.
pub fn jacobi_eigenvalues(mut g: Vec<Vec<f64>>) -> Vec<f64> {
    let n = g.len();
    for _ in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += g[p][q] * g[p][q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if g[p][q].abs() < 1e-300 {
                    continue;
                }
                let tau = (g[q][q] - g[p][p]) / (2.0 * g[p][q]);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for r in 0..n {
                    let grp = g[r][p];
                    let grq = g[r][q];
                    g[r][p] = c * grp - s * grq;
                    g[r][q] = s * grp + c * grq;
                }
                for r in 0..n {
                    let gpr = g[p][r];
                    let gqr = g[q][r];
                    g[p][r] = c * gpr - s * gqr;
                    g[q][r] = s * gpr + c * gqr;
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| g[i][i]).collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals
}

/// Singular values of a rectangular matrix (rows of equal length),
/// descending, via Jacobi on the Gram matrix AᵀA.
pub fn reference_singular_values(a: &[Vec<f64>]) -> Vec<f64> {
    let cols = a.first().map_or(0, |r| r.len());
    let mut gram = vec![vec![0.0; cols]; cols];
    for row in a {
        assert_eq!(row.len(), cols);
        for p in 0..cols {
            for q in 0..cols {
                gram[p][q] += row[p] * row[q];
            }
        }
    }
    jacobi_eigenvalues(gram).into_iter().map(|x| x.max(0.0).sqrt()).collect()
}

/// Frobenius norm of A minus the rank-k product U·diag(σ)·Vᵀ.
pub fn reconstruction_error(
    a: &[Vec<f64>],
    left: &ndarray::Array2<f64>,
    singular_values: &[f64],
    right: &ndarray::Array2<f64>,
) -> f64 {
    let mut sq = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            let mut approx = 0.0;
            for (r, &s) in singular_values.iter().enumerate() {
                approx += left[[i, r]] * s * right[[j, r]];
            }
            sq += (x - approx) * (x - approx);
        }
    }
    sq.sqrt()
}

/// Smallest achievable Frobenius error for a rank-k approximation,
/// from the reference singular values of the full matrix.
pub fn best_rank_k_error(a: &[Vec<f64>], k: usize) -> f64 {
    let sv = reference_singular_values(a);
    sv.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt()
}

/// Adds `delta` to the parameter at flat index `idx` across the
/// module's tensors in visitation order.
pub fn perturb<M: cllmr_core::nn::Tensors>(module: &mut M, idx: usize, delta: f64) {
    let mut flat = 0;
    for (_, slice) in module.tensors_mut() {
        for x in slice {
            if flat == idx {
                *x += delta;
            }
            flat += 1;
        }
    }
}

/// Interaction set with planted block structure; see
/// [`cllmr_core::synth::dataset`].
pub fn synthetic_dataset(
    n_users: usize,
    n_items: usize,
    blocks: usize,
    per_user: usize,
    seed: u64,
) -> cllmr_core::dataio::InteractionDataset {
    cllmr_core::synth::dataset(n_users, n_items, blocks, per_user, seed)
}

/// Block-indicator texts; see [`cllmr_core::synth::block_texts`].
pub fn block_texts(rows: usize, blocks: usize, dim: usize, seed: u64, tag: &str) -> ndarray::Array2<f64> {
    cllmr_core::synth::block_texts(rows, blocks, dim, seed, tag)
}

/// Side inputs for a block-structured dataset: block-indicator texts
/// and spectral conditioners built from the training interactions.
pub fn synthetic_side_inputs(
    train: &cllmr_core::dataio::InteractionDataset,
    blocks: usize,
    text_dim: usize,
    k: usize,
    epsilon: f64,
    seed: u64,
) -> cllmr_core::trainer::SideInputs {
    use cllmr_core::spectrum::{
        build_conditioners, conditioner_table, truncated_svd, ConditionerMode, NoiseMode, Side,
    };

    let factors = truncated_svd(train, k, seed).expect("rank within bounds");
    let users = build_conditioners(
        &factors,
        Side::User,
        epsilon,
        NoiseMode::SignAligned,
        ConditionerMode::PerNode,
        seed,
    )
    .expect("nonnegative noise");
    let items = build_conditioners(
        &factors,
        Side::Item,
        epsilon,
        NoiseMode::SignAligned,
        ConditionerMode::PerNode,
        seed,
    )
    .expect("nonnegative noise");
    cllmr_core::trainer::SideInputs {
        user_text: block_texts(train.n_users, blocks, text_dim, seed, "user-text"),
        item_text: block_texts(train.n_items, blocks, text_dim, seed, "item-text"),
        user_cond: conditioner_table(&users),
        item_cond: conditioner_table(&items),
    }
}

/// Central-difference check of every parameter gradient against the
/// analytic values in a model-shaped `grads` holder.
pub fn assert_matches_finite_difference<M: cllmr_core::nn::Tensors + Clone>(
    loss_of: impl Fn(&M) -> f64,
    model: &M,
    grads: &M,
    h: f64,
    rel_tol: f64,
) {
    let analytic: Vec<f64> =
        grads.tensors().iter().flat_map(|(_, s)| s.iter().copied()).collect();
    assert!(!analytic.is_empty());
    let mut probe = model.clone();
    for (idx, a) in analytic.iter().enumerate() {
        perturb(&mut probe, idx, h);
        let up = loss_of(&probe);
        perturb(&mut probe, idx, -2.0 * h);
        let down = loss_of(&probe);
        perturb(&mut probe, idx, h);
        let numeric = (up - down) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (a - numeric).abs() / denom < rel_tol,
            "parameter {idx}: analytic {a} vs numeric {numeric}"
        );
    }
}
