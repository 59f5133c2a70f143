//! Pairwise ranking and representation-alignment objectives.

use ndarray::Array2;

use crate::nn::{ln_sigmoid, sigmoid};

/// Mean `−ln σ(pos − neg)` over score pairs.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> f64 {
    assert_eq!(pos.len(), neg.len(), "score lists must pair up");
    assert!(!pos.is_empty(), "need at least one score pair");
    let sum: f64 = pos.iter().zip(neg).map(|(p, n)| -ln_sigmoid(p - n)).sum();
    sum / pos.len() as f64
}

/// Gradients of [`bpr_loss`] with respect to each positive and negative
/// score: `(σ(pos−neg) − 1) / B` and its negation.
pub fn bpr_score_grads(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(pos.len(), neg.len(), "score lists must pair up");
    let b = pos.len() as f64;
    let g_pos: Vec<f64> = pos.iter().zip(neg).map(|(p, n)| (sigmoid(p - n) - 1.0) / b).collect();
    let g_neg: Vec<f64> = g_pos.iter().map(|g| -g).collect();
    (g_pos, g_neg)
}

/// How the contrastive denominator is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentForm {
    /// Each anchor row competes against every candidate row in the
    /// batch (in-batch negatives).
    #[default]
    CrossPair,
    /// The denominator sums only same-index pairs, reading the printed
    /// formula at face value; kept for sensitivity analysis.
    Literal,
}

fn row_norm(m: &Array2<f64>, i: usize) -> f64 {
    m.row(i).dot(&m.row(i)).sqrt().max(1e-12)
}

fn cosine_row(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    a.row(i).dot(&b.row(j)) / (row_norm(a, i) * row_norm(b, j))
}

/// Contrastive loss over paired rows: anchor `i` must pick out
/// candidate `i` under a softmax of cosine similarities scaled by
/// `1/tau`. Returns the mean over anchors for this one family; user and
/// item families are summed by the caller.
pub fn alignment_loss(
    anchors: &Array2<f64>,
    candidates: &Array2<f64>,
    tau: f64,
    form: AlignmentForm,
) -> f64 {
    alignment_with_grads(anchors, candidates, tau, form, false).0
}

/// Loss plus gradients with respect to the anchor and candidate rows.
pub fn alignment_backward(
    anchors: &Array2<f64>,
    candidates: &Array2<f64>,
    tau: f64,
    form: AlignmentForm,
) -> (f64, Array2<f64>, Array2<f64>) {
    alignment_with_grads(anchors, candidates, tau, form, true)
}

/// Adds the gradient of `weight · cos(a_i, b_j)` to the rows of two
/// gradient tables.
fn add_cosine_grad(
    a: &Array2<f64>,
    i: usize,
    b: &Array2<f64>,
    j: usize,
    weight: f64,
    g_a: &mut Array2<f64>,
    g_b: &mut Array2<f64>,
) {
    let (na, nb) = (row_norm(a, i), row_norm(b, j));
    let cos = a.row(i).dot(&b.row(j)) / (na * nb);
    for d in 0..a.ncols() {
        g_a[[i, d]] += weight * (b[[j, d]] / (na * nb) - cos * a[[i, d]] / (na * na));
        g_b[[j, d]] += weight * (a[[i, d]] / (na * nb) - cos * b[[j, d]] / (nb * nb));
    }
}

fn alignment_with_grads(
    anchors: &Array2<f64>,
    candidates: &Array2<f64>,
    tau: f64,
    form: AlignmentForm,
    with_grads: bool,
) -> (f64, Array2<f64>, Array2<f64>) {
    let n = anchors.nrows();
    assert_eq!(n, candidates.nrows(), "anchors and candidates must pair up");
    assert_eq!(anchors.ncols(), candidates.ncols(), "row widths must match");
    assert!(n > 0, "alignment batch must be nonempty");
    assert!(tau > 0.0, "temperature must be positive");

    match form {
        AlignmentForm::CrossPair => cross_pair(anchors, candidates, tau, with_grads, n),
        AlignmentForm::Literal => literal(anchors, candidates, tau, with_grads, n),
    }
}

fn cross_pair(
    anchors: &Array2<f64>,
    candidates: &Array2<f64>,
    tau: f64,
    with_grads: bool,
    n: usize,
) -> (f64, Array2<f64>, Array2<f64>) {
    let mut cos = Array2::zeros((n, n));
    for u in 0..n {
        for v in 0..n {
            cos[[u, v]] = cosine_row(anchors, u, candidates, v);
        }
    }

    let mut loss = 0.0;
    let mut probs = Array2::zeros((n, n));
    for u in 0..n {
        let logits: Vec<f64> = (0..n).map(|v| cos[[u, v]] / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += denom.ln() + max - logits[u];
        for v in 0..n {
            probs[[u, v]] = (logits[v] - max).exp() / denom;
        }
    }
    loss /= n as f64;

    if !with_grads {
        return (loss, Array2::zeros((0, 0)), Array2::zeros((0, 0)));
    }

    let mut g_anchors = Array2::zeros((n, anchors.ncols()));
    let mut g_candidates = Array2::zeros((n, candidates.ncols()));
    for u in 0..n {
        for v in 0..n {
            let delta = if u == v { 1.0 } else { 0.0 };
            let w = (probs[[u, v]] - delta) / (tau * n as f64);
            if w != 0.0 {
                add_cosine_grad(anchors, u, candidates, v, w, &mut g_anchors, &mut g_candidates);
            }
        }
    }
    (loss, g_anchors, g_candidates)
}

fn literal(
    anchors: &Array2<f64>,
    candidates: &Array2<f64>,
    tau: f64,
    with_grads: bool,
    n: usize,
) -> (f64, Array2<f64>, Array2<f64>) {
    let diag: Vec<f64> = (0..n).map(|i| cosine_row(anchors, i, candidates, i) / tau).collect();
    let max = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = diag.iter().map(|l| (l - max).exp()).sum();
    let log_denom = denom.ln() + max;
    let loss = diag.iter().map(|l| log_denom - l).sum::<f64>() / n as f64;

    if !with_grads {
        return (loss, Array2::zeros((0, 0)), Array2::zeros((0, 0)));
    }

    let mut g_anchors = Array2::zeros((n, anchors.ncols()));
    let mut g_candidates = Array2::zeros((n, candidates.ncols()));
    for i in 0..n {
        let w = ((diag[i] - max).exp() / denom - 1.0 / n as f64) / tau;
        if w != 0.0 {
            add_cosine_grad(anchors, i, candidates, i, w, &mut g_anchors, &mut g_candidates);
        }
    }
    (loss, g_anchors, g_candidates)
}
