mod common;

use cllmr_core::encoders::{
    side_representations_chunked, BaselineEncoder, SseConfig, SseModel,
};
use cllmr_core::nn::{Adam, Tensors};
use cllmr_core::seeds;
use ndarray::Array2;
use rand::Rng;

fn small_config() -> SseConfig {
    SseConfig { input_dim: 4, conditioner_dim: 3, latent_dim: 2, hidden: vec![5] }
}

fn random_matrix(rows: usize, cols: usize, seed: u64, tag: &str) -> Array2<f64> {
    let mut rng = seeds::rng(seed, tag);
    Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() - 0.5)
}

fn train_steps(
    model: &mut SseModel,
    x: &Array2<f64>,
    c: &Array2<f64>,
    steps: usize,
    lr: f64,
    seed: u64,
) {
    let mut adam = Adam::new(lr);
    let mut rng = seeds::rng(seed, "encoder-train");
    for _ in 0..steps {
        let (_, cache) = model.elbo(x, c, &mut rng);
        let mut grads = model.zeros_like();
        model.backward(&cache, &mut grads);
        adam.step(model.tensors_mut(), grads.tensors());
    }
}

#[test]
fn unit_mean_shift_against_standard_prior_costs_exactly_half() {
    // Posterior N(1,1) against prior N(0,1) in one latent dimension,
    // with a decoder that reconstructs the all-zero input perfectly,
    // leaves only the KL term: 0.5.
    let config = SseConfig { input_dim: 3, conditioner_dim: 2, latent_dim: 1, hidden: vec![] };
    let mut model = SseModel::zeros(&config);
    model.encoder.mu.b[0] = 1.0;

    let x = Array2::zeros((4, 3));
    let c = random_matrix(4, 2, 9, "cond");
    let mut rng = seeds::rng(1, "eps");
    let (terms, _) = model.elbo(&x, &c, &mut rng);
    assert!((terms.total - 0.5).abs() < 1e-12);
    assert_eq!(terms.reconstruction, 0.0);
    assert!((terms.kl - 0.5).abs() < 1e-12);
}

#[test]
fn matched_posterior_and_prior_have_zero_kl() {
    let config = small_config();
    let model = SseModel::zeros(&config);
    let x = random_matrix(5, 4, 2, "x");
    let c = random_matrix(5, 3, 2, "c");
    let mut rng = seeds::rng(3, "eps");
    let (terms, _) = model.elbo(&x, &c, &mut rng);
    assert_eq!(terms.kl, 0.0);
    assert!(terms.reconstruction > 0.0);
    assert_eq!(terms.total, terms.reconstruction);
}

#[test]
fn loss_terms_sum_to_the_total() {
    let config = small_config();
    let mut rng = seeds::rng(11, "model");
    let model = SseModel::new(&config, &mut rng);
    let x = random_matrix(6, 4, 4, "x");
    let c = random_matrix(6, 3, 4, "c");
    let (terms, _) = model.elbo(&x, &c, &mut rng);
    assert!((terms.total - (terms.reconstruction + terms.kl)).abs() < 1e-12);
    assert!(terms.kl >= 0.0);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let config = small_config();
    let mut rng = seeds::rng(21, "model");
    let model = SseModel::new(&config, &mut rng);
    let x = random_matrix(6, 4, 22, "x");
    let c = random_matrix(6, 3, 23, "c");
    let eps = {
        let mut r = seeds::rng(24, "eps");
        Array2::from_shape_fn((6, 2), |_| {
            rand::Rng::sample::<f64, _>(&mut r, rand_distr::StandardNormal)
        })
    };

    let (_, cache) = model.elbo_with_noise(&x, &c, &eps);
    let mut grads = model.zeros_like();
    model.backward(&cache, &mut grads);

    common::assert_matches_finite_difference(
        |m: &SseModel| m.elbo_with_noise(&x, &c, &eps).0.total,
        &model,
        &grads,
        1e-5,
        1e-4,
    );
}

#[test]
fn input_gradient_matches_finite_differences() {
    let config = small_config();
    let mut rng = seeds::rng(31, "model");
    let model = SseModel::new(&config, &mut rng);
    let mut x = random_matrix(3, 4, 32, "x");
    let c = random_matrix(3, 3, 33, "c");
    let eps = Array2::zeros((3, 2));

    let (_, cache) = model.elbo_with_noise(&x, &c, &eps);
    let mut grads = model.zeros_like();
    let g_x = model.backward(&cache, &mut grads);

    let h = 1e-5;
    for i in 0..3 {
        for j in 0..4 {
            let orig = x[[i, j]];
            x[[i, j]] = orig + h;
            let up = model.elbo_with_noise(&x, &c, &eps).0.total;
            x[[i, j]] = orig - h;
            let down = model.elbo_with_noise(&x, &c, &eps).0.total;
            x[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = g_x[[i, j]].abs().max(numeric.abs()).max(1e-6);
            assert!((g_x[[i, j]] - numeric).abs() / denom < 1e-4);
        }
    }
}

#[test]
fn training_reduces_the_loss_substantially() {
    let config = small_config();
    let mut rng = seeds::rng(41, "model");
    let mut model = SseModel::new(&config, &mut rng);
    let x = random_matrix(16, 4, 42, "x");
    let c = random_matrix(16, 3, 43, "c");

    let mut eval_rng = seeds::rng(44, "eval");
    let (before, _) = model.elbo(&x, &c, &mut eval_rng);
    train_steps(&mut model, &x, &c, 200, 1e-2, 45);
    let mut eval_rng = seeds::rng(44, "eval");
    let (after, _) = model.elbo(&x, &c, &mut eval_rng);

    assert!(
        after.total <= 0.8 * before.total,
        "loss went from {} to {}",
        before.total,
        after.total
    );
}

#[test]
fn shuffling_conditioners_after_training_raises_the_loss() {
    // Embeddings are built directly from the conditioners, so a model
    // that learned the pairing should find mismatched conditioners
    // harder to explain.
    let config = SseConfig { input_dim: 4, conditioner_dim: 4, latent_dim: 2, hidden: vec![8] };
    let mut rng = seeds::rng(51, "model");
    let mut model = SseModel::new(&config, &mut rng);

    let n = 16;
    let mut c = Array2::zeros((n, 4));
    for i in 0..n {
        c[[i, i % 4]] = 2.0;
    }
    let noise = random_matrix(n, 4, 52, "noise");
    let x = &c + &noise.mapv(|v| v * 0.1);

    train_steps(&mut model, &x, &c, 400, 5e-3, 53);

    let mut shuffled = c.clone();
    for i in 0..n {
        let row: Vec<f64> = c.row((i + 1) % n).to_vec();
        for j in 0..4 {
            shuffled[[i, j]] = row[j];
        }
    }

    let eps = Array2::zeros((n, 2));
    let (matched, _) = model.elbo_with_noise(&x, &c, &eps);
    let (mismatched, _) = model.elbo_with_noise(&x, &shuffled, &eps);
    assert!(
        mismatched.total > matched.total,
        "matched {} vs mismatched {}",
        matched.total,
        mismatched.total
    );
}

#[test]
fn side_representation_is_the_posterior_mean_and_is_deterministic() {
    let config = small_config();
    let mut rng = seeds::rng(61, "model");
    let model = SseModel::new(&config, &mut rng);
    let x = random_matrix(5, 4, 62, "x");
    let c = random_matrix(5, 3, 63, "c");

    let s1 = model.side_representation(&x, &c);
    let s2 = model.side_representation(&x, &c);
    assert_eq!(s1, s2);
    assert_eq!(s1, model.encode(&x, &c).mu);
}

#[test]
fn zero_model_collapses_representations_to_zero() {
    let config = small_config();
    let model = SseModel::zeros(&config);
    let x = random_matrix(5, 4, 71, "x");
    let c = random_matrix(5, 3, 72, "c");
    let s = model.side_representation(&x, &c);
    assert!(s.iter().all(|v| *v == 0.0));
}

#[test]
fn short_training_keeps_node_representations_distinct() {
    let config = small_config();
    let mut rng = seeds::rng(81, "model");
    let mut model = SseModel::new(&config, &mut rng);
    let x = random_matrix(8, 4, 82, "x");
    let c = random_matrix(8, 3, 83, "c");
    train_steps(&mut model, &x, &c, 50, 1e-2, 84);

    let s = model.side_representation(&x, &c);
    for i in 0..8 {
        for j in (i + 1)..8 {
            let dist: f64 = (0..2).map(|d| (s[[i, d]] - s[[j, d]]).powi(2)).sum();
            assert!(dist.sqrt() > 1e-6, "rows {i} and {j} collapsed");
        }
    }
}

#[test]
fn chunked_encoding_matches_one_shot_encoding_exactly() {
    let config = small_config();
    let mut rng = seeds::rng(91, "model");
    let model = SseModel::new(&config, &mut rng);
    let x = random_matrix(10, 4, 92, "x");
    let c = random_matrix(10, 3, 93, "c");

    let full = model.side_representation(&x, &c);
    for chunk in [1, 3, 4, 10, 64] {
        let chunked = side_representations_chunked(&model, &x, &c, chunk);
        assert_eq!(full, chunked, "chunk size {chunk}");
    }
}

#[test]
fn baseline_encoder_gradients_match_finite_differences() {
    let mut rng = seeds::rng(101, "model");
    let enc = BaselineEncoder::new(4, &[5], 2, &mut rng);
    let x = random_matrix(6, 4, 102, "x");
    let target = random_matrix(6, 2, 103, "t");

    let loss_of = |e: &BaselineEncoder| {
        let (y, _) = e.forward(&x);
        0.5 * (&y - &target).mapv(|d| d * d).sum()
    };

    let (y, cache) = enc.forward(&x);
    let mut grads = enc.zeros_like();
    enc.backward(&cache, &(&y - &target), &mut grads);

    common::assert_matches_finite_difference(loss_of, &enc, &grads, 1e-5, 1e-4);
}
