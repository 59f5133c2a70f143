//! Side-information encoders.
//!
//! [`SseModel`] is a variational autoencoder over text embeddings whose
//! prior is conditioned on each node's spectral conditioner: the
//! encoder sees the embedding and the conditioner, the prior sees the
//! conditioner alone, and the decoder reconstructs the embedding from a
//! reparameterized latent draw. Training minimizes reconstruction plus
//! KL between the two diagonal Gaussians; the side representation used
//! downstream is the posterior mean.
//!
//! [`BaselineEncoder`] is the unconditioned stand-in: one MLP from
//! embedding to representation, no latent variable, no prior.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::{GaussianHead, GaussianHeadCache, GaussianParams, Mlp, MlpCache, Tensors};
use crate::par;

const HEAD_STD: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SseConfig {
    /// Width of the text embeddings being reconstructed.
    pub input_dim: usize,
    /// Width of the spectral conditioner.
    pub conditioner_dim: usize,
    /// Latent and side-representation width.
    pub latent_dim: usize,
    /// Hidden widths for encoder and prior trunks; the decoder mirrors
    /// them in reverse.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseModel {
    pub encoder: GaussianHead,
    pub prior: GaussianHead,
    pub decoder: Mlp,
    pub log_obs_noise: f64,
}

/// Batch-mean loss terms; `total = reconstruction + kl` by definition,
/// each term is also exposed for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct SseCache {
    x: Array2<f64>,
    encoder_cache: GaussianHeadCache,
    prior_cache: GaussianHeadCache,
    posterior: GaussianParams,
    prior_params: GaussianParams,
    eps: Array2<f64>,
    decoder_cache: MlpCache,
    x_hat: Array2<f64>,
}

impl SseCache {
    pub fn posterior(&self) -> &GaussianParams {
        &self.posterior
    }
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts match")
}

impl SseModel {
    pub fn new(config: &SseConfig, rng: &mut impl Rng) -> Self {
        let enc_in = config.input_dim + config.conditioner_dim;
        let mut decoder_dims: Vec<usize> = vec![config.latent_dim];
        decoder_dims.extend(config.hidden.iter().rev());
        decoder_dims.push(config.input_dim);
        SseModel {
            encoder: GaussianHead::random(enc_in, &config.hidden, config.latent_dim, HEAD_STD, rng),
            prior: GaussianHead::random(
                config.conditioner_dim,
                &config.hidden,
                config.latent_dim,
                HEAD_STD,
                rng,
            ),
            decoder: Mlp::random(&decoder_dims, false, rng),
            log_obs_noise: 0.0,
        }
    }

    pub fn zeros(config: &SseConfig) -> Self {
        let enc_in = config.input_dim + config.conditioner_dim;
        let mut decoder_dims: Vec<usize> = vec![config.latent_dim];
        decoder_dims.extend(config.hidden.iter().rev());
        decoder_dims.push(config.input_dim);
        SseModel {
            encoder: GaussianHead::zeros(enc_in, &config.hidden, config.latent_dim),
            prior: GaussianHead::zeros(config.conditioner_dim, &config.hidden, config.latent_dim),
            decoder: Mlp::zeros(&decoder_dims, false),
            log_obs_noise: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        SseModel {
            encoder: self.encoder.zeros_like(),
            prior: self.prior.zeros_like(),
            decoder: self.decoder.zeros_like(),
            log_obs_noise: 0.0,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    /// Conditional prior `p(z | c)`.
    pub fn prior_params(&self, c: &Array2<f64>) -> GaussianParams {
        self.prior.forward(c).0
    }

    /// Posterior `q(z | x, c)`.
    pub fn encode(&self, x: &Array2<f64>, c: &Array2<f64>) -> GaussianParams {
        self.encoder.forward(&concat_cols(x, c)).0
    }

    /// Posterior mean, the representation handed to the recommender.
    pub fn side_representation(&self, x: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
        self.encode(x, c).mu
    }

    /// Loss with a caller-supplied standard-normal draw, so gradient
    /// checks can reuse one draw across evaluations.
    pub fn elbo_with_noise(
        &self,
        x: &Array2<f64>,
        c: &Array2<f64>,
        eps: &Array2<f64>,
    ) -> (ElboTerms, SseCache) {
        let batch = x.nrows() as f64;
        let (posterior, encoder_cache) = self.encoder.forward(&concat_cols(x, c));
        let (prior_params, prior_cache) = self.prior.forward(c);

        let sigma_q = posterior.logvar.mapv(|v| (0.5 * v).exp());
        let z = &posterior.mu + &(eps * &sigma_q);
        let (x_hat, decoder_cache) = self.decoder.forward(&z);

        let inv_obs_var = (-2.0 * self.log_obs_noise).exp();
        let residual_sq = (x - &x_hat).mapv(|d| d * d).sum();
        let reconstruction = (0.5 * residual_sq * inv_obs_var
            + x.ncols() as f64 * self.log_obs_noise * batch)
            / batch;

        let mut kl_sum = 0.0;
        for i in 0..x.nrows() {
            for j in 0..self.latent_dim() {
                let lq = posterior.logvar[[i, j]];
                let lp = prior_params.logvar[[i, j]];
                let dm = posterior.mu[[i, j]] - prior_params.mu[[i, j]];
                kl_sum += 0.5 * ((lp - lq) + (lq - lp).exp() + dm * dm * (-lp).exp() - 1.0);
            }
        }
        let kl = kl_sum / batch;

        let terms = ElboTerms { total: reconstruction + kl, reconstruction, kl };
        let cache = SseCache {
            x: x.clone(),
            encoder_cache,
            prior_cache,
            posterior,
            prior_params,
            eps: eps.clone(),
            decoder_cache,
            x_hat,
        };
        (terms, cache)
    }

    /// Loss with a fresh reparameterization draw from `rng`.
    pub fn elbo(
        &self,
        x: &Array2<f64>,
        c: &Array2<f64>,
        rng: &mut impl Rng,
    ) -> (ElboTerms, SseCache) {
        let eps = Array2::from_shape_fn((x.nrows(), self.latent_dim()), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        self.elbo_with_noise(x, c, &eps)
    }

    /// Gradients of the batch-mean loss into a model-shaped holder.
    /// Returns the gradient with respect to the input embeddings.
    pub fn backward(&self, cache: &SseCache, grads: &mut SseModel) -> Array2<f64> {
        self.backward_weighted(cache, 1.0, None, grads)
    }

    /// As [`Self::backward`], scaling every loss-derived gradient by
    /// `loss_weight` and adding `extra_mu_grad` (a downstream gradient
    /// on the posterior mean) before the encoder backward pass.
    pub fn backward_weighted(
        &self,
        cache: &SseCache,
        loss_weight: f64,
        extra_mu_grad: Option<&Array2<f64>>,
        grads: &mut SseModel,
    ) -> Array2<f64> {
        let batch = cache.x.nrows() as f64;
        let scale = loss_weight / batch;
        let inv_obs_var = (-2.0 * self.log_obs_noise).exp();

        let g_x_hat = (&cache.x_hat - &cache.x).mapv(|d| d * inv_obs_var * scale);
        let g_z = self.decoder.backward(&cache.decoder_cache, &g_x_hat, &mut grads.decoder);

        let residual_sq = (&cache.x - &cache.x_hat).mapv(|d| d * d).sum();
        grads.log_obs_noise +=
            scale * (-residual_sq * inv_obs_var) + loss_weight * cache.x.ncols() as f64;

        let mu_q = &cache.posterior.mu;
        let lv_q = &cache.posterior.logvar;
        let mu_p = &cache.prior_params.mu;
        let lv_p = &cache.prior_params.logvar;
        let dm = mu_q - mu_p;
        let inv_vp = lv_p.mapv(|v| (-v).exp());
        let ratio = (lv_q - lv_p).mapv(f64::exp);

        let mut g_mu_q = &g_z + &(&dm * &inv_vp * scale);
        if let Some(extra) = extra_mu_grad {
            g_mu_q += extra;
        }
        let sigma_q = lv_q.mapv(|v| (0.5 * v).exp());
        let g_lv_q = &(&g_z * &cache.eps * &sigma_q * 0.5) + &(ratio.mapv(|r| 0.5 * (r - 1.0) * scale));
        let g_mu_p = &dm * &inv_vp * (-scale);
        let g_lv_p = (&ratio + &(&dm * &dm * &inv_vp)).mapv(|t| 0.5 * (1.0 - t) * scale);

        let g_enc_in =
            self.encoder.backward(&cache.encoder_cache, &g_mu_q, &g_lv_q, &mut grads.encoder);
        self.prior.backward(&cache.prior_cache, &g_mu_p, &g_lv_p, &mut grads.prior);

        // x reaches the loss twice: through the encoder input and
        // directly inside the reconstruction residual.
        let x_dim = cache.x.ncols();
        g_enc_in.slice(ndarray::s![.., ..x_dim]).to_owned() - &g_x_hat
    }
}

impl Tensors for SseModel {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        let p = |leaf: &str| {
            if prefix.is_empty() {
                leaf.to_string()
            } else {
                format!("{prefix}.{leaf}")
            }
        };
        self.encoder.collect(&p("enc"), out);
        self.prior.collect(&p("prior"), out);
        self.decoder.collect(&p("dec"), out);
        out.push((p("obs_noise"), std::slice::from_ref(&self.log_obs_noise)));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        let p = |leaf: &str| {
            if prefix.is_empty() {
                leaf.to_string()
            } else {
                format!("{prefix}.{leaf}")
            }
        };
        self.encoder.collect_mut(&p("enc"), out);
        self.prior.collect_mut(&p("prior"), out);
        self.decoder.collect_mut(&p("dec"), out);
        out.push((p("obs_noise"), std::slice::from_mut(&mut self.log_obs_noise)));
    }
}

/// Encodes a large table in fixed-size row blocks. Blocks are
/// independent, so the parallel and sequential builds produce
/// bit-identical output.
pub fn side_representations_chunked(
    model: &SseModel,
    x: &Array2<f64>,
    c: &Array2<f64>,
    chunk_rows: usize,
) -> Array2<f64> {
    assert_eq!(x.nrows(), c.nrows(), "embedding and conditioner row counts differ");
    assert!(chunk_rows > 0);
    let n = x.nrows();
    let n_chunks = n.div_ceil(chunk_rows);
    let blocks = par::map_indexed(n_chunks, |b| {
        let lo = b * chunk_rows;
        let hi = (lo + chunk_rows).min(n);
        let xs = x.slice(ndarray::s![lo..hi, ..]).to_owned();
        let cs = c.slice(ndarray::s![lo..hi, ..]).to_owned();
        model.side_representation(&xs, &cs)
    });
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(0), &views).expect("column counts match")
}

/// One MLP from embedding to representation; used when the variational
/// stage is switched off.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEncoder {
    pub net: Mlp,
}

impl BaselineEncoder {
    pub fn new(input_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        BaselineEncoder { net: Mlp::random(&dims, false, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        BaselineEncoder { net: self.net.zeros_like() }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        self.net.forward(x)
    }

    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &Array2<f64>,
        grads: &mut BaselineEncoder,
    ) -> Array2<f64> {
        self.net.backward(cache, grad_out, &mut grads.net)
    }
}

impl Tensors for BaselineEncoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        let tag = if prefix.is_empty() { "net".to_string() } else { format!("{prefix}.net") };
        self.net.collect(&tag, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        let tag = if prefix.is_empty() { "net".to_string() } else { format!("{prefix}.net") };
        self.net.collect_mut(&tag, out);
    }
}
