//! Minimal dense-network building blocks in f64.
//!
//! Everything here is batch-first: activations are `batch × dim` arrays,
//! forward passes return caches, and backward passes accumulate into
//! gradient holders shaped exactly like the modules they mirror
//! (`zeros_like`). Parameters are reached through [`Tensors`], which
//! yields named flat slices in a stable order so one optimizer can walk
//! an arbitrary bundle of modules.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::HashMap;

/// Log-variances are clamped to this magnitude before exponentiation.
pub const LOGVAR_CLAMP: f64 = 10.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow on large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x)`, stable for very negative `x`.
pub fn ln_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Named access to every parameter slice of a module, in a stable order.
pub trait Tensors {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>);

    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }
}

/// Multiplies every parameter in place; used to turn sums into means.
pub fn scale_tensors(module: &mut impl Tensors, factor: f64) {
    for (_, slice) in module.tensors_mut() {
        for x in slice {
            *x *= factor;
        }
    }
}

/// Affine layer `y = x·W + b` with `W` stored input × output.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense { w: Array2::zeros((input, output)), b: Array1::zeros(output) }
    }

    pub fn random(input: usize, output: usize, std: f64, rng: &mut impl Rng) -> Self {
        let w = Array2::from_shape_fn((input, output), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Dense { w, b: Array1::zeros(output) }
    }

    pub fn zeros_like(&self) -> Self {
        Dense::zeros(self.w.nrows(), self.w.ncols())
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        grad_out: &Array2<f64>,
        grads: &mut Dense,
    ) -> Array2<f64> {
        grads.w += &x.t().dot(grad_out);
        grads.b += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.w.t())
    }
}

impl Tensors for Dense {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((join(prefix, "w"), self.w.as_slice().expect("standard layout")));
        out.push((join(prefix, "b"), self.b.as_slice().expect("standard layout")));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((join(prefix, "w"), self.w.as_slice_mut().expect("standard layout")));
        out.push((join(prefix, "b"), self.b.as_slice_mut().expect("standard layout")));
    }
}

/// Stack of dense layers with tanh between them; the final layer is
/// linear unless `final_tanh` is set. An empty stack is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub final_tanh: bool,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    activated: Vec<Option<Array2<f64>>>,
}

impl Mlp {
    pub fn identity() -> Self {
        Mlp { layers: Vec::new(), final_tanh: false }
    }

    pub fn zeros(dims: &[usize], final_tanh: bool) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect();
        Mlp { layers, final_tanh }
    }

    pub fn random(dims: &[usize], final_tanh: bool, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|d| Dense::random(d[0], d[1], 1.0 / (d[0] as f64).sqrt(), rng))
            .collect();
        Mlp { layers, final_tanh }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp { layers: self.layers.iter().map(Dense::zeros_like).collect(), final_tanh: self.final_tanh }
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.final_tanh
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut cache =
            MlpCache { inputs: Vec::with_capacity(self.layers.len()), activated: Vec::new() };
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cache.inputs.push(cur.clone());
            let z = layer.forward(&cur);
            if self.activates(i) {
                let y = z.mapv(f64::tanh);
                cache.activated.push(Some(y.clone()));
                cur = y;
            } else {
                cache.activated.push(None);
                cur = z;
            }
        }
        (cur, cache)
    }

    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &Array2<f64>,
        grads: &mut Mlp,
    ) -> Array2<f64> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if let Some(y) = &cache.activated[i] {
                g = g * &y.mapv(|t| 1.0 - t * t);
            }
            g = self.layers[i].backward(&cache.inputs[i], &g, &mut grads.layers[i]);
        }
        g
    }
}

impl Tensors for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Mean and clamped log-variance of a diagonal Gaussian, batch-first.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

/// Trunk MLP feeding two linear heads, one per Gaussian parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub trunk: Mlp,
    pub mu: Dense,
    pub logvar: Dense,
}

#[derive(Debug, Clone)]
pub struct GaussianHeadCache {
    trunk_cache: MlpCache,
    trunk_out: Array2<f64>,
    raw_logvar: Array2<f64>,
}

impl GaussianHead {
    pub fn zeros(input: usize, hidden: &[usize], latent: usize) -> Self {
        let (trunk, trunk_out) = if hidden.is_empty() {
            (Mlp::identity(), input)
        } else {
            let mut dims = vec![input];
            dims.extend_from_slice(hidden);
            (Mlp::zeros(&dims, true), *hidden.last().unwrap())
        };
        GaussianHead {
            trunk,
            mu: Dense::zeros(trunk_out, latent),
            logvar: Dense::zeros(trunk_out, latent),
        }
    }

    pub fn random(
        input: usize,
        hidden: &[usize],
        latent: usize,
        head_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let (trunk, trunk_out) = if hidden.is_empty() {
            (Mlp::identity(), input)
        } else {
            let mut dims = vec![input];
            dims.extend_from_slice(hidden);
            (Mlp::random(&dims, true, rng), *hidden.last().unwrap())
        };
        GaussianHead {
            trunk,
            mu: Dense::random(trunk_out, latent, head_std, rng),
            logvar: Dense::random(trunk_out, latent, head_std, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GaussianHead {
            trunk: self.trunk.zeros_like(),
            mu: self.mu.zeros_like(),
            logvar: self.logvar.zeros_like(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.out_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (GaussianParams, GaussianHeadCache) {
        let (trunk_out, trunk_cache) = self.trunk.forward(x);
        let mu = self.mu.forward(&trunk_out);
        let raw_logvar = self.logvar.forward(&trunk_out);
        let logvar = raw_logvar.mapv(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        (GaussianParams { mu, logvar }, GaussianHeadCache { trunk_cache, trunk_out, raw_logvar })
    }

    /// Backward through both heads and the trunk. The log-variance
    /// gradient is zeroed where the clamp was active.
    pub fn backward(
        &self,
        cache: &GaussianHeadCache,
        grad_mu: &Array2<f64>,
        grad_logvar: &Array2<f64>,
        grads: &mut GaussianHead,
    ) -> Array2<f64> {
        let masked = grad_logvar
            * &cache.raw_logvar.mapv(|v| if v.abs() < LOGVAR_CLAMP { 1.0 } else { 0.0 });
        let mut g_trunk = self.mu.backward(&cache.trunk_out, grad_mu, &mut grads.mu);
        g_trunk += &self.logvar.backward(&cache.trunk_out, &masked, &mut grads.logvar);
        self.trunk.backward(&cache.trunk_cache, &g_trunk, &mut grads.trunk)
    }
}

impl Tensors for GaussianHead {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.trunk.collect(&join(prefix, "trunk"), out);
        self.mu.collect(&join(prefix, "mu"), out);
        self.logvar.collect(&join(prefix, "logvar"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.trunk.collect_mut(&join(prefix, "trunk"), out);
        self.mu.collect_mut(&join(prefix, "mu"), out);
        self.logvar.collect_mut(&join(prefix, "logvar"), out);
    }
}

/// Adam with bias correction; moment buffers are keyed by tensor name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: HashMap::new() }
    }

    /// One update over matching (name, parameter) and (name, gradient)
    /// lists; names must line up pairwise.
    pub fn step(&mut self, params: Vec<(String, &mut [f64])>, grads: Vec<(String, &[f64])>) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lists differ");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((pname, p), (gname, g)) in params.into_iter().zip(grads) {
            assert_eq!(pname, gname, "parameter and gradient order diverged");
            assert_eq!(p.len(), g.len(), "shape mismatch for {pname}");
            let (m, v) = self
                .moments
                .entry(pname)
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
