//! Latent variable machinery: Gaussian (non-parametric variant) and
//! categorical (mixture variant) prior/recognition networks, their KL
//! divergences and sampling rules.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Mlp3, ParamStore};
use crate::tensor::Matrix;

/// Raw log-variance outputs are clamped to this range.
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);

/// Diagonal Gaussian `N(mean, diag(std^2))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatentParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianLatentParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::shape("latent mean/std length mismatch"));
        }
        if self.mean.iter().any(|v| !v.is_finite())
            || self.std.iter().any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return Err(Error::numerical("latent parameters must be finite with positive std"));
        }
        Ok(())
    }
}

/// `Cat(K, probs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalLatentParams {
    pub probs: Vec<f64>,
}

impl CategoricalLatentParams {
    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.probs.iter().sum();
        if self.probs.is_empty()
            || self.probs.iter().any(|&p| !(p >= 0.0))
            || (total - 1.0).abs() > 1e-6
        {
            return Err(Error::numerical(format!(
                "categorical weights do not form a distribution (sum {total})"
            )));
        }
        Ok(())
    }
}

/// A latent draw: a real vector, or a component index (one-hot when fed to networks).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LatentSample {
    Gaussian(Vec<f64>),
    Categorical(usize),
}

impl LatentSample {
    /// Network input: the vector itself, or a length-`k` one-hot.
    pub fn encode(&self, k: usize) -> Vec<f64> {
        match self {
            LatentSample::Gaussian(z) => z.clone(),
            LatentSample::Categorical(i) => {
                let mut v = vec![0.0; k];
                v[*i] = 1.0;
                v
            }
        }
    }
}

/// Node handles for a Gaussian latent on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    /// `log(std)`, already clamped.
    pub log_std: Var,
    pub std: Var,
}

/// 3-layer perceptron mapping a feature to `(mean, raw log-variance)`.
#[derive(Clone, Debug)]
pub struct GaussianNet {
    pub mlp: Mlp3,
    pub latent: usize,
}

impl GaussianNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        latent: usize,
        init: &mut Init,
    ) -> Self {
        Self {
            mlp: Mlp3::new(store, name, input, hidden, 2 * latent, init),
            latent,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> GaussianVars {
        let out = self.mlp.forward(g, p, x);
        let mean = g.slice_cols(out, 0, self.latent);
        let raw = g.slice_cols(out, self.latent, 2 * self.latent);
        let raw = g.clamp(raw, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
        // std = exp(raw / 2)
        let log_std = g.scale(raw, 0.5);
        let std = g.exp(log_std);
        GaussianVars { mean, log_std, std }
    }

    /// Evaluates on one input row (a feature, or a concatenation of features).
    pub fn params(&self, store: &ParamStore, input: &[f64]) -> Result<GaussianLatentParams> {
        if input.len() != self.mlp.layers[0].input {
            return Err(Error::shape(format!(
                "latent network expects {} inputs, got {}",
                self.mlp.layers[0].input,
                input.len()
            )));
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(Matrix::row_vector(input));
        let v = self.forward(&mut g, &p, x);
        let out = GaussianLatentParams {
            mean: g.value(v.mean).data().to_vec(),
            std: g.value(v.std).data().to_vec(),
        };
        out.validate()?;
        Ok(out)
    }
}

/// 3-layer perceptron mapping a feature to `K` logits, normalized by softmax.
#[derive(Clone, Debug)]
pub struct CategoricalNet {
    pub mlp: Mlp3,
    pub k: usize,
}

impl CategoricalNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        k: usize,
        init: &mut Init,
    ) -> Self {
        Self {
            mlp: Mlp3::new(store, name, input, hidden, k, init),
            k,
        }
    }

    /// Log-probabilities, `batch x K`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let logits = self.mlp.forward(g, p, x);
        g.log_softmax_cols(logits)
    }

    pub fn params(&self, store: &ParamStore, input: &[f64]) -> Result<CategoricalLatentParams> {
        if input.len() != self.mlp.layers[0].input {
            return Err(Error::shape(format!(
                "latent network expects {} inputs, got {}",
                self.mlp.layers[0].input,
                input.len()
            )));
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(Matrix::row_vector(input));
        let lp = self.forward(&mut g, &p, x);
        let probs: Vec<f64> = g.value(lp).data().iter().map(|v| v.exp()).collect();
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite categorical weights"));
        }
        Ok(CategoricalLatentParams { probs })
    }
}

/// Softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_gaussian(q: &GaussianLatentParams, p: &GaussianLatentParams) -> Result<f64> {
    if q.dim() != p.dim() || q.std.len() != q.dim() || p.std.len() != p.dim() {
        return Err(Error::shape(format!(
            "KL between {}-D and {}-D Gaussians",
            q.dim(),
            p.dim()
        )));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, sq, mp, sp) = (q.mean[i], q.std[i], p.mean[i], p.std[i]);
        let d = mq - mp;
        kl += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl.max(0.0))
}

/// Per-row Gaussian KL on a graph, `batch x 1`.
pub fn kl_gaussian_graph(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Var {
    let log_ratio = g.sub(p.log_std, q.log_std);
    let var_q = g.square(q.std);
    let d = g.sub(q.mean, p.mean);
    let d2 = g.square(d);
    let num = g.add(var_q, d2);
    let var_p = g.square(p.std);
    let two_var_p = g.scale(var_p, 2.0);
    let frac = g.div(num, two_var_p);
    let t = g.add(log_ratio, frac);
    let t = g.offset(t, -0.5);
    g.sum_cols(t)
}

/// Reparameterized draws `mean + std * eps`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    params: &GaussianLatentParams,
    n: usize,
    rng: &mut R,
) -> Vec<LatentSample> {
    (0..n)
        .map(|_| {
            let z = params
                .mean
                .iter()
                .zip(&params.std)
                .map(|(m, s)| {
                    let e: f64 = rng.sample(StandardNormal);
                    m + s * e
                })
                .collect();
            LatentSample::Gaussian(z)
        })
        .collect()
}

/// Standard normal noise matrix.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// `KL(q || p) = sum q_i log(q_i / p_i)` with `0 log 0 = 0`.
pub fn kl_categorical(q: &CategoricalLatentParams, p: &CategoricalLatentParams) -> Result<f64> {
    if q.probs.len() != p.probs.len() {
        return Err(Error::shape(format!(
            "KL between {} and {} categories",
            q.probs.len(),
            p.probs.len()
        )));
    }
    let mut kl = 0.0;
    for (&qi, &pi) in q.probs.iter().zip(&p.probs) {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(Error::numerical(
                "categorical KL is infinite: q puts mass where p has none",
            ));
        }
        kl += qi * (qi / pi).ln();
    }
    Ok(kl.max(0.0))
}

/// Per-row categorical KL on a graph from log-probabilities, `batch x 1`.
pub fn kl_categorical_graph(g: &mut Graph, log_q: Var, log_p: Var) -> Var {
    let q = g.exp(log_q);
    let diff = g.sub(log_q, log_p);
    let t = g.mul(q, diff);
    g.sum_cols(t)
}

/// Training enumerates every component once; testing draws from the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Train,
    Test,
}

/// Component indices. `Train` ignores `n` and returns `0..K` in order.
pub fn sample_categorical<R: Rng + ?Sized>(
    params: &CategoricalLatentParams,
    mode: SampleMode,
    n: usize,
    rng: &mut R,
) -> Result<Vec<LatentSample>> {
    match mode {
        SampleMode::Train => Ok((0..params.probs.len()).map(LatentSample::Categorical).collect()),
        SampleMode::Test => {
            let dist = WeightedIndex::new(&params.probs)
                .map_err(|e| Error::numerical(format!("categorical weights: {e}")))?;
            Ok((0..n)
                .map(|_| LatentSample::Categorical(dist.sample(rng)))
                .collect())
        }
    }
}
