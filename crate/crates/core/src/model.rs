//! Full predictor: encoders, latent networks, goal network and decoder wired
//! together, with the training losses built on the autodiff graph and the
//! sampling routines used at prediction time.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::bidecoder::{BackwardFeed, BiDecoder, DecoderShape};
use crate::data::{Standardizer, TrajectoryWindow};
use crate::encoders::{Feature, TrajectoryEncoder};
use crate::error::{Error, Result};
use crate::gmm::{integrate_forward, BackwardAnchor, GmmSequence, GmmSpace, GmmStep, COV_FLOOR};
use crate::goal::{mixture_from_heads, GmmGoalNet, NpGoalNet, CORR_BOUND, LOG_STD_RANGE};
use crate::latent::{
    kl_categorical_graph, kl_gaussian_graph, sample_categorical, standard_normal,
    CategoricalLatentParams, CategoricalNet, GaussianNet, LatentSample, SampleMode,
};
use crate::nn::{Bound, Init, ParamStore};
use crate::tensor::Matrix;

/// Per-step width of the velocity mixture heads: mean x/y, log-std x/y, correlation.
pub const VELOCITY_HEADS: usize = 5;

/// Rows decoded per graph at prediction time.
const DECODE_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Gaussian latent, residual goals, best-of-many loss.
    #[default]
    Np,
    /// Categorical latent, mixture goal and velocity heads, likelihood loss.
    Gmm,
    /// Single sample with the latent fixed at the prior mean; no KL term.
    Deterministic,
    /// As `Np` with the backward decoder removed.
    NpForwardOnly,
}

impl Variant {
    pub fn is_gmm(self) -> bool {
        self == Variant::Gmm
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Np => "np",
            Variant::Gmm => "gmm",
            Variant::Deterministic => "deterministic",
            Variant::NpForwardOnly => "np_forward_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// State dimension seen by the model (2 for the mixture variant).
    pub dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub components: usize,
    pub delta: usize,
    pub dt: f64,
    pub backward_feed: BackwardFeed,
    pub backward_anchor: BackwardAnchor,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Np,
            dim: 2,
            hidden: 256,
            latent_dim: 32,
            components: 20,
            delta: 12,
            dt: 0.4,
            backward_feed: BackwardFeed::Readout,
            backward_anchor: BackwardAnchor::PredictedGoal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.delta == 0 {
            return Err(Error::config("dim, hidden and delta must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.variant.is_gmm() {
            if self.dim != 2 {
                return Err(Error::config(format!(
                    "the mixture variant models 2-D positions, got dim {}",
                    self.dim
                )));
            }
            if self.components == 0 {
                return Err(Error::config("components must be positive"));
            }
        } else if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum LatentNets {
    Gaussian {
        prior: GaussianNet,
        posterior: Option<GaussianNet>,
    },
    Categorical {
        prior: CategoricalNet,
        posterior: CategoricalNet,
    },
}

#[derive(Clone, Debug)]
pub enum GoalNet {
    Np(NpGoalNet),
    Gmm(GmmGoalNet),
}

/// Standardized training batch: residuals relative to each window's current position.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `tau` matrices of `batch x D`, oldest first.
    pub past: Vec<Matrix>,
    /// `delta` matrices of `batch x D`.
    pub future: Vec<Matrix>,
}

impl Batch {
    pub fn from_windows(windows: &[&TrajectoryWindow], std: &Standardizer) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::data("empty batch"))?;
        let (tau, delta, d) = (first.tau(), first.delta(), first.dim());
        if std.dim() != d {
            return Err(Error::shape(format!(
                "standardizer is {}-D, windows are {d}-D",
                std.dim()
            )));
        }
        let b = windows.len();
        let mut past = vec![Matrix::zeros(b, d); tau];
        let mut future = vec![Matrix::zeros(b, d); delta];
        for (i, w) in windows.iter().enumerate() {
            if w.tau() != tau || w.delta() != delta || w.dim() != d {
                return Err(Error::shape("windows in a batch must share tau, delta and dim"));
            }
            let rel = relative(w, std);
            for s in 0..tau {
                past[s].row_mut(i).copy_from_slice(rel.past.row(s));
            }
            for s in 0..delta {
                future[s].row_mut(i).copy_from_slice(rel.future.row(s));
            }
        }
        Ok(Self { past, future })
    }

    pub fn len(&self) -> usize {
        self.past[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn goal(&self) -> &Matrix {
        self.future.last().expect("non-empty horizon")
    }
}

/// Window expressed as standardized offsets from its current position.
pub fn relative(w: &TrajectoryWindow, std: &Standardizer) -> TrajectoryWindow {
    let origin = w.origin().to_vec();
    let f = |m: &Matrix| {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - origin[j]) / std.scale[j];
            }
        }
        out
    };
    TrajectoryWindow {
        past: f(&w.past),
        future: f(&w.future),
        ..w.clone()
    }
}

/// Graph handles of a loss evaluation.
#[derive(Clone, Debug)]
pub struct LossVars {
    /// Batch mean of the per-window loss, `1 x 1`.
    pub total: Var,
    /// Batch means of the individual terms, in a fixed order per variant.
    pub terms: Vec<(&'static str, Var)>,
}

/// Prediction for one window in the standardized residual frame.
#[derive(Clone, Debug)]
pub struct Forecast {
    /// Sampled trajectories, each `delta x D`.
    pub samples: Vec<Matrix>,
    /// Endpoint of each sample's goal network output (NP variants).
    pub goals: Vec<Vec<f64>>,
    pub mixture: Option<MixtureForecast>,
}

#[derive(Clone, Debug)]
pub struct MixtureForecast {
    pub goal: GmmStep,
    pub velocity: GmmSequence,
    pub position: GmmSequence,
    /// Component drawn for each sample.
    pub components: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BiTraP {
    pub config: ModelConfig,
    pub past_encoder: TrajectoryEncoder,
    pub future_encoder: Option<TrajectoryEncoder>,
    pub latent: LatentNets,
    pub goal: GoalNet,
    pub decoder: BiDecoder,
}

struct Gauss2 {
    mx: Var,
    my: Var,
    sxx: Var,
    syy: Var,
    sxy: Var,
}

impl BiTraP {
    pub fn new(config: ModelConfig, init: &mut Init) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (d, h) = (config.dim, config.hidden);
        let past_encoder = TrajectoryEncoder::new(s, "past_encoder", d, h, init);
        let deterministic = config.variant == Variant::Deterministic;
        let future_encoder =
            (!deterministic).then(|| TrajectoryEncoder::new(s, "future_encoder", d, h, init));
        let (latent, goal, cond, goal_dim, output) = if config.variant.is_gmm() {
            let k = config.components;
            let latent = LatentNets::Categorical {
                prior: CategoricalNet::new(s, "prior", h, h, k, init),
                posterior: CategoricalNet::new(s, "posterior", 2 * h, h, k, init),
            };
            let goal = GoalNet::Gmm(GmmGoalNet::new(s, "goal", h, k, init));
            (latent, goal, h + k, 2, VELOCITY_HEADS)
        } else {
            let l = config.latent_dim;
            let latent = LatentNets::Gaussian {
                prior: GaussianNet::new(s, "prior", h, h, l, init),
                posterior: (!deterministic)
                    .then(|| GaussianNet::new(s, "posterior", 2 * h, h, l, init)),
            };
            let goal = GoalNet::Np(NpGoalNet::new(s, "goal", h, l, d, init));
            (latent, goal, h + l, d, d)
        };
        let decoder = BiDecoder::new(
            s,
            "decoder",
            DecoderShape {
                condition: cond,
                hidden: h,
                goal: goal_dim,
                output,
                steps: config.delta,
            },
            config.variant != Variant::NpForwardOnly,
            config.backward_feed,
            init,
        );
        Ok((
            Self {
                config,
                past_encoder,
                future_encoder,
                latent,
                goal,
                decoder,
            },
            store,
        ))
    }

    /// Width of the latent noise matrix the NP loss consumes per sample.
    pub fn noise_width(&self) -> usize {
        match self.config.variant {
            Variant::Np | Variant::NpForwardOnly => self.config.latent_dim,
            _ => 0,
        }
    }

    /// Standard normal noise for `samples` reparameterized draws per window, if the variant uses it.
    pub fn sample_noise<R: Rng + ?Sized>(
        &self,
        batch: usize,
        samples: usize,
        rng: &mut R,
    ) -> Option<Matrix> {
        (self.noise_width() > 0)
            .then(|| standard_normal(batch * samples, self.noise_width(), rng))
    }

    /// Builds the training loss. `noise` is `batch * N x latent_dim` for the
    /// sampling variants (rows grouped by window) and ignored otherwise.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        noise: Option<&Matrix>,
    ) -> Result<LossVars> {
        if batch.past.is_empty() || batch.future.len() != self.config.delta {
            return Err(Error::shape(format!(
                "batch horizon {} does not match model horizon {}",
                batch.future.len(),
                self.config.delta
            )));
        }
        if batch.past[0].cols() != self.config.dim {
            return Err(Error::shape(format!(
                "batch is {}-D, model is {}-D",
                batch.past[0].cols(),
                self.config.dim
            )));
        }
        let past: Vec<Var> = batch.past.iter().map(|m| g.constant(m.clone())).collect();
        let hx = self.past_encoder.forward(g, p, &past);
        match self.config.variant {
            Variant::Gmm => self.loss_gmm(g, p, batch, hx),
            Variant::Deterministic => self.loss_deterministic(g, p, batch, hx),
            Variant::Np | Variant::NpForwardOnly => {
                let noise = noise.ok_or_else(|| Error::shape("sampling loss needs latent noise"))?;
                self.loss_np(g, p, batch, hx, noise)
            }
        }
    }

    fn future_feature(&self, g: &mut Graph, p: &Bound, batch: &Batch) -> Var {
        let fut: Vec<Var> = batch.future.iter().map(|m| g.constant(m.clone())).collect();
        self.future_encoder
            .as_ref()
            .expect("variant has a future encoder")
            .forward(g, p, &fut)
    }

    fn loss_np(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        hx: Var,
        noise: &Matrix,
    ) -> Result<LossVars> {
        let b = batch.len();
        let l = self.config.latent_dim;
        if noise.cols() != l || noise.rows() == 0 || noise.rows() % b != 0 {
            return Err(Error::shape(format!(
                "noise is {}x{}, expected a multiple of {b} rows and {l} columns",
                noise.rows(),
                noise.cols()
            )));
        }
        let n = noise.rows() / b;
        let LatentNets::Gaussian {
            prior,
            posterior: Some(posterior),
        } = &self.latent
        else {
            unreachable!("sampling variant has Gaussian prior and posterior")
        };
        let hy = self.future_feature(g, p, batch);
        let prior_v = prior.forward(g, p, hx);
        let joint = g.concat_cols(&[hx, hy]);
        let post_v = posterior.forward(g, p, joint);
        let kld = kl_gaussian_graph(g, post_v, prior_v);

        let mean = g.repeat_rows(post_v.mean, n);
        let std = g.repeat_rows(post_v.std, n);
        let eps = g.constant(noise.clone());
        let scaled = g.mul(std, eps);
        let z = g.add(mean, scaled);
        let (goal_min, traj_min) = self.best_of_many(g, p, batch, hx, z, n)?;
        let per_window = g.add(goal_min, traj_min);
        let per_window = g.add(per_window, kld);
        let total = g.mean_all(per_window);
        let terms = vec![
            ("goal", g.mean_all(goal_min)),
            ("trajectory", g.mean_all(traj_min)),
            ("kld", g.mean_all(kld)),
        ];
        Ok(LossVars { total, terms })
    }

    fn loss_deterministic(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        hx: Var,
    ) -> Result<LossVars> {
        let LatentNets::Gaussian { prior, .. } = &self.latent else {
            unreachable!("deterministic variant has a Gaussian prior")
        };
        let z = prior.forward(g, p, hx).mean;
        let (goal_min, traj_min) = self.best_of_many(g, p, batch, hx, z, 1)?;
        let per_window = g.add(goal_min, traj_min);
        let total = g.mean_all(per_window);
        let terms = vec![
            ("goal", g.mean_all(goal_min)),
            ("trajectory", g.mean_all(traj_min)),
        ];
        Ok(LossVars { total, terms })
    }

    /// Goal and trajectory L2 errors of `n` samples per window, each minimized
    /// independently over the samples. Returns two `batch x 1` columns.
    fn best_of_many(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        hx: Var,
        z: Var,
        n: usize,
    ) -> Result<(Var, Var)> {
        let GoalNet::Np(goal_net) = &self.goal else {
            unreachable!("sampling variants use the residual goal network")
        };
        let b = batch.len();
        let hx_rep = g.repeat_rows(hx, n);
        let goal = goal_net.forward(g, p, hx_rep, z);
        let cond = g.concat_cols(&[hx_rep, z]);
        let outputs = self.decoder.forward(g, p, cond, goal)?;

        let goal_err = l2_rows(g, goal, &batch.goal().repeat_rows(n));
        let goal_err = g.reshape(goal_err, b, n);
        let goal_min = g.min_cols(goal_err);

        let mut traj = None;
        for (s, &o) in outputs.iter().enumerate() {
            let e = l2_rows(g, o, &batch.future[s].repeat_rows(n));
            traj = Some(match traj {
                None => e,
                Some(acc) => g.add(acc, e),
            });
        }
        let traj = traj.expect("non-empty horizon");
        let traj = g.reshape(traj, b, n);
        let traj_min = g.min_cols(traj);
        Ok((goal_min, traj_min))
    }

    fn loss_gmm(&self, g: &mut Graph, p: &Bound, batch: &Batch, hx: Var) -> Result<LossVars> {
        let LatentNets::Categorical { prior, posterior } = &self.latent else {
            unreachable!("mixture variant has a categorical latent")
        };
        let GoalNet::Gmm(goal_net) = &self.goal else {
            unreachable!("mixture variant has a mixture goal network")
        };
        let b = batch.len();
        let k = self.config.components;
        let dt = self.config.dt;
        let hy = self.future_feature(g, p, batch);
        let log_p = prior.forward(g, p, hx);
        let joint = g.concat_cols(&[hx, hy]);
        let log_q = posterior.forward(g, p, joint);
        let kld = kl_categorical_graph(g, log_q, log_p);

        // endpoint mixture, one row per (window, component)
        let heads = goal_net.forward(g, p, hx);
        let goal_mean = g.reshape(heads.mean, b * k, 2);
        let goal_ls = g.reshape(heads.log_std, b * k, 2);
        let goal_corr = g.reshape(heads.corr, b * k, 1);
        let goal_g = gauss_from_heads(g, goal_mean, goal_ls, goal_corr);

        let target = |g: &mut Graph, m: &Matrix| {
            let rep = m.repeat_rows(k);
            (
                g.constant(rep.slice_cols(0, 1)),
                g.constant(rep.slice_cols(1, 2)),
            )
        };
        let (gx, gy) = target(g, batch.goal());
        let goal_lp = log_prob2(g, &goal_g, gx, gy);
        let goal_nll = mixture_nll(g, goal_lp, log_q, b, k);

        // one decode per component with z = one-hot(k) and the component's goal mean
        let hx_rep = g.repeat_rows(hx, k);
        let onehot = g.constant(Matrix::identity(k).vstack_n(b));
        let cond = g.concat_cols(&[hx_rep, onehot]);
        let outputs = self.decoder.forward(g, p, cond, goal_mean)?;
        let vel: Vec<Gauss2> = outputs
            .iter()
            .map(|&o| {
                let m = g.slice_cols(o, 0, 2);
                let ls = g.slice_cols(o, 2, 4);
                let c = g.slice_cols(o, 4, 5);
                let ls = g.clamp(ls, LOG_STD_RANGE.0, LOG_STD_RANGE.1);
                let c = g.tanh(c);
                let c = g.scale(c, CORR_BOUND);
                gauss_from_heads(g, m, ls, c)
            })
            .collect();

        let delta = self.config.delta;
        let mut fwd_terms = Vec::with_capacity(delta);
        let mut acc: Option<Gauss2> = None;
        for (s, v) in vel.iter().enumerate() {
            let step = scale_gauss(g, v, dt);
            let cur = match acc {
                None => step,
                Some(a) => add_gauss(g, &a, &step),
            };
            let (tx, ty) = target(g, &batch.future[s]);
            let lp = log_prob2(g, &cur, tx, ty);
            fwd_terms.push(mixture_nll(g, lp, log_q, b, k));
            acc = Some(cur);
        }
        let fwd = sum_vars(g, &fwd_terms);

        let anchor = match self.config.backward_anchor {
            BackwardAnchor::PredictedGoal => goal_g,
            BackwardAnchor::GroundTruth => {
                let zero = g.constant(Matrix::zeros(b * k, 1));
                let (mx, my) = target(g, batch.goal());
                Gauss2 {
                    mx,
                    my,
                    sxx: zero,
                    syy: zero,
                    sxy: zero,
                }
            }
        };
        let mut bwd_terms = Vec::with_capacity(delta.saturating_sub(1));
        let mut cur = anchor;
        for s in (0..delta.saturating_sub(1)).rev() {
            let step = scale_gauss(g, &vel[s + 1], dt);
            cur = sub_mean_add_cov(g, &cur, &step);
            let (tx, ty) = target(g, &batch.future[s]);
            let lp = log_prob2(g, &cur, tx, ty);
            bwd_terms.push(mixture_nll(g, lp, log_q, b, k));
        }
        let bwd = if bwd_terms.is_empty() {
            g.constant(Matrix::zeros(b, 1))
        } else {
            sum_vars(g, &bwd_terms)
        };

        let per_window = sum_vars(g, &[goal_nll, fwd, bwd, kld]);
        let total = g.mean_all(per_window);
        let terms = vec![
            ("goal", g.mean_all(goal_nll)),
            ("forward", g.mean_all(fwd)),
            ("backward", g.mean_all(bwd)),
            ("kld", g.mean_all(kld)),
        ];
        Ok(LossVars { total, terms })
    }

    /// Encodes one standardized residual past (`tau x D`).
    pub fn encode(&self, store: &ParamStore, past: &Matrix) -> Result<Feature> {
        self.past_encoder.encode(store, past)
    }

    /// Samples `n` futures for one standardized residual past. The
    /// deterministic variant always returns a single trajectory.
    pub fn forecast<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        past: &Matrix,
        n: usize,
        rng: &mut R,
    ) -> Result<Forecast> {
        if n == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        let h = self.encode(store, past)?;
        match self.config.variant {
            Variant::Gmm => self.forecast_gmm(store, &h, n, rng),
            Variant::Deterministic => {
                let LatentNets::Gaussian { prior, .. } = &self.latent else {
                    unreachable!()
                };
                let z = prior.params(store, &h.0)?.mean;
                self.decode_np(store, &h, &Matrix::row_vector(&z))
            }
            Variant::Np | Variant::NpForwardOnly => {
                let LatentNets::Gaussian { prior, .. } = &self.latent else {
                    unreachable!()
                };
                let pz = prior.params(store, &h.0)?;
                let eps = standard_normal(n, self.config.latent_dim, rng);
                let mut z = eps;
                for r in 0..n {
                    for (j, v) in z.row_mut(r).iter_mut().enumerate() {
                        *v = pz.mean[j] + pz.std[j] * *v;
                    }
                }
                self.decode_np(store, &h, &z)
            }
        }
    }

    fn decode_np(&self, store: &ParamStore, h: &Feature, z: &Matrix) -> Result<Forecast> {
        let GoalNet::Np(goal_net) = &self.goal else {
            unreachable!()
        };
        let d = self.config.dim;
        let mut samples = Vec::with_capacity(z.rows());
        let mut goals = Vec::with_capacity(z.rows());
        let mut start = 0;
        while start < z.rows() {
            let end = (start + DECODE_CHUNK).min(z.rows());
            let rows = end - start;
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let hv = g.constant(h.to_row().repeat_rows(rows));
            let zv = g.constant(z.slice_rows(start, end));
            let goal = goal_net.forward(&mut g, &p, hv, zv);
            let cond = g.concat_cols(&[hv, zv]);
            let outs = self.decoder.forward(&mut g, &p, cond, goal)?;
            for r in 0..rows {
                let mut traj = Matrix::zeros(self.config.delta, d);
                for (s, o) in outs.iter().enumerate() {
                    traj.row_mut(s).copy_from_slice(g.value(*o).row(r));
                }
                samples.push(traj);
                goals.push(g.value(goal).row(r).to_vec());
            }
            start = end;
        }
        Ok(Forecast {
            samples,
            goals,
            mixture: None,
        })
    }

    /// Endpoint and velocity mixtures for one feature under the prior weights.
    pub fn mixture(&self, store: &ParamStore, h: &Feature) -> Result<(GmmStep, GmmSequence)> {
        let (LatentNets::Categorical { prior, .. }, GoalNet::Gmm(goal_net)) =
            (&self.latent, &self.goal)
        else {
            return Err(Error::config("mixture parameters need the gmm variant"));
        };
        let weights = prior.params(store, &h.0)?;
        let goal = goal_net.generate(store, h, &weights)?;
        let velocity = self.velocity_mixture(store, h, &goal, &weights)?;
        Ok((goal, velocity))
    }

    fn velocity_mixture(
        &self,
        store: &ParamStore,
        h: &Feature,
        goal: &GmmStep,
        weights: &CategoricalLatentParams,
    ) -> Result<GmmSequence> {
        let k = self.config.components;
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let hv = g.constant(h.to_row().repeat_rows(k));
        let onehot = g.constant(Matrix::identity(k));
        let cond = g.concat_cols(&[hv, onehot]);
        let means: Vec<f64> = goal.means.iter().flat_map(|m| m.iter().copied()).collect();
        let gm = g.constant(Matrix::from_vec(k, 2, means));
        let outs = self.decoder.forward(&mut g, &p, cond, gm)?;
        let steps = outs
            .iter()
            .map(|&o| velocity_step(g.value(o), weights.probs.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmSequence {
            steps,
            dt: self.config.dt,
        })
    }

    fn forecast_gmm<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        h: &Feature,
        n: usize,
        rng: &mut R,
    ) -> Result<Forecast> {
        let (goal, velocity) = self.mixture(store, h)?;
        let position = integrate_forward(&[0.0, 0.0], &velocity)?;
        let weights = CategoricalLatentParams {
            probs: goal.weights.clone(),
        };
        let draws = sample_categorical(&weights, SampleMode::Test, n, rng)?;
        let mut samples = Vec::with_capacity(n);
        let mut components = Vec::with_capacity(n);
        for d in draws {
            let LatentSample::Categorical(c) = d else {
                unreachable!()
            };
            let mut traj = Matrix::zeros(self.config.delta, 2);
            for (s, step) in position.steps.iter().enumerate() {
                let pt = step.sample_component(c, rng)?;
                traj.row_mut(s).copy_from_slice(&pt);
            }
            samples.push(traj);
            components.push(c);
        }
        Ok(Forecast {
            samples,
            goals: Vec::new(),
            mixture: Some(MixtureForecast {
                goal,
                velocity,
                position,
                components,
            }),
        })
    }
}

/// Velocity mixture from per-component decoder rows (`K x 5`).
pub fn velocity_step(rows: &Matrix, weights: Vec<f64>) -> Result<GmmStep> {
    let k = rows.rows();
    if rows.cols() != VELOCITY_HEADS || weights.len() != k {
        return Err(Error::shape("velocity heads do not match the component count"));
    }
    let mut mean = Vec::with_capacity(2 * k);
    let mut ls = Vec::with_capacity(2 * k);
    let mut corr = Vec::with_capacity(k);
    for r in rows.iter_rows() {
        mean.extend_from_slice(&r[0..2]);
        ls.extend(r[2..4].iter().map(|v| v.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1)));
        corr.push(CORR_BOUND * r[4].tanh());
    }
    let step = mixture_from_heads(weights, &mean, &ls, &corr, GmmSpace::Velocity);
    step.validate()?;
    Ok(step)
}

/// Per-row Euclidean distance to a constant target, `rows x 1`.
fn l2_rows(g: &mut Graph, pred: Var, target: &Matrix) -> Var {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t);
    let sq = g.square(d);
    let s = g.sum_cols(sq);
    g.sqrt(s)
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

fn gauss_from_heads(g: &mut Graph, mean: Var, log_std: Var, corr: Var) -> Gauss2 {
    let mx = g.slice_cols(mean, 0, 1);
    let my = g.slice_cols(mean, 1, 2);
    let std = g.exp(log_std);
    let sx = g.slice_cols(std, 0, 1);
    let sy = g.slice_cols(std, 1, 2);
    let sxx = g.square(sx);
    let syy = g.square(sy);
    let sxsy = g.mul(sx, sy);
    let sxy = g.mul(corr, sxsy);
    Gauss2 {
        mx,
        my,
        sxx,
        syy,
        sxy,
    }
}

/// Displacement over one step: mean `dt * mu`, covariance `dt^2 * Sigma`.
fn scale_gauss(g: &mut Graph, v: &Gauss2, dt: f64) -> Gauss2 {
    let dt2 = dt * dt;
    Gauss2 {
        mx: g.scale(v.mx, dt),
        my: g.scale(v.my, dt),
        sxx: g.scale(v.sxx, dt2),
        syy: g.scale(v.syy, dt2),
        sxy: g.scale(v.sxy, dt2),
    }
}

fn add_gauss(g: &mut Graph, a: &Gauss2, b: &Gauss2) -> Gauss2 {
    Gauss2 {
        mx: g.add(a.mx, b.mx),
        my: g.add(a.my, b.my),
        sxx: g.add(a.sxx, b.sxx),
        syy: g.add(a.syy, b.syy),
        sxy: g.add(a.sxy, b.sxy),
    }
}

fn sub_mean_add_cov(g: &mut Graph, a: &Gauss2, b: &Gauss2) -> Gauss2 {
    Gauss2 {
        mx: g.sub(a.mx, b.mx),
        my: g.sub(a.my, b.my),
        sxx: g.add(a.sxx, b.sxx),
        syy: g.add(a.syy, b.syy),
        sxy: g.add(a.sxy, b.sxy),
    }
}

/// Bivariate log-density per row with the covariance floor applied, `rows x 1`.
fn log_prob2(g: &mut Graph, m: &Gauss2, tx: Var, ty: Var) -> Var {
    let a = g.offset(m.sxx, COV_FLOOR);
    let b = g.offset(m.syy, COV_FLOOR);
    let ab = g.mul(a, b);
    let c2 = g.square(m.sxy);
    let det = g.sub(ab, c2);
    let dx = g.sub(tx, m.mx);
    let dy = g.sub(ty, m.my);
    let dx2 = g.square(dx);
    let dy2 = g.square(dy);
    let dxy = g.mul(dx, dy);
    let t1 = g.mul(b, dx2);
    let t2 = g.mul(m.sxy, dxy);
    let t2 = g.scale(t2, 2.0);
    let t3 = g.mul(a, dy2);
    let num = g.sub(t1, t2);
    let num = g.add(num, t3);
    let quad = g.div(num, det);
    let log_det = g.log(det);
    let s = g.add(log_det, quad);
    let s = g.scale(s, -0.5);
    g.offset(s, -(2.0 * PI).ln())
}

/// `-log sum_k w_k N_k` per window from `(window, component)` rows, `batch x 1`.
fn mixture_nll(g: &mut Graph, comp_lp: Var, log_w: Var, b: usize, k: usize) -> Var {
    let lp = g.reshape(comp_lp, b, k);
    let t = g.add(lp, log_w);
    let lse = g.logsumexp_cols(t);
    g.scale(lse, -1.0)
}

trait StackN {
    fn vstack_n(&self, n: usize) -> Matrix;
}

impl StackN for Matrix {
    fn vstack_n(&self, n: usize) -> Matrix {
        let parts: Vec<&Matrix> = std::iter::repeat_n(self, n).collect();
        Matrix::vstack(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(t: usize) -> TrajectoryWindow {
        let past: Vec<[f64; 2]> = (0..4).map(|i| [i as f64 * 0.5, 0.1 * t as f64]).collect();
        let future: Vec<[f64; 2]> = (0..3)
            .map(|i| [2.0 + i as f64 * 0.5, 0.1 * t as f64 + 0.2 * i as f64])
            .collect();
        TrajectoryWindow {
            scene_id: "s".into(),
            agent_id: "a".into(),
            t: t as i64,
            past: Matrix::from_rows(&past),
            future: Matrix::from_rows(&future),
        }
    }

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            dim: 2,
            hidden: 8,
            latent_dim: 4,
            components: 3,
            delta: 3,
            dt: 0.4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn batch_is_relative_to_current_position() {
        let ws = [window(0), window(1)];
        let refs: Vec<&TrajectoryWindow> = ws.iter().collect();
        let std = Standardizer {
            shift: vec![100.0, -3.0],
            scale: vec![2.0, 0.5],
        };
        let b = Batch::from_windows(&refs, &std).unwrap();
        assert_eq!(b.past.len(), 4);
        assert_eq!(b.past[3], Matrix::zeros(2, 2));
        // future step 0: x 2.0 - 1.5 = 0.5 -> 0.25, y 0.0 -> 0.0
        assert_eq!(b.future[0].row(0), &[0.25, 0.0]);
        assert!((b.goal()[(1, 1)] - 0.4 / 0.5).abs() < 1e-15);
    }

    #[test]
    fn losses_are_finite_for_every_variant() {
        let ws = [window(0), window(1), window(2)];
        let refs: Vec<&TrajectoryWindow> = ws.iter().collect();
        let std = Standardizer::identity(2);
        let batch = Batch::from_windows(&refs, &std).unwrap();
        for v in [Variant::Np, Variant::Gmm, Variant::Deterministic, Variant::NpForwardOnly] {
            let (model, store) = BiTraP::new(tiny(v), &mut Init::uniform(0)).unwrap();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            let noise = model.sample_noise(3, 5, &mut rng);
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let l = model.loss(&mut g, &p, &batch, noise.as_ref()).unwrap();
            let v0 = g.value(l.total)[(0, 0)];
            assert!(v0.is_finite(), "{v:?} loss {v0}");
            let sum: f64 = l.terms.iter().map(|(_, t)| g.value(*t)[(0, 0)]).sum();
            assert!((sum - v0).abs() < 1e-9 * v0.abs().max(1.0));
        }
    }

    #[test]
    fn mixture_variant_requires_planar_data() {
        let cfg = ModelConfig {
            dim: 4,
            ..tiny(Variant::Gmm)
        };
        assert!(matches!(
            BiTraP::new(cfg, &mut Init::Zeros),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_variant_has_no_recognition_network() {
        let (_, store) = BiTraP::new(tiny(Variant::Deterministic), &mut Init::Zeros).unwrap();
        assert!(store
            .iter()
            .all(|(n, _)| !n.starts_with("posterior") && !n.starts_with("future_encoder")));
    }

    #[test]
    fn forecast_shapes() {
        let w = window(0);
        let std = Standardizer::identity(2);
        let rel = relative(&w, &std);
        for v in [Variant::Np, Variant::Gmm, Variant::Deterministic, Variant::NpForwardOnly] {
            let (model, store) = BiTraP::new(tiny(v), &mut Init::uniform(1)).unwrap();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            let f = model.forecast(&store, &rel.past, 7, &mut rng).unwrap();
            let expected = if v == Variant::Deterministic { 1 } else { 7 };
            assert_eq!(f.samples.len(), expected);
            assert!(f.samples.iter().all(|s| s.shape() == (3, 2)));
            assert_eq!(f.mixture.is_some(), v == Variant::Gmm);
        }
    }
}
