//! Loss assembly, optimization loop, learning-rate schedule and prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::bidecoder::BackwardFeed;
use crate::data::{make_windows, BoxAnchor, Scene, Standardizer, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::gmm::{BackwardAnchor, GmmSequence, GmmStep};
use crate::model::{relative, Batch, BiTraP, ModelConfig, Variant};
use crate::nn::{Init, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    /// Latent draws per window for the best-of-many loss.
    pub n_train_samples: usize,
    /// Mixture components (mixture variant).
    pub components: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub tau: usize,
    pub delta: usize,
    pub dt: f64,
    /// Window start spacing in frames.
    pub stride: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub backward_feed: BackwardFeed,
    pub backward_anchor: BackwardAnchor,
    /// Box convention used when the mixture variant reduces boxes to centers.
    pub box_anchor: BoxAnchor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Np,
            batch_size: 128,
            lr: 0.001,
            lr_decay: 0.999,
            epochs: 50,
            n_train_samples: 20,
            components: 20,
            latent_dim: 32,
            hidden: 256,
            tau: 8,
            delta: 12,
            dt: 0.4,
            stride: 1,
            seed: 0,
            clip_norm: 1.0,
            backward_feed: BackwardFeed::Readout,
            backward_anchor: BackwardAnchor::PredictedGoal,
            box_anchor: BoxAnchor::TopLeft,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("n_train_samples", self.n_train_samples),
            ("hidden", self.hidden),
            ("tau", self.tau),
            ("delta", self.delta),
            ("stride", self.stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::config(format!(
                "lr_decay must be positive, got {}",
                self.lr_decay
            )));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm must be nonnegative"));
        }
        self.model_config(2).validate()
    }

    /// Model configuration for `dim`-D data (the mixture variant always sees 2-D).
    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            dim: if self.variant.is_gmm() { 2 } else { dim },
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            components: self.components,
            delta: self.delta,
            dt: self.dt,
            backward_feed: self.backward_feed,
            backward_anchor: self.backward_anchor,
        }
    }
}

/// `lr * lr_decay^epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr * config.lr_decay.powi(epoch as i32)
}

/// Best-of-many loss of one window from residual predictions: the smallest
/// goal error plus the smallest summed waypoint error (each minimized on its
/// own) plus `kld`.
pub fn loss_np_total(
    window: &TrajectoryWindow,
    goals: &[Vec<f64>],
    trajectories: &[Matrix],
    kld: f64,
) -> Result<f64> {
    if goals.is_empty() || trajectories.is_empty() {
        return Err(Error::config("best-of-many loss needs at least one sample"));
    }
    let origin = window.origin();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(origin)
            .map(|((p, y), o)| (y - o - p).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut goal_min = f64::INFINITY;
    for g in goals {
        if g.len() != window.dim() {
            return Err(Error::shape("goal dimension mismatch"));
        }
        goal_min = goal_min.min(dist(g, window.goal()));
    }
    let mut traj_min = f64::INFINITY;
    for t in trajectories {
        if t.shape() != window.future.shape() {
            return Err(Error::shape(format!(
                "trajectory is {:?}, future is {:?}",
                t.shape(),
                window.future.shape()
            )));
        }
        let e: f64 = (0..t.rows())
            .map(|s| dist(t.row(s), window.future.row(s)))
            .sum();
        traj_min = traj_min.min(e);
    }
    Ok(goal_min + traj_min + kld)
}

/// First and second moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Matrix>,
    #[serde(skip)]
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pj -= lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// One line of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
}

/// Everything needed to resume training or to predict.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub standardizer: Standardizer,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub optimizer: Adam,
    pub history: Vec<LossRecord>,
}

impl Checkpoint {
    pub fn build_model(&self) -> Result<BiTraP> {
        let (model, template) = BiTraP::new(self.model.clone(), &mut Init::Zeros)?;
        if template.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                template.len()
            )));
        }
        for ((a, ma), (b, mb)) in template.iter().zip(self.params.iter()) {
            if a != b || ma.shape() != mb.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {b} {:?} does not match model layout {a} {:?}",
                    mb.shape(),
                    ma.shape()
                )));
            }
        }
        Ok(model)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of a named sub-stream derived from a master seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Windows as the model sees them: box centers for the mixture variant.
pub fn prepare_windows(config: &TrainConfig, windows: &[TrajectoryWindow]) -> Result<Vec<TrajectoryWindow>> {
    let Some(first) = windows.first() else {
        return Err(Error::data("no windows"));
    };
    let dim = first.dim();
    if windows.iter().any(|w| w.dim() != dim) {
        return Err(Error::data("windows disagree on state dimension"));
    }
    if windows
        .iter()
        .any(|w| w.tau() != config.tau || w.delta() != config.delta)
    {
        return Err(Error::config(format!(
            "windows do not match tau={} delta={}",
            config.tau, config.delta
        )));
    }
    if config.variant.is_gmm() {
        match dim {
            2 => Ok(windows.to_vec()),
            4 => Ok(windows.iter().map(|w| w.to_centers(config.box_anchor)).collect()),
            d => Err(Error::config(format!(
                "the mixture variant supports 2-D positions or 4-D boxes, got {d}-D"
            ))),
        }
    } else {
        Ok(windows.to_vec())
    }
}

/// Owns the optimization state between epochs.
pub struct Trainer {
    pub checkpoint: Checkpoint,
    model: BiTraP,
    windows: Vec<TrajectoryWindow>,
    validation: Vec<TrajectoryWindow>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh parameters; the standardizer is fitted on `train`.
    pub fn new(
        config: TrainConfig,
        train: &[TrajectoryWindow],
        validation: &[TrajectoryWindow],
    ) -> Result<Self> {
        config.validate()?;
        let windows = prepare_windows(&config, train)?;
        let validation = if validation.is_empty() {
            Vec::new()
        } else {
            prepare_windows(&config, validation)?
        };
        let standardizer = Standardizer::fit(&windows)?;
        let model_cfg = config.model_config(windows[0].dim());
        let mut init = Init::uniform(derive_seed(config.seed, "init"));
        let (model, params) = BiTraP::new(model_cfg.clone(), &mut init)?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train"));
        let optimizer = Adam::new(&params);
        Ok(Self {
            checkpoint: Checkpoint {
                config,
                model: model_cfg,
                params,
                standardizer,
                epoch: 0,
                rng: RngState::capture(&rng),
                optimizer,
                history: Vec::new(),
            },
            model,
            windows,
            validation,
            rng,
        })
    }

    /// Continues from a checkpoint; the standardizer is kept.
    pub fn resume(
        checkpoint: Checkpoint,
        train: &[TrajectoryWindow],
        validation: &[TrajectoryWindow],
    ) -> Result<Self> {
        let model = checkpoint.build_model()?;
        let windows = prepare_windows(&checkpoint.config, train)?;
        let validation = if validation.is_empty() {
            Vec::new()
        } else {
            prepare_windows(&checkpoint.config, validation)?
        };
        if windows[0].dim() != checkpoint.model.dim {
            return Err(Error::data(format!(
                "checkpoint expects {}-D windows, got {}-D",
                checkpoint.model.dim,
                windows[0].dim()
            )));
        }
        let rng = checkpoint.rng.restore()?;
        Ok(Self {
            checkpoint,
            model,
            windows,
            validation,
            rng,
        })
    }

    pub fn model(&self) -> &BiTraP {
        &self.model
    }

    /// Runs one epoch and returns its records (train, then validation if present).
    pub fn run_epoch(&mut self) -> Result<Vec<LossRecord>> {
        let ck = &mut self.checkpoint;
        let epoch = ck.epoch;
        let lr = lr_at(epoch, &ck.config);
        let mut order: Vec<usize> = (0..self.windows.len()).collect();
        order.shuffle(&mut self.rng);
        let mut weighted = 0.0;
        for (bi, chunk) in order.chunks(ck.config.batch_size).enumerate() {
            let refs: Vec<&TrajectoryWindow> = chunk.iter().map(|&i| &self.windows[i]).collect();
            let batch = Batch::from_windows(&refs, &ck.standardizer)?;
            let noise =
                self.model
                    .sample_noise(batch.len(), ck.config.n_train_samples, &mut self.rng);
            let mut g = Graph::new();
            let p = ck.params.bind(&mut g);
            let loss = self
                .model
                .loss(&mut g, &p, &batch, noise.as_ref())
                .map_err(|e| at_batch(e, epoch, bi))?;
            let value = g.value(loss.total)[(0, 0)];
            if !value.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            weighted += value * batch.len() as f64;
            let mut grads = g.backward(loss.total);
            let mut flat: Vec<Matrix> = ck
                .params
                .ids()
                .map(|id| {
                    grads.take(p[id]).unwrap_or_else(|| {
                        let m = ck.params.get(id);
                        Matrix::zeros(m.rows(), m.cols())
                    })
                })
                .collect();
            clip_gradients(&mut flat, ck.config.clip_norm);
            if flat.iter().any(|m| !m.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient at epoch {epoch}, batch {bi}"
                )));
            }
            ck.optimizer.update(&mut ck.params, &flat, lr);
        }
        let mut records = vec![LossRecord {
            epoch,
            split: "train".into(),
            loss: weighted / self.windows.len() as f64,
            lr,
        }];
        if !self.validation.is_empty() {
            let loss = evaluate_loss(&self.model, ck, &self.validation, epoch)?;
            records.push(LossRecord {
                epoch,
                split: "val".into(),
                loss,
                lr,
            });
        }
        ck.epoch += 1;
        ck.rng = RngState::capture(&self.rng);
        ck.history.extend(records.iter().cloned());
        Ok(records)
    }

    /// Runs until `checkpoint.epoch == target_epochs`.
    pub fn run_until(&mut self, target_epochs: usize) -> Result<()> {
        while self.checkpoint.epoch < target_epochs {
            let rec = self.run_epoch()?;
            log::info!(
                "epoch {} loss {:.6} lr {:.3e}",
                rec[0].epoch,
                rec[0].loss,
                rec[0].lr
            );
        }
        Ok(())
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.checkpoint
    }
}

fn at_batch(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

fn clip_gradients(grads: &mut [Matrix], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|m| m.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for m in grads.iter_mut() {
            for v in m.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Mean loss over `windows` with noise drawn from a stream tied to the epoch,
/// leaving the training stream untouched.
fn evaluate_loss(
    model: &BiTraP,
    ck: &Checkpoint,
    windows: &[TrajectoryWindow],
    epoch: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ck.config.seed, &format!("val/{epoch}")));
    let mut total = 0.0;
    for chunk in windows.chunks(ck.config.batch_size) {
        let refs: Vec<&TrajectoryWindow> = chunk.iter().collect();
        let batch = Batch::from_windows(&refs, &ck.standardizer)?;
        let noise = model.sample_noise(batch.len(), ck.config.n_train_samples, &mut rng);
        let mut g = Graph::new();
        let p = ck.params.bind_frozen(&mut g);
        let loss = model.loss(&mut g, &p, &batch, noise.as_ref())?;
        total += g.value(loss.total)[(0, 0)] * batch.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Windows every `stride` frames, then trains for `config.epochs` epochs.
pub fn train(config: &TrainConfig, scene: &Scene) -> Result<Checkpoint> {
    let set = make_windows(scene, config.tau, config.delta, config.stride)?;
    if set.windows.is_empty() {
        return Err(Error::data(format!(
            "scene {} yields no windows of length {}",
            scene.id,
            config.tau + config.delta
        )));
    }
    let mut trainer = Trainer::new(config.clone(), &set.windows, &[])?;
    trainer.run_until(config.epochs)?;
    Ok(trainer.into_checkpoint())
}

/// Predictive distribution for one window in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub window: String,
    /// Sampled futures, each `delta x D` (2-D centers for the mixture variant on boxes).
    pub samples: Vec<Matrix>,
    /// Goal network outputs per sample (sampling variants).
    pub goals: Vec<Vec<f64>>,
    pub mixture: Option<WorldMixture>,
}

/// Mixture parameters mapped back to world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldMixture {
    pub goal: GmmStep,
    pub position: GmmSequence,
    pub components: Vec<usize>,
}

/// Seed of the prediction stream of one window.
pub fn window_seed(seed: u64, window: &TrajectoryWindow) -> u64 {
    derive_seed(seed, &window.key())
}

/// Samples `n_samples` futures for `window` (deterministic variant: one).
pub fn predict(
    checkpoint: &Checkpoint,
    window: &TrajectoryWindow,
    n_samples: usize,
    seed: u64,
) -> Result<Prediction> {
    let model = checkpoint.build_model()?;
    predict_with(&model, checkpoint, window, n_samples, seed)
}

/// As [`predict`] with a model already built from `checkpoint`.
pub fn predict_with(
    model: &BiTraP,
    checkpoint: &Checkpoint,
    window: &TrajectoryWindow,
    n_samples: usize,
    seed: u64,
) -> Result<Prediction> {
    if checkpoint.epoch == 0 {
        return Err(Error::Checkpoint("checkpoint has not been trained".into()));
    }
    let w = prepare_windows(&checkpoint.config, std::slice::from_ref(window))?
        .pop()
        .expect("one window");
    let std = &checkpoint.standardizer;
    let rel = relative(&w, std);
    let mut rng = ChaCha8Rng::seed_from_u64(window_seed(seed, window));
    let f = model.forecast(&checkpoint.params, &rel.past, n_samples, &mut rng)?;
    let origin = w.origin().to_vec();
    let to_world = |m: &Matrix| {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * std.scale[j] + origin[j];
            }
        }
        out
    };
    let samples = f.samples.iter().map(to_world).collect();
    let goals = f
        .goals
        .iter()
        .map(|g| {
            g.iter()
                .enumerate()
                .map(|(j, v)| v * std.scale[j] + origin[j])
                .collect()
        })
        .collect();
    let mixture = f.mixture.map(|m| {
        let scale = [std.scale[0], std.scale[1]];
        let shift = [origin[0], origin[1]];
        WorldMixture {
            goal: m.goal.scaled(&scale, &shift),
            position: GmmSequence {
                steps: m.position.steps.iter().map(|s| s.scaled(&scale, &shift)).collect(),
                dt: m.position.dt,
            },
            components: m.components,
        }
    });
    Ok(Prediction {
        window: window.key(),
        samples,
        goals,
        mixture,
    })
}
