//! Synthetic branching walkers with known multi-modal futures.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{AgentTrack, Scene};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Branch headings relative to the walking direction, in degrees
/// (straight, left, right, then diagonals).
pub const DEFAULT_BRANCH_ANGLES_DEG: [f64; 8] = [0.0, 90.0, -90.0, 45.0, -45.0, 135.0, -135.0, 180.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_agents: usize,
    /// Probability of each branch; must sum to one.
    pub branch_probs: Vec<f64>,
    /// Standard deviation of i.i.d. position noise, meters.
    pub noise_std: f64,
    /// Walking speed, meters per second.
    pub speed: f64,
    pub tau: usize,
    pub delta: usize,
    pub dt: f64,
    pub seed: u64,
    /// Start positions are uniform in `[-area, area]^2`.
    pub area: f64,
    /// Overrides [`DEFAULT_BRANCH_ANGLES_DEG`]; one entry per branch.
    pub branch_angles_deg: Option<Vec<f64>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_agents: 300,
            branch_probs: vec![1.0 / 3.0; 3],
            noise_std: 0.05,
            speed: 1.2,
            tau: 8,
            delta: 12,
            dt: 0.4,
            seed: 0,
            area: 10.0,
            branch_angles_deg: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.branch_probs.iter().sum();
        if self.branch_probs.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "branch_probs must sum to 1 (got {total})"
            )));
        }
        if self.branch_probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::config("branch_probs must be non-negative"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        if !(self.dt > 0.0) || !(self.speed >= 0.0) || !(self.area >= 0.0) {
            return Err(Error::config("dt must be positive; speed and area non-negative"));
        }
        if self.tau == 0 || self.delta == 0 {
            return Err(Error::config("tau and delta must be positive"));
        }
        let n_angles = self
            .branch_angles_deg
            .as_ref()
            .map_or(DEFAULT_BRANCH_ANGLES_DEG.len(), Vec::len);
        if self.branch_probs.len() > n_angles {
            return Err(Error::config(format!(
                "{} branches but only {n_angles} branch angles",
                self.branch_probs.len()
            )));
        }
        Ok(())
    }

    pub fn branch_angles(&self) -> Vec<f64> {
        let all = self
            .branch_angles_deg
            .clone()
            .unwrap_or_else(|| DEFAULT_BRANCH_ANGLES_DEG.to_vec());
        all.into_iter()
            .take(self.branch_probs.len())
            .map(f64::to_radians)
            .collect()
    }
}

/// A synthetic scene plus the branch every agent took.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub scene: Scene,
    /// Branch index per track, aligned with `scene.tracks`.
    pub labels: Vec<usize>,
    pub config: SynthConfig,
}

/// Generates walkers that go straight for `tau` frames and then turn onto one
/// of the configured branches for `delta` frames.
///
/// Each agent starts at a uniform position with a uniform heading. Position
/// noise is added to every state, observed and future.
pub fn synth_multimodal_dataset(config: &SynthConfig) -> Result<SynthScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let branches = WeightedIndex::new(&config.branch_probs)
        .map_err(|e| Error::config(format!("branch_probs: {e}")))?;
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::config(format!("noise_std: {e}")))?;
    let angles = config.branch_angles();
    let span = config.tau + config.delta;
    let step = config.speed * config.dt;

    let mut tracks = Vec::with_capacity(config.n_agents);
    let mut labels = Vec::with_capacity(config.n_agents);
    for agent in 0..config.n_agents {
        let sx = rng.random_range(-config.area..=config.area);
        let sy = rng.random_range(-config.area..=config.area);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let branch = branches.sample(&mut rng);
        let (ux, uy) = (heading.cos(), heading.sin());
        let turned = heading + angles[branch];
        let (bx, by) = (turned.cos(), turned.sin());

        let mut states = Matrix::zeros(span, 2);
        let last = (config.tau - 1) as f64;
        let (cx, cy) = (sx + step * last * ux, sy + step * last * uy);
        for k in 0..span {
            let (x, y) = if k < config.tau {
                (sx + step * k as f64 * ux, sy + step * k as f64 * uy)
            } else {
                let j = (k + 1 - config.tau) as f64;
                (cx + step * j * bx, cy + step * j * by)
            };
            states[(k, 0)] = x + noise.sample(&mut rng);
            states[(k, 1)] = y + noise.sample(&mut rng);
        }
        tracks.push(AgentTrack::new(
            agent.to_string(),
            (0..span as i64).collect(),
            states,
        )?);
        labels.push(branch);
    }
    let scene = Scene::new(format!("synth-{}", config.seed), config.dt, tracks)?;
    Ok(SynthScene {
        scene,
        labels,
        config: config.clone(),
    })
}
