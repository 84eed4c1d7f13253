//! Bivariate Gaussian mixtures over velocities and positions, single-integrator
//! propagation in both time directions, and the mixture likelihood losses.
//!
//! Components never mix: component `k` of every step is integrated from
//! component `k` of the velocity sequence, and mixture weights stay fixed
//! over the horizon. Velocity noise is independent across steps, so
//! covariances accumulate as `sum(Sigma_v) * dt^2`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

/// Added to both diagonal entries before factorizing inside the losses.
pub const COV_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmSpace {
    Velocity,
    #[default]
    Position,
}

/// One `K`-component bivariate mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmStep {
    pub weights: Vec<f64>,
    pub means: Vec<Vec2>,
    pub covs: Vec<Mat2>,
    pub space: GmmSpace,
}

/// Mixture per prediction step, `steps[s]` describing time `t + 1 + s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSequence {
    pub steps: Vec<GmmStep>,
    pub dt: f64,
}

/// Which point the backward integration starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardAnchor {
    /// The predicted goal mixture; its final step coincides with the goal term.
    #[default]
    PredictedGoal,
    /// The observed endpoint with zero covariance.
    GroundTruth,
}

/// Lower Cholesky factor of a 2x2 matrix; fails unless symmetric positive definite.
pub fn cholesky2(m: &Mat2) -> Result<Mat2> {
    let sym_tol = 1e-12 * (m[0][1].abs() + m[1][0].abs()).max(1.0);
    if (m[0][1] - m[1][0]).abs() > sym_tol {
        return Err(Error::numerical(format!("covariance not symmetric: {m:?}")));
    }
    let a = m[0][0];
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::numerical(format!("covariance not positive definite: {m:?}")));
    }
    let l00 = a.sqrt();
    let l10 = m[1][0] / l00;
    let rem = m[1][1] - l10 * l10;
    if !(rem > 0.0) || !rem.is_finite() {
        return Err(Error::numerical(format!("covariance not positive definite: {m:?}")));
    }
    Ok([[l00, 0.0], [l10, rem.sqrt()]])
}

/// `log N(y | mean, cov)` for a bivariate Gaussian.
pub fn gaussian_log_prob(mean: &Vec2, cov: &Mat2, y: &Vec2) -> Result<f64> {
    let l = cholesky2(cov)?;
    // solve L u = (y - mean)
    let d0 = y[0] - mean[0];
    let d1 = y[1] - mean[1];
    let u0 = d0 / l[0][0];
    let u1 = (d1 - l[1][0] * u0) / l[1][1];
    let log_det = 2.0 * (l[0][0].ln() + l[1][1].ln());
    Ok(-(2.0 * PI).ln() - 0.5 * log_det - 0.5 * (u0 * u0 + u1 * u1))
}

fn logsumexp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn add(a: &Mat2, b: &Mat2, s: f64) -> Mat2 {
    [
        [a[0][0] + s * b[0][0], a[0][1] + s * b[0][1]],
        [a[1][0] + s * b[1][0], a[1][1] + s * b[1][1]],
    ]
}

/// Covariance from standard deviations and a correlation.
pub fn cov_from_std_corr(sx: f64, sy: f64, rho: f64) -> Mat2 {
    let c = rho * sx * sy;
    [[sx * sx, c], [c, sy * sy]]
}

impl GmmStep {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covs.len() != k {
            return Err(Error::shape(format!(
                "mixture has {} weights, {} means, {} covariances",
                k,
                self.means.len(),
                self.covs.len()
            )));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::numerical(format!(
                "mixture weights are not a distribution (sum {total})"
            )));
        }
        for c in &self.covs {
            cholesky2(c)?;
        }
        Ok(())
    }

    /// Copy with `floor * I` added to every covariance.
    pub fn with_floor(&self, floor: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.covs {
            c[0][0] += floor;
            c[1][1] += floor;
        }
        out
    }

    /// Component-wise affine map `x -> scale * x + shift` (per axis).
    pub fn scaled(&self, scale: &Vec2, shift: &Vec2) -> Self {
        let mut out = self.clone();
        for (m, c) in out.means.iter_mut().zip(out.covs.iter_mut()) {
            *m = [m[0] * scale[0] + shift[0], m[1] * scale[1] + shift[1]];
            for (i, row) in c.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v *= scale[i] * scale[j];
                }
            }
        }
        out
    }

    /// Applies the same permutation to weights, means and covariances.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            weights: order.iter().map(|&i| self.weights[i]).collect(),
            means: order.iter().map(|&i| self.means[i]).collect(),
            covs: order.iter().map(|&i| self.covs[i]).collect(),
            space: self.space,
        }
    }

    /// Draws a point from component `k`.
    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec2> {
        let l = cholesky2(&self.covs[k])?;
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        let m = self.means[k];
        Ok([m[0] + l[0][0] * e0, m[1] + l[1][0] * e0 + l[1][1] * e1])
    }
}

/// `log sum_k pi_k N(y | mu_k, Sigma_k)` evaluated with log-sum-exp.
pub fn gmm_log_prob(step: &GmmStep, y: &Vec2) -> Result<f64> {
    if step.is_empty() || step.means.len() != step.len() || step.covs.len() != step.len() {
        return Err(Error::shape("malformed mixture"));
    }
    let mut terms = Vec::with_capacity(step.len());
    for ((w, m), c) in step.weights.iter().zip(&step.means).zip(&step.covs) {
        terms.push(w.ln() + gaussian_log_prob(m, c, y)?);
    }
    Ok(logsumexp(terms))
}

fn check_space(seq: &GmmSequence, want: GmmSpace, what: &str) -> Result<usize> {
    let first = seq
        .steps
        .first()
        .ok_or_else(|| Error::shape(format!("{what}: empty mixture sequence")))?;
    let k = first.len();
    for s in &seq.steps {
        if s.space != want {
            return Err(Error::shape(format!(
                "{what}: expected {want:?} mixtures, found {:?}",
                s.space
            )));
        }
        if s.len() != k || s.means.len() != k || s.covs.len() != k {
            return Err(Error::shape(format!(
                "{what}: component count changes along the sequence"
            )));
        }
    }
    if !(seq.dt > 0.0) {
        return Err(Error::shape(format!("{what}: dt must be positive")));
    }
    Ok(k)
}

/// Forward single-integrator propagation from the current position.
///
/// Step `n` (1-based) has mean `x_t + dt * sum_{j<=n} mu_v(j)` and covariance
/// `dt^2 * sum_{j<=n} Sigma_v(j)`; weights are copied from the first step.
pub fn integrate_forward(x_t: &Vec2, vel: &GmmSequence) -> Result<GmmSequence> {
    let k = check_space(vel, GmmSpace::Velocity, "integrate_forward")?;
    let dt = vel.dt;
    let weights = vel.steps[0].weights.clone();
    let mut mean = vec![*x_t; k];
    let mut cov = vec![[[0.0; 2]; 2]; k];
    let mut steps = Vec::with_capacity(vel.steps.len());
    for s in &vel.steps {
        for c in 0..k {
            mean[c][0] += dt * s.means[c][0];
            mean[c][1] += dt * s.means[c][1];
            cov[c] = add(&cov[c], &s.covs[c], dt * dt);
        }
        steps.push(GmmStep {
            weights: weights.clone(),
            means: mean.clone(),
            covs: cov.clone(),
            space: GmmSpace::Position,
        });
    }
    Ok(GmmSequence { steps, dt })
}

/// Backward propagation from the goal mixture toward the current position.
///
/// The final step equals `goal`; step `s` subtracts the velocities of steps
/// after it, `mu_G - dt * sum_{j>s} mu_v(j)`, and adds their covariance
/// `Sigma_G + dt^2 * sum_{j>s} Sigma_v(j)`.
pub fn integrate_backward(goal: &GmmStep, vel: &GmmSequence) -> Result<GmmSequence> {
    let k = check_space(vel, GmmSpace::Velocity, "integrate_backward")?;
    if goal.len() != k || goal.means.len() != k || goal.covs.len() != k {
        return Err(Error::shape(format!(
            "goal has {} components, velocities have {k}",
            goal.len()
        )));
    }
    let dt = vel.dt;
    let n = vel.steps.len();
    let mut mean = goal.means.clone();
    let mut cov = goal.covs.clone();
    let mut rev = Vec::with_capacity(n);
    for s in (0..n).rev() {
        rev.push(GmmStep {
            weights: goal.weights.clone(),
            means: mean.clone(),
            covs: cov.clone(),
            space: GmmSpace::Position,
        });
        let v = &vel.steps[s];
        for c in 0..k {
            mean[c][0] -= dt * v.means[c][0];
            mean[c][1] -= dt * v.means[c][1];
            cov[c] = add(&cov[c], &v.covs[c], dt * dt);
        }
    }
    rev.reverse();
    Ok(GmmSequence { steps: rev, dt })
}

fn row2(y: &[Vec2], s: usize) -> Vec2 {
    y[s]
}

/// Negative log-likelihood of waypoints `y[s]` under forward-integrated
/// positions, summed over every prediction step.
pub fn nll_fwd(pos: &GmmSequence, y: &[Vec2]) -> Result<f64> {
    check_space(pos, GmmSpace::Position, "nll_fwd")?;
    if pos.steps.len() != y.len() {
        return Err(Error::shape(format!(
            "nll_fwd: {} mixture steps for {} waypoints",
            pos.steps.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (s, step) in pos.steps.iter().enumerate() {
        total -= gmm_log_prob(step, &row2(y, s))?;
    }
    Ok(total)
}

/// Backward counterpart of [`nll_fwd`]. The final step is the anchor (the
/// goal itself) and is left to the goal term, so the sum stops one short.
pub fn nll_bwd(pos: &GmmSequence, y: &[Vec2]) -> Result<f64> {
    check_space(pos, GmmSpace::Position, "nll_bwd")?;
    if pos.steps.len() != y.len() {
        return Err(Error::shape(format!(
            "nll_bwd: {} mixture steps for {} waypoints",
            pos.steps.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (s, step) in pos.steps.iter().enumerate().take(y.len().saturating_sub(1)) {
        total -= gmm_log_prob(step, &row2(y, s))?;
    }
    Ok(total)
}

/// Terms of the mixture training loss for one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmLoss {
    pub goal: f64,
    pub fwd: f64,
    pub bwd: f64,
    pub kld: f64,
    pub total: f64,
}

/// Goal NLL + forward NLL + backward NLL + KL term, in the residual frame of
/// the current position.
///
/// `goal` holds goal residuals (relative to `origin`) and `future` holds
/// absolute waypoints; every covariance gets [`COV_FLOOR`] before evaluation.
pub fn loss_gmm_total(
    goal: &GmmStep,
    vel: &GmmSequence,
    origin: &Vec2,
    future: &[Vec2],
    kld: f64,
    anchor: BackwardAnchor,
) -> Result<GmmLoss> {
    let residual: Vec<Vec2> = future
        .iter()
        .map(|p| [p[0] - origin[0], p[1] - origin[1]])
        .collect();
    let target_goal = *residual
        .last()
        .ok_or_else(|| Error::shape("loss_gmm_total: empty future"))?;
    let goal_f = goal.with_floor(COV_FLOOR);
    let goal_term = -gmm_log_prob(&goal_f, &target_goal)?;

    let mut fwd_pos = integrate_forward(&[0.0, 0.0], vel)?;
    fwd_pos.steps = fwd_pos.steps.iter().map(|s| s.with_floor(COV_FLOOR)).collect();
    let fwd = nll_fwd(&fwd_pos, &residual)?;

    let anchor_step = match anchor {
        BackwardAnchor::PredictedGoal => goal.clone(),
        BackwardAnchor::GroundTruth => GmmStep {
            weights: goal.weights.clone(),
            means: vec![target_goal; goal.len()],
            covs: vec![[[0.0; 2]; 2]; goal.len()],
            space: GmmSpace::Position,
        },
    };
    let mut bwd_pos = integrate_backward(&anchor_step, vel)?;
    bwd_pos.steps = bwd_pos.steps.iter().map(|s| s.with_floor(COV_FLOOR)).collect();
    let bwd = nll_bwd(&bwd_pos, &residual)?;

    for (name, v) in [("goal", goal_term), ("fwd", fwd), ("bwd", bwd), ("kld", kld)] {
        if !v.is_finite() {
            return Err(Error::numerical(format!("loss term {name} is {v}")));
        }
    }
    Ok(GmmLoss {
        goal: goal_term,
        fwd,
        bwd,
        kld,
        total: goal_term + fwd + bwd + kld,
    })
}
