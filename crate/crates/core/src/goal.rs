//! Goal generation: endpoint residuals for the sampling variant and an
//! endpoint mixture for the mixture variant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::Feature;
use crate::error::{Error, Result};
use crate::gmm::{cov_from_std_corr, GmmSpace, GmmStep};
use crate::latent::CategoricalLatentParams;
use crate::nn::{Bound, Init, Linear, Mlp3, ParamStore};
use crate::tensor::Matrix;

/// Clamp applied to raw log standard deviations of mixture heads.
pub const LOG_STD_RANGE: (f64, f64) = (-10.0, 10.0);
/// Correlations are `CORR_BOUND * tanh(raw)`.
pub const CORR_BOUND: f64 = 1.0 - 1e-6;

/// Endpoint offset from the current position: the goal is `origin + residual`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalSampleNp(pub Vec<f64>);

impl GoalSampleNp {
    pub fn absolute(&self, origin: &[f64]) -> Vec<f64> {
        origin.iter().zip(&self.0).map(|(o, r)| o + r).collect()
    }
}

/// Residual endpoint from `concat(h_t, z)`.
#[derive(Clone, Debug)]
pub struct NpGoalNet {
    pub mlp: Mlp3,
    pub feature: usize,
    pub latent: usize,
}

impl NpGoalNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feature: usize,
        latent: usize,
        dim: usize,
        init: &mut Init,
    ) -> Self {
        Self {
            mlp: Mlp3::new(store, name, feature + latent, feature, dim, init),
            feature,
            latent,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var, z: Var) -> Var {
        let x = g.concat_cols(&[h, z]);
        self.mlp.forward(g, p, x)
    }

    pub fn generate(&self, store: &ParamStore, h: &Feature, z: &[f64]) -> Result<GoalSampleNp> {
        if h.0.len() != self.feature || z.len() != self.latent {
            return Err(Error::shape(format!(
                "goal network expects feature {} and latent {}, got {} and {}",
                self.feature,
                self.latent,
                h.0.len(),
                z.len()
            )));
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let hv = g.constant(h.to_row());
        let zv = g.constant(Matrix::row_vector(z));
        let out = self.forward(&mut g, &p, hv, zv);
        let v = g.value(out).data().to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("non-finite goal"));
        }
        Ok(GoalSampleNp(v))
    }
}

/// Node handles for the endpoint mixture heads; components are laid out
/// `[x_1, y_1, x_2, y_2, ...]` for means and log-stds.
#[derive(Clone, Copy, Debug)]
pub struct GoalGmmVars {
    /// `batch x 2K`
    pub mean: Var,
    /// `batch x 2K`, clamped
    pub log_std: Var,
    /// `batch x K`, bounded correlation
    pub corr: Var,
}

/// Shared two-layer trunk with one affine head per parameter group.
#[derive(Clone, Debug)]
pub struct GmmGoalNet {
    pub trunk: [Linear; 2],
    pub mean: Linear,
    pub log_std: Linear,
    pub corr: Linear,
    pub k: usize,
}

impl GmmGoalNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feature: usize,
        k: usize,
        init: &mut Init,
    ) -> Self {
        let h2 = (feature / 2).max(1);
        Self {
            trunk: [
                Linear::new(store, &format!("{name}.l1"), feature, feature, init),
                Linear::new(store, &format!("{name}.l2"), feature, h2, init),
            ],
            mean: Linear::new(store, &format!("{name}.mean"), h2, 2 * k, init),
            log_std: Linear::new(store, &format!("{name}.log_std"), h2, 2 * k, init),
            corr: Linear::new(store, &format!("{name}.corr"), h2, k, init),
            k,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> GoalGmmVars {
        let a = self.trunk[0].forward(g, p, h);
        let a = g.relu(a);
        let a = self.trunk[1].forward(g, p, a);
        let a = g.relu(a);
        let mean = self.mean.forward(g, p, a);
        let ls = self.log_std.forward(g, p, a);
        let log_std = g.clamp(ls, LOG_STD_RANGE.0, LOG_STD_RANGE.1);
        let c = self.corr.forward(g, p, a);
        let c = g.tanh(c);
        let corr = g.scale(c, CORR_BOUND);
        GoalGmmVars {
            mean,
            log_std,
            corr,
        }
    }

    /// Endpoint mixture (residual frame) with weights taken from the categorical latent.
    pub fn generate(
        &self,
        store: &ParamStore,
        h: &Feature,
        weights: &CategoricalLatentParams,
    ) -> Result<GmmStep> {
        if weights.probs.len() != self.k {
            return Err(Error::shape(format!(
                "{} mixture weights for {} goal components",
                weights.probs.len(),
                self.k
            )));
        }
        if h.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite feature"));
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let hv = g.constant(h.to_row());
        let v = self.forward(&mut g, &p, hv);
        let step = mixture_from_heads(
            weights.probs.clone(),
            g.value(v.mean).row(0),
            g.value(v.log_std).row(0),
            g.value(v.corr).row(0),
            GmmSpace::Position,
        );
        step.validate()?;
        Ok(step)
    }
}

/// Assembles a bivariate mixture from interleaved head outputs.
pub fn mixture_from_heads(
    weights: Vec<f64>,
    mean: &[f64],
    log_std: &[f64],
    corr: &[f64],
    space: GmmSpace,
) -> GmmStep {
    let k = corr.len();
    let means = (0..k).map(|c| [mean[2 * c], mean[2 * c + 1]]).collect();
    let covs = (0..k)
        .map(|c| cov_from_std_corr(log_std[2 * c].exp(), log_std[2 * c + 1].exp(), corr[c]))
        .collect();
    GmmStep {
        weights,
        means,
        covs,
        space,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::cholesky2;
    use crate::latent::CategoricalNet;

    #[test]
    fn zero_params_goal_is_current_position() {
        let mut store = ParamStore::new();
        let net = NpGoalNet::new(&mut store, "goal", 4, 2, 2, &mut Init::Zeros);
        let goal = net
            .generate(&store, &Feature(vec![1.0, -1.0, 0.5, 2.0]), &[0.3, 0.4])
            .unwrap();
        assert_eq!(goal.0, vec![0.0, 0.0]);
        assert_eq!(goal.absolute(&[3.0, 4.0]), vec![3.0, 4.0]);
    }

    #[test]
    fn hand_evaluated_affine_chain() {
        // feature 1, latent 1, hidden 2 (second layer width 1), output 1
        let mut store = ParamStore::new();
        let net = NpGoalNet::new(&mut store, "goal", 1, 1, 1, &mut Init::Zeros);
        *store.by_name_mut("goal.l1.w").unwrap() = Matrix::from_rows(&[[1.0, -1.0], [2.0, 0.5]]);
        *store.by_name_mut("goal.l1.b").unwrap() = Matrix::from_rows(&[[0.1, 0.2]]);
        *store.by_name_mut("goal.l2.w").unwrap() = Matrix::from_rows(&[[0.5], [-2.0]]);
        *store.by_name_mut("goal.l2.b").unwrap() = Matrix::from_rows(&[[0.3]]);
        *store.by_name_mut("goal.l3.w").unwrap() = Matrix::from_rows(&[[-1.5]]);
        *store.by_name_mut("goal.l3.b").unwrap() = Matrix::from_rows(&[[0.25]]);
        let (h, z) = (0.4, -0.2);
        let a1 = (h * 1.0 + z * 2.0 + 0.1_f64).max(0.0);
        let a2 = (h * -1.0 + z * 0.5 + 0.2_f64).max(0.0);
        let b = (a1 * 0.5 + a2 * -2.0 + 0.3_f64).max(0.0);
        let expected = b * -1.5 + 0.25;
        let goal = net.generate(&store, &Feature(vec![h]), &[z]).unwrap();
        assert!((goal.0[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_params_mixture_is_standard() {
        let mut store = ParamStore::new();
        let prior = CategoricalNet::new(&mut store, "prior", 4, 4, 3, &mut Init::Zeros);
        let net = GmmGoalNet::new(&mut store, "goal", 4, 3, &mut Init::Zeros);
        let h = Feature(vec![0.5; 4]);
        let w = prior.params(&store, &h.0).unwrap();
        let step = net.generate(&store, &h, &w).unwrap();
        for c in 0..3 {
            assert!((step.weights[c] - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(step.means[c], [0.0, 0.0]);
            assert_eq!(step.covs[c], [[1.0, 0.0], [0.0, 1.0]]);
        }
    }

    #[test]
    fn random_parameters_give_spd_covariances() {
        for seed in 0..200 {
            let mut store = ParamStore::new();
            let net = GmmGoalNet::new(&mut store, "goal", 6, 4, &mut Init::uniform(seed));
            let h = Feature((0..6).map(|i| (i as f64 - 2.5) * 3.0).collect());
            let step = net
                .generate(&store, &h, &CategoricalLatentParams::uniform(4))
                .unwrap();
            for cov in &step.covs {
                cholesky2(cov).unwrap();
            }
        }
    }
}
