#![allow(dead_code)]

use bitrap::autodiff::Graph;
use bitrap::data::{make_windows, synth_multimodal_dataset, Standardizer, SynthConfig, TrajectoryWindow};
use bitrap::model::{Batch, BiTraP, ModelConfig, Variant};
use bitrap::nn::{Init, ParamStore};
use bitrap::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient is
/// numerically zero are compared in absolute terms.
pub const FD_REL_FLOOR: f64 = 1e-5;

/// Small synthetic windows (`tau = 3`, `delta = 4`).
pub fn tiny_windows(n: usize, seed: u64) -> Vec<TrajectoryWindow> {
    let cfg = SynthConfig {
        n_agents: n,
        tau: 3,
        delta: 4,
        seed,
        ..SynthConfig::default()
    };
    let scene = synth_multimodal_dataset(&cfg).unwrap().scene;
    make_windows(&scene, 3, 4, 1).unwrap().windows
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        dim: 2,
        hidden: 8,
        latent_dim: 4,
        components: 2,
        delta: 4,
        dt: 0.4,
        ..ModelConfig::default()
    }
}

pub struct Fixture {
    pub model: BiTraP,
    pub store: ParamStore,
    pub batch: Batch,
    pub noise: Option<Matrix>,
}

pub fn fixture(config: ModelConfig, seed: u64) -> Fixture {
    let windows = tiny_windows(3, seed);
    let refs: Vec<&TrajectoryWindow> = windows.iter().collect();
    let std = Standardizer::fit(&windows).unwrap();
    let batch = Batch::from_windows(&refs, &std).unwrap();
    let (model, store) = BiTraP::new(config, &mut Init::uniform(seed + 100)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let noise = model.sample_noise(batch.len(), 3, &mut rng);
    Fixture {
        model,
        store,
        batch,
        noise,
    }
}

pub fn loss_value(f: &Fixture, store: &ParamStore) -> f64 {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let l = f.model.loss(&mut g, &p, &f.batch, f.noise.as_ref()).unwrap();
    g.value(l.total)[(0, 0)]
}

/// Analytic gradient of every parameter, zeros where the graph has none.
pub fn analytic_gradients(f: &Fixture) -> Vec<Matrix> {
    let mut g = Graph::new();
    let p = f.store.bind(&mut g);
    let l = f.model.loss(&mut g, &p, &f.batch, f.noise.as_ref()).unwrap();
    let mut grads = g.backward(l.total);
    f.store
        .ids()
        .map(|id| {
            grads.take(p[id]).unwrap_or_else(|| {
                let m = f.store.get(id);
                Matrix::zeros(m.rows(), m.cols())
            })
        })
        .collect()
}

pub struct GradientReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub entries: usize,
}

/// Central differences against the tape gradient for every scalar parameter.
pub fn gradient_check(f: &Fixture) -> GradientReport {
    let analytic = analytic_gradients(f);
    let mut store = f.store.clone();
    let mut report = GradientReport {
        max_rel_err: 0.0,
        worst: String::new(),
        entries: 0,
    };
    let ids: Vec<_> = f.store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let len = store.get(id).len();
        for j in 0..len {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + FD_EPS;
            let up = loss_value(f, &store);
            store.get_mut(id).data_mut()[j] = orig - FD_EPS;
            let down = loss_value(f, &store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[pi].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_REL_FLOOR);
            report.entries += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!(
                    "{}[{j}] analytic {a:.6e} numeric {numeric:.6e}",
                    store.name(id)
                );
            }
        }
    }
    report
}
