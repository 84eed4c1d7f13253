//! Recurrent trajectory encoders.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, GruCell, Init, Linear, ParamStore};
use crate::tensor::Matrix;

/// Width of the linear input embedding placed in front of every recurrence.
pub fn embed_dim(hidden: usize) -> usize {
    (hidden / 4).max(1)
}

/// Encoded feature vector (`h_t` or `h_Y`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature(pub Vec<f64>);

impl Feature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_row(&self) -> Matrix {
        Matrix::row_vector(&self.0)
    }
}

/// Linear embedding followed by a GRU; the feature is the last hidden state,
/// starting from a zero state.
#[derive(Clone, Debug)]
pub struct TrajectoryEncoder {
    pub embed: Linear,
    pub gru: GruCell,
}

impl TrajectoryEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        init: &mut Init,
    ) -> Self {
        let e = embed_dim(hidden);
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), input_dim, e, init),
            gru: GruCell::new(store, &format!("{name}.gru"), e, hidden, init),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.embed.input
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden
    }

    /// Runs the recurrence over `steps`, each a `batch x D` node, oldest first.
    pub fn forward(&self, g: &mut Graph, p: &Bound, steps: &[Var]) -> Var {
        let batch = g.value(steps[0]).rows();
        let mut h = g.constant(Matrix::zeros(batch, self.hidden()));
        for &x in steps {
            let e = self.embed.forward(g, p, x);
            h = self.gru.step(g, p, e, h);
        }
        h
    }

    /// Encodes one `len x D` trajectory.
    pub fn encode(&self, params: &ParamStore, x: &Matrix) -> Result<Feature> {
        if x.rows() == 0 {
            return Err(Error::shape("cannot encode an empty trajectory"));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "encoder expects {}-D states, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::numerical("non-finite encoder input"));
        }
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let steps: Vec<Var> = x
            .iter_rows()
            .map(|r| g.constant(Matrix::row_vector(r)))
            .collect();
        let h = self.forward(&mut g, &p, &steps);
        Ok(Feature(g.value(h).data().to_vec()))
    }
}
