//! Bi-directional recurrent decoder.
//!
//! A forward GRU runs from the current time toward the horizon, feeding each
//! step an affine map of its own state. A backward GRU starts at the horizon
//! with the goal as input and runs back to the first step. Per-step outputs
//! are `out_f(h_fwd) + out_b(h_bwd)`, where only `out_f` carries a bias.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::{embed_dim, Feature};
use crate::error::{Error, Result};
use crate::nn::{Bound, GruCell, Init, Linear, ParamStore};
use crate::tensor::Matrix;

/// Decoding aborts when any hidden-state entry exceeds this magnitude.
pub const STATE_LIMIT: f64 = 1e6;

/// What the backward recurrence consumes after its first (goal) input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardFeed {
    /// A weight-only linear readout of the previous backward state, in goal space.
    #[default]
    Readout,
    /// The goal again at every step.
    Goal,
    /// Zeros after the first step.
    Zeros,
}

/// Sizes of a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderShape {
    /// Width of the conditioning input `concat(h_t, z)`.
    pub condition: usize,
    pub hidden: usize,
    /// Goal dimension fed to the backward pass.
    pub goal: usize,
    /// Per-step output width.
    pub output: usize,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct BackwardBranch {
    pub init: Linear,
    pub input: Linear,
    pub gru: GruCell,
    pub out: Linear,
    pub readout: Option<Linear>,
    pub feed: BackwardFeed,
}

#[derive(Clone, Debug)]
pub struct BiDecoder {
    pub shape: DecoderShape,
    pub init: Linear,
    pub input: Linear,
    pub gru: GruCell,
    pub out: Linear,
    /// `None` gives the forward-only ablation.
    pub backward: Option<BackwardBranch>,
}

/// Decoder output in the residual frame of the current position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedTrajectory {
    /// `steps x output`
    pub residuals: Matrix,
}

impl DecodedTrajectory {
    pub fn absolute(&self, origin: &[f64]) -> Matrix {
        let mut m = self.residuals.clone();
        for r in 0..m.rows() {
            for (v, o) in m.row_mut(r).iter_mut().zip(origin) {
                *v += o;
            }
        }
        m
    }
}

impl BiDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shape: DecoderShape,
        bidirectional: bool,
        feed: BackwardFeed,
        init: &mut Init,
    ) -> Self {
        let e = embed_dim(shape.hidden);
        let h = shape.hidden;
        let backward = bidirectional.then(|| BackwardBranch {
            init: Linear::new(store, &format!("{name}.bwd.init"), shape.condition, h, init),
            input: Linear::new(store, &format!("{name}.bwd.input"), shape.goal, e, init),
            gru: GruCell::new(store, &format!("{name}.bwd.gru"), e, h, init),
            out: Linear::new_no_bias(store, &format!("{name}.bwd.out"), h, shape.output, init),
            readout: (feed == BackwardFeed::Readout).then(|| {
                Linear::new_no_bias(store, &format!("{name}.bwd.readout"), h, shape.goal, init)
            }),
            feed,
        });
        Self {
            shape,
            init: Linear::new(store, &format!("{name}.fwd.init"), shape.condition, h, init),
            input: Linear::new(store, &format!("{name}.fwd.input"), h, e, init),
            gru: GruCell::new(store, &format!("{name}.fwd.gru"), e, h, init),
            out: Linear::new(store, &format!("{name}.fwd.out"), h, shape.output, init),
            backward,
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.backward.is_some()
    }

    /// Per-step outputs (`batch x output` each), first step first.
    ///
    /// `condition` is `concat(h_t, z)`; `goal` is ignored by the forward-only decoder.
    pub fn forward(&self, g: &mut Graph, p: &Bound, condition: Var, goal: Var) -> Result<Vec<Var>> {
        let steps = self.shape.steps;
        let a = self.init.forward(g, p, condition);
        let mut hf = g.relu(a);
        let mut fwd = Vec::with_capacity(steps);
        for s in 0..steps {
            let x = self.input.forward(g, p, hf);
            hf = self.gru.step(g, p, x, hf);
            check_state(g.value(hf), "forward", s)?;
            fwd.push(hf);
        }
        let mut outputs: Vec<Var> = fwd.iter().map(|&h| self.out.forward(g, p, h)).collect();
        if let Some(b) = &self.backward {
            let a = b.init.forward(g, p, condition);
            let mut hb = g.relu(a);
            let mut loc = goal;
            for s in (0..steps).rev() {
                let x = b.input.forward(g, p, loc);
                hb = b.gru.step(g, p, x, hb);
                check_state(g.value(hb), "backward", s)?;
                let y = b.out.forward(g, p, hb);
                outputs[s] = g.add(outputs[s], y);
                if s > 0 {
                    loc = self.next_backward_input(g, p, b, hb, goal);
                }
            }
        }
        for (s, &o) in outputs.iter().enumerate() {
            if !g.value(o).is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite decoder output at step {}",
                    s + 1
                )));
            }
        }
        Ok(outputs)
    }

    fn next_backward_input(
        &self,
        g: &mut Graph,
        p: &Bound,
        b: &BackwardBranch,
        hb: Var,
        goal: Var,
    ) -> Var {
        match b.feed {
            BackwardFeed::Readout => b
                .readout
                .as_ref()
                .expect("readout feed has a readout map")
                .forward(g, p, hb),
            BackwardFeed::Goal => goal,
            BackwardFeed::Zeros => {
                let rows = g.value(goal).rows();
                g.constant(Matrix::zeros(rows, self.shape.goal))
            }
        }
    }

    /// Decodes one sample from `(h_t, z)` toward a residual goal.
    pub fn decode(
        &self,
        store: &ParamStore,
        h: &Feature,
        z: &[f64],
        goal: &[f64],
    ) -> Result<DecodedTrajectory> {
        if h.0.len() + z.len() != self.shape.condition || goal.len() != self.shape.goal {
            return Err(Error::shape(format!(
                "decoder expects condition {} and goal {}, got {} and {}",
                self.shape.condition,
                self.shape.goal,
                h.0.len() + z.len(),
                goal.len()
            )));
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let mut cond = h.0.clone();
        cond.extend_from_slice(z);
        let c = g.constant(Matrix::row_vector(&cond));
        let gv = g.constant(Matrix::row_vector(goal));
        let outs = self.forward(&mut g, &p, c, gv)?;
        let mut residuals = Matrix::zeros(self.shape.steps, self.shape.output);
        for (s, o) in outs.iter().enumerate() {
            residuals.row_mut(s).copy_from_slice(g.value(*o).row(0));
        }
        Ok(DecodedTrajectory { residuals })
    }
}

fn check_state(m: &Matrix, pass: &str, step: usize) -> Result<()> {
    if !m.is_finite() || m.max_abs() > STATE_LIMIT {
        return Err(Error::numerical(format!(
            "{pass} decoder state exploded at step {}",
            step + 1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(steps: usize) -> DecoderShape {
        DecoderShape {
            condition: 3,
            hidden: 4,
            goal: 2,
            output: 2,
            steps,
        }
    }

    #[test]
    fn zero_parameters_stay_at_origin() {
        let mut store = ParamStore::new();
        let dec = BiDecoder::new(
            &mut store,
            "dec",
            shape(5),
            true,
            BackwardFeed::Readout,
            &mut Init::Zeros,
        );
        let out = dec
            .decode(&store, &Feature(vec![1.0, 2.0]), &[0.5], &[3.0, -1.0])
            .unwrap();
        assert_eq!(out.residuals, Matrix::zeros(5, 2));
        let abs = out.absolute(&[7.0, 8.0]);
        for r in abs.iter_rows() {
            assert_eq!(r, &[7.0, 8.0]);
        }
    }

    #[test]
    fn output_length_matches_horizon() {
        for bidirectional in [true, false] {
            for steps in [1, 3, 12] {
                let mut store = ParamStore::new();
                let dec = BiDecoder::new(
                    &mut store,
                    "dec",
                    shape(steps),
                    bidirectional,
                    BackwardFeed::Readout,
                    &mut Init::uniform(1),
                );
                let out = dec
                    .decode(&store, &Feature(vec![0.1, 0.2]), &[0.3], &[1.0, 1.0])
                    .unwrap();
                assert_eq!(out.residuals.shape(), (steps, 2));
            }
        }
    }

    #[test]
    fn goal_reaches_first_step_only_through_backward_pass() {
        let mut store = ParamStore::new();
        let dec = BiDecoder::new(
            &mut store,
            "dec",
            shape(4),
            true,
            BackwardFeed::Readout,
            &mut Init::uniform(7),
        );
        let h = Feature(vec![0.1, -0.2]);
        let a = dec.decode(&store, &h, &[0.4], &[1.0, 2.0]).unwrap();
        let b = dec.decode(&store, &h, &[0.4], &[1.5, 2.0]).unwrap();
        assert_ne!(a.residuals.row(0), b.residuals.row(0));
        assert_ne!(a.residuals.row(2), b.residuals.row(2));

        // zero backward output map: goal-invariant
        let id = store.id("dec.bwd.out.w").unwrap();
        *store.get_mut(id) = Matrix::zeros(4, 2);
        let a = dec.decode(&store, &h, &[0.4], &[1.0, 2.0]).unwrap();
        let b = dec.decode(&store, &h, &[0.4], &[1.5, 2.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_only_has_no_backward_parameters() {
        let mut store = ParamStore::new();
        let dec = BiDecoder::new(
            &mut store,
            "dec",
            shape(3),
            false,
            BackwardFeed::Readout,
            &mut Init::uniform(0),
        );
        assert!(!dec.is_bidirectional());
        assert!(store.iter().all(|(n, _)| !n.contains("bwd")));
    }

    #[test]
    fn feed_choices_differ() {
        let h = Feature(vec![0.3, -0.7]);
        let mut outs = Vec::new();
        for feed in [BackwardFeed::Readout, BackwardFeed::Goal, BackwardFeed::Zeros] {
            let mut store = ParamStore::new();
            let dec = BiDecoder::new(&mut store, "dec", shape(4), true, feed, &mut Init::uniform(3));
            outs.push(dec.decode(&store, &h, &[0.2], &[1.0, -1.0]).unwrap());
        }
        // the last step sees only the goal input, the earlier steps differ
        assert_ne!(outs[1].residuals.row(0), outs[2].residuals.row(0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        let dec = BiDecoder::new(
            &mut store,
            "dec",
            shape(3),
            true,
            BackwardFeed::Readout,
            &mut Init::Zeros,
        );
        assert!(matches!(
            dec.decode(&store, &Feature(vec![1.0]), &[0.5], &[1.0, 1.0]),
            Err(Error::Shape(_))
        ));
    }
}
