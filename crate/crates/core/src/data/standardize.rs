use serde::{Deserialize, Serialize};

use super::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const SCALE_FLOOR: f64 = 1e-6;

/// Per-dimension affine normalization `(x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation of every past and future state.
    pub fn fit(windows: &[TrajectoryWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::data("cannot fit a standardizer on zero windows"))?;
        let dim = first.dim();
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        for w in windows {
            if w.dim() != dim {
                return Err(Error::shape("windows disagree on state dimension"));
            }
            for r in w.past.iter_rows().chain(w.future.iter_rows()) {
                for (s, v) in sum.iter_mut().zip(r) {
                    *s += v;
                }
                n += 1;
            }
        }
        let shift: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; dim];
        for w in windows {
            for r in w.past.iter_rows().chain(w.future.iter_rows()) {
                for ((q, v), m) in sq.iter_mut().zip(r).zip(&shift) {
                    *q += (v - m) * (v - m);
                }
            }
        }
        let scale = sq
            .iter()
            .map(|q| (q / n as f64).sqrt().max(SCALE_FLOOR))
            .collect();
        Ok(Self { shift, scale })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply_states(&self, states: &Matrix) -> Matrix {
        let mut out = states.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.shift[j]) / self.scale[j];
            }
        }
        out
    }

    pub fn invert_states(&self, states: &Matrix) -> Matrix {
        let mut out = states.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.scale[j] + self.shift[j];
            }
        }
        out
    }

    pub fn apply(&self, w: &TrajectoryWindow) -> TrajectoryWindow {
        TrajectoryWindow {
            past: self.apply_states(&w.past),
            future: self.apply_states(&w.future),
            ..w.clone()
        }
    }

    pub fn invert(&self, w: &TrajectoryWindow) -> TrajectoryWindow {
        TrajectoryWindow {
            past: self.invert_states(&w.past),
            future: self.invert_states(&w.future),
            ..w.clone()
        }
    }

    /// Restricts to the first two dimensions (box centers share x/y statistics).
    pub fn planar(&self) -> Self {
        Self {
            shift: self.shift.iter().take(2).copied().collect(),
            scale: self.scale.iter().take(2).copied().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(past: &[[f64; 2]], future: &[[f64; 2]]) -> TrajectoryWindow {
        TrajectoryWindow {
            scene_id: "s".into(),
            agent_id: "a".into(),
            t: 0,
            past: Matrix::from_rows(past),
            future: Matrix::from_rows(future),
        }
    }

    #[test]
    fn constant_window_floors_scale() {
        let w = window(&[[2.0, 3.0]; 3], &[[2.0, 3.0]; 2]);
        let s = Standardizer::fit(std::slice::from_ref(&w)).unwrap();
        assert_eq!(s.scale, vec![1e-6, 1e-6]);
        let z = s.apply(&w);
        assert!(z.past.data().iter().chain(z.future.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_two_window_statistics() {
        // x values: 0,2 | 4,6 -> mean 3, var (9+1+1+9)/4 = 5
        // y values: 1,1 | 1,5 -> mean 2, var (1+1+1+9)/4 = 3
        let a = window(&[[0.0, 1.0]], &[[2.0, 1.0]]);
        let b = window(&[[4.0, 1.0]], &[[6.0, 5.0]]);
        let s = Standardizer::fit(&[a, b]).unwrap();
        assert_eq!(s.shift, vec![3.0, 2.0]);
        assert!((s.scale[0] - 5f64.sqrt()).abs() < 1e-15);
        assert!((s.scale[1] - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(Standardizer::fit(&[]).is_err());
    }

    #[test]
    fn round_trip() {
        let w = window(&[[0.3, -11.0], [1.7, 2.5]], &[[123.4, 0.001]]);
        let other = window(&[[5.0, 5.0], [6.0, 9.0]], &[[-7.0, 3.0]]);
        let s = Standardizer::fit(&[w.clone(), other]).unwrap();
        let back = s.invert(&s.apply(&w));
        for (a, b) in back.past.data().iter().zip(w.past.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in back.future.data().iter().zip(w.future.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
