//! Scenes, tracks and fixed-length observation/prediction windows.

mod io;
mod standardize;
mod synth;
mod windows;

pub use io::{load_bev_scene, load_fpv_tracks, parse_bev, parse_fpv, write_bev, FpvRecord};
pub use standardize::Standardizer;
pub use synth::{synth_multimodal_dataset, SynthConfig, SynthScene, DEFAULT_BRANCH_ANGLES_DEG};
pub use windows::{make_windows, WindowSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One recording (an ETH-UCY sub-dataset, a video, a synthetic batch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    /// Seconds per frame step.
    pub dt: f64,
    /// Spacing between consecutive annotated frames (10 in the ETH-UCY files).
    pub frame_step: i64,
    pub tracks: Vec<AgentTrack>,
}

/// Positions of one agent, sorted by frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: String,
    pub frames: Vec<i64>,
    /// One row per frame: `(x, y)` meters or `(x, y, w, h)` pixels.
    pub states: Matrix,
}

impl AgentTrack {
    pub fn new(agent_id: impl Into<String>, frames: Vec<i64>, states: Matrix) -> Result<Self> {
        let agent_id = agent_id.into();
        if frames.len() != states.rows() {
            return Err(Error::data(format!(
                "track {agent_id}: {} frames but {} states",
                frames.len(),
                states.rows()
            )));
        }
        if let Some(w) = frames.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::data(format!(
                "track {agent_id}: frames not strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if !frames.is_empty() && !matches!(states.cols(), 2 | 4) {
            return Err(Error::data(format!(
                "track {agent_id}: state dimension {} is not 2 or 4",
                states.cols()
            )));
        }
        Ok(Self {
            agent_id,
            frames,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }
}

impl Scene {
    pub fn new(id: impl Into<String>, dt: f64, tracks: Vec<AgentTrack>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::data(format!("scene dt must be positive, got {dt}")));
        }
        let dims: Vec<usize> = tracks.iter().filter(|t| !t.is_empty()).map(AgentTrack::dim).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::data("tracks in one scene must share a state dimension"));
        }
        let frame_step = infer_frame_step(&tracks);
        Ok(Self {
            id: id.into(),
            dt,
            frame_step,
            tracks,
        })
    }

    /// State dimension, or `None` for a scene without observations.
    pub fn dim(&self) -> Option<usize> {
        self.tracks.iter().find(|t| !t.is_empty()).map(AgentTrack::dim)
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Greatest common divisor of all consecutive frame gaps; 1 when undetermined.
fn infer_frame_step(tracks: &[AgentTrack]) -> i64 {
    let step = tracks
        .iter()
        .flat_map(|t| t.frames.windows(2).map(|w| w[1] - w[0]))
        .fold(0, gcd);
    step.max(1)
}

/// One training/evaluation sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub scene_id: String,
    pub agent_id: String,
    /// Frame index of the current (last observed) state.
    pub t: i64,
    /// `tau x D`, oldest first; the last row is the current state.
    pub past: Matrix,
    /// `delta x D`, the states after `t`.
    pub future: Matrix,
}

impl TrajectoryWindow {
    pub fn tau(&self) -> usize {
        self.past.rows()
    }

    pub fn delta(&self) -> usize {
        self.future.rows()
    }

    pub fn dim(&self) -> usize {
        self.past.cols()
    }

    /// Current state `X_t`.
    pub fn origin(&self) -> &[f64] {
        self.past.row(self.past.rows() - 1)
    }

    /// Endpoint of the future, `G_t = Y_{t+delta}`.
    pub fn goal(&self) -> &[f64] {
        self.future.row(self.future.rows() - 1)
    }

    /// Stable identifier used to derive per-window random streams.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.scene_id, self.agent_id, self.t)
    }

    /// Converts `(x, y, w, h)` boxes to their centers with the given anchor
    /// convention; 2-D windows are returned unchanged.
    pub fn to_centers(&self, anchor: BoxAnchor) -> Self {
        if self.dim() != 4 {
            return self.clone();
        }
        Self {
            past: box_centers(&self.past, anchor),
            future: box_centers(&self.future, anchor),
            ..self.clone()
        }
    }
}

/// Where `(x, y)` sits on an FPV bounding box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxAnchor {
    #[default]
    TopLeft,
    Center,
}

/// Maps `n x 4` boxes to `n x 2` centers.
pub fn box_centers(boxes: &Matrix, anchor: BoxAnchor) -> Matrix {
    let data = boxes
        .iter_rows()
        .flat_map(|r| match anchor {
            BoxAnchor::TopLeft => [r[0] + r[2] / 2.0, r[1] + r[3] / 2.0],
            BoxAnchor::Center => [r[0], r[1]],
        })
        .collect();
    Matrix::from_vec(boxes.rows(), 2, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_step_is_gcd_of_gaps() {
        let t = AgentTrack::new("a", vec![0, 10, 30], Matrix::zeros(3, 2)).unwrap();
        let s = Scene::new("s", 0.4, vec![t]).unwrap();
        assert_eq!(s.frame_step, 10);
    }

    #[test]
    fn track_rejects_unsorted_frames() {
        let err = AgentTrack::new("a", vec![0, 0], Matrix::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn centers_from_top_left_boxes() {
        let b = Matrix::from_rows(&[[10.0, 20.0, 4.0, 8.0]]);
        assert_eq!(box_centers(&b, BoxAnchor::TopLeft).row(0), &[12.0, 24.0]);
        assert_eq!(box_centers(&b, BoxAnchor::Center).row(0), &[10.0, 20.0]);
    }
}
