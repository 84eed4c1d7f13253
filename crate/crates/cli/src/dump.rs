//! Prediction dumps: one self-describing JSON record per window.

use std::path::Path;

use bitrap::data::TrajectoryWindow;
use bitrap::tensor::Matrix;
use bitrap::training::{Prediction, WorldMixture};
use bitrap::{Error, Result};
use serde::{Deserialize, Serialize};

/// Rows of a trajectory, one point per step.
pub type Points = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    /// `scene/agent/frame` of the current state.
    pub window: String,
    /// Seconds per prediction step.
    pub dt: f64,
    pub past: Points,
    pub ground_truth: Points,
    pub samples: Vec<Points>,
    /// Goal estimates per sample; empty for the mixture variant.
    pub goals: Vec<Vec<f64>>,
    /// Mixture parameters (mixture variant only).
    pub mixture: Option<WorldMixture>,
}

pub fn to_points(m: &Matrix) -> Points {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

pub fn to_matrix(p: &Points) -> Result<Matrix> {
    let cols = p.first().map_or(0, Vec::len);
    if p.is_empty() || cols == 0 || p.iter().any(|r| r.len() != cols) {
        return Err(Error::Data("ragged or empty trajectory in dump".into()));
    }
    Ok(Matrix::from_vec(p.len(), cols, p.concat()))
}

impl DumpRecord {
    pub fn new(window: &TrajectoryWindow, dt: f64, prediction: Prediction) -> Self {
        Self {
            window: prediction.window,
            dt,
            past: to_points(&window.past),
            ground_truth: to_points(&window.future),
            samples: prediction.samples.iter().map(to_points).collect(),
            goals: prediction.goals,
            mixture: prediction.mixture,
        }
    }
}

pub fn write_dump(records: &[DumpRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DumpRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{} holds no prediction records", path.display())));
    }
    Ok(records)
}
