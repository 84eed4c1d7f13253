use super::{Scene, TrajectoryWindow};
use crate::error::{Error, Result};

/// Output of [`make_windows`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<TrajectoryWindow>,
    /// Tracks that produced no window (too short, or only short gap-free runs).
    pub skipped_tracks: usize,
}

/// Slides a `tau + delta` window along every gap-free run of every track.
///
/// A run is a maximal stretch of frames spaced exactly `scene.frame_step`
/// apart. Start offsets within a run step by `stride`.
pub fn make_windows(scene: &Scene, tau: usize, delta: usize, stride: usize) -> Result<WindowSet> {
    if tau == 0 || delta == 0 || stride == 0 {
        return Err(Error::config(format!(
            "window sizes must be positive (tau={tau}, delta={delta}, stride={stride})"
        )));
    }
    let span = tau + delta;
    let mut out = WindowSet::default();
    for track in &scene.tracks {
        let before = out.windows.len();
        let n = track.len();
        let mut run_start = 0;
        while run_start < n {
            let mut run_end = run_start + 1;
            while run_end < n && track.frames[run_end] - track.frames[run_end - 1] == scene.frame_step
            {
                run_end += 1;
            }
            let mut s = run_start;
            while s + span <= run_end {
                out.windows.push(TrajectoryWindow {
                    scene_id: scene.id.clone(),
                    agent_id: track.agent_id.clone(),
                    t: track.frames[s + tau - 1],
                    past: track.states.slice_rows(s, s + tau),
                    future: track.states.slice_rows(s + tau, s + span),
                });
                s += stride;
            }
            run_start = run_end;
        }
        if out.windows.len() == before {
            out.skipped_tracks += 1;
        }
    }
    Ok(out)
}
