//! Text formats for scenes.
//!
//! BEV: one observation per line, `frame agent_id x y`, whitespace separated
//! (the ETH-UCY distribution layout). FPV: newline-delimited JSON records
//! `{"frame": 0, "id": "p1", "box": [x, y, w, h]}`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentTrack, Scene};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn scene_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".to_owned())
}

/// Collects rows per agent, keeping agents in order of first appearance.
#[derive(Default)]
struct Grouper {
    order: Vec<String>,
    rows: HashMap<String, (Vec<i64>, Vec<f64>)>,
}

impl Grouper {
    fn push(&mut self, id: &str, frame: i64, state: &[f64]) -> &mut (Vec<i64>, Vec<f64>) {
        if !self.rows.contains_key(id) {
            self.order.push(id.to_owned());
        }
        let entry = self.rows.entry(id.to_owned()).or_default();
        entry.0.push(frame);
        entry.1.extend_from_slice(state);
        entry
    }

    fn into_tracks(mut self, dim: usize, sort: bool) -> Result<Vec<AgentTrack>> {
        self.order
            .into_iter()
            .map(|id| {
                let (mut frames, mut flat) = self.rows.remove(&id).expect("grouped id");
                if sort {
                    let mut idx: Vec<usize> = (0..frames.len()).collect();
                    idx.sort_by_key(|&i| frames[i]);
                    flat = idx
                        .iter()
                        .flat_map(|&i| flat[i * dim..(i + 1) * dim].to_vec())
                        .collect();
                    frames = idx.iter().map(|&i| frames[i]).collect();
                }
                let n = frames.len();
                AgentTrack::new(id, frames, Matrix::from_vec(n, dim, flat))
            })
            .collect()
    }
}

fn parse_number(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what} `{tok}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{what} `{tok}` is not finite"),
        });
    }
    Ok(v)
}

fn integral(v: f64, line: usize, what: &str) -> Result<i64> {
    if v.fract() != 0.0 || v.abs() > 9.0e15 {
        return Err(Error::Parse {
            line,
            message: format!("{what} {v} is not an integer"),
        });
    }
    Ok(v as i64)
}

/// Canonical text for a numeric agent id: `1.0` and `1` name the same agent.
fn canonical_id(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Parses BEV text.
pub fn parse_bev(text: &str, scene_id: &str, dt: f64) -> Result<Scene> {
    let mut grouper = Grouper::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", toks.len()),
            });
        }
        let frame = integral(parse_number(toks[0], line, "frame")?, line, "frame")?;
        let agent = canonical_id(parse_number(toks[1], line, "agent id")?);
        let x = parse_number(toks[2], line, "x")?;
        let y = parse_number(toks[3], line, "y")?;
        let entry = grouper.push(&agent, frame, &[x, y]);
        let n = entry.0.len();
        if n >= 2 && entry.0[n - 1] <= entry.0[n - 2] {
            return Err(Error::data(format!(
                "line {line}: agent {agent} frame {frame} does not follow frame {}",
                entry.0[n - 2]
            )));
        }
    }
    Scene::new(scene_id, dt, grouper.into_tracks(2, false)?)
}

/// Loads a BEV scene file; the scene id is the file stem.
pub fn load_bev_scene(path: impl AsRef<Path>, dt: f64) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_bev(&text, &scene_id_from_path(path), dt)
}

/// Serializes a 2-D scene in BEV layout, grouped by track.
///
/// Numbers use the shortest representation that parses back to the same `f64`.
pub fn write_bev(scene: &Scene) -> Result<String> {
    let mut out = String::new();
    for track in &scene.tracks {
        if !track.is_empty() && track.dim() != 2 {
            return Err(Error::data("BEV output requires 2-D states"));
        }
        for (f, s) in track.frames.iter().zip(track.states.iter_rows()) {
            writeln!(out, "{f}\t{}\t{:?}\t{:?}", track.agent_id, s[0], s[1])
                .expect("writing to a String");
        }
    }
    Ok(out)
}

/// One FPV bounding-box observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpvRecord {
    pub frame: i64,
    pub id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Parses FPV newline-delimited records into a 4-D scene.
pub fn parse_fpv(text: &str, scene_id: &str, dt: f64) -> Result<Scene> {
    let mut grouper = Grouper::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: FpvRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "non-finite box coordinate".into(),
            });
        }
        if rec.bbox[2] < 0.0 || rec.bbox[3] < 0.0 {
            return Err(Error::data(format!(
                "line {line}: negative box size ({}, {})",
                rec.bbox[2], rec.bbox[3]
            )));
        }
        grouper.push(&rec.id, rec.frame, &rec.bbox);
    }
    let tracks = grouper.into_tracks(4, true)?;
    Scene::new(scene_id, dt, tracks)
}

/// Loads an FPV record file; the scene id is the file stem.
pub fn load_fpv_tracks(path: impl AsRef<Path>, dt: f64) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_fpv(&text, &scene_id_from_path(path), dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines_one_track() {
        let s = parse_bev("0 1 0.0 0.0\n10 1 1.0 0.0\n", "s", 0.4).unwrap();
        assert_eq!(s.tracks.len(), 1);
        assert_eq!(s.tracks[0].len(), 2);
        assert_eq!(s.tracks[0].states.row(1), &[1.0, 0.0]);
        assert_eq!(s.frame_step, 10);
    }

    #[test]
    fn empty_file_has_no_tracks() {
        let s = parse_bev("", "s", 0.4).unwrap();
        assert!(s.tracks.is_empty());
        assert_eq!(s.dim(), None);
    }

    #[test]
    fn malformed_number_names_line() {
        let err = parse_bev("0 1 abc 0.0\n", "s", 0.4).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_bev("0 1 0.0 0.0\n\n10 1 0.0\n", "s", 0.4).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn backwards_frames_are_a_data_error() {
        let err = parse_bev("10 1 0 0\n0 1 1 1\n", "s", 0.4).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn float_agent_ids_are_canonical() {
        let s = parse_bev("0.0 1.0 0 0\n10.0 1 1 1\n", "s", 0.4).unwrap();
        assert_eq!(s.tracks.len(), 1);
        assert_eq!(s.tracks[0].agent_id, "1");
    }

    #[test]
    fn bev_roundtrip() {
        let text = "0 1 0.1 -2.5\n0 2 3.3 4.4\n10 1 0.30000000000000004 1e-7\n10 2 5 6\n";
        let a = parse_bev(text, "s", 0.4).unwrap();
        let b = parse_bev(&write_bev(&a).unwrap(), "s", 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fpv_single_record() {
        let s = parse_fpv(r#"{"frame":0,"id":"p1","box":[10,20,5,8]}"#, "v", 1.0 / 30.0).unwrap();
        assert_eq!(s.tracks.len(), 1);
        assert_eq!(s.tracks[0].states.row(0), &[10.0, 20.0, 5.0, 8.0]);
    }

    #[test]
    fn fpv_negative_height_is_data_error() {
        let err = parse_fpv(r#"{"frame":0,"id":"p1","box":[10,20,5,-1]}"#, "v", 0.1).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn fpv_missing_field_is_parse_error() {
        let err = parse_fpv(r#"{"frame":0,"box":[10,20,5,1]}"#, "v", 0.1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn fpv_interleaved_pedestrians() {
        // expected grouping worked out by hand: p1 -> frames 0,1,2; p2 -> frames 0,1,3
        let text = [
            r#"{"frame":1,"id":"p1","box":[1,0,2,2]}"#,
            r#"{"frame":0,"id":"p2","box":[50,0,2,2]}"#,
            r#"{"frame":0,"id":"p1","box":[0,0,2,2]}"#,
            r#"{"frame":3,"id":"p2","box":[53,0,2,2]}"#,
            r#"{"frame":2,"id":"p1","box":[2,0,2,2]}"#,
            r#"{"frame":1,"id":"p2","box":[51,0,2,2]}"#,
        ]
        .join("\n");
        let s = parse_fpv(&text, "v", 0.1).unwrap();
        assert_eq!(s.tracks.len(), 2);
        let p1 = &s.tracks[0];
        assert_eq!(p1.agent_id, "p1");
        assert_eq!(p1.frames, vec![0, 1, 2]);
        assert_eq!(
            p1.states.iter_rows().map(|r| r[0]).collect::<Vec<_>>(),
            vec![0.0, 1.0, 2.0]
        );
        let p2 = &s.tracks[1];
        assert_eq!(p2.frames, vec![0, 1, 3]);
        assert_eq!(
            p2.states.iter_rows().map(|r| r[0]).collect::<Vec<_>>(),
            vec![50.0, 51.0, 53.0]
        );
        assert_eq!(s.dim(), Some(4));
    }
}
