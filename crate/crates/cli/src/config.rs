//! Run configuration: a TOML file, `--set section.key=value` overrides, and
//! the master seed.

use std::path::{Path, PathBuf};

use bitrap::data::SynthConfig;
use bitrap::metrics::EvalConfig;
use bitrap::training::TrainConfig;
use bitrap::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Whitespace-separated `frame agent x y` rows.
    #[default]
    Bev,
    /// JSON lines of bounding boxes.
    Fpv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Seconds per annotated frame step.
    pub dt: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Bev,
            dt: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Futures sampled per window.
    pub samples: usize,
    /// Stop after this many windows (all when absent).
    pub max_windows: Option<usize>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            samples: 20,
            max_windows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// Per-window figures are drawn for the first `max_windows` records.
    pub max_windows: usize,
    /// Heatmap cells per axis.
    pub grid: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            max_windows: 10,
            grid: 60,
            width: 640,
            height: 480,
        }
    }
}

/// Everything a command may read. Scalars come before tables so the struct
/// serializes to valid TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed, copied into `synth.seed` and `train.seed`.
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub predict: PredictConfig,
    pub plot: PlotConfig,
}

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Loads `file` (if any), applies `overrides` in order, then `seed`.
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut root = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let mut cfg: RunConfig = root.try_into().map_err(config_err)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.synth.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.dt > 0.0 && self.data.dt.is_finite()) {
            return Err(config_err("data.dt must be positive"));
        }
        if self.predict.samples == 0 {
            return Err(config_err("predict.samples must be positive"));
        }
        if self.plot.grid < 2 || self.plot.width < 64 || self.plot.height < 64 {
            return Err(config_err("plot.grid must be at least 2 and figures at least 64 px"));
        }
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Writes the effective configuration next to `artifact`.
    pub fn write_beside(&self, artifact: &Path) -> Result<PathBuf> {
        let path = beside(artifact, "config.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

/// `<artifact>.<suffix>` in the artifact's directory.
pub fn beside(artifact: &Path, suffix: &str) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}
