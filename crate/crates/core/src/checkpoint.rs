//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `BTRPCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! the raw little-endian `f64` data of every array listed in the header
//! manifest. Parameters are stored under their own names, optimizer moments
//! under `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::tensor::Matrix;
use crate::training::{Adam, Checkpoint, LossRecord, RngState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"BTRPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Location of one array in the data section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub byte_order: String,
    /// Byte offset from the start of the data section.
    pub offset: u64,
    /// Length in bytes.
    pub len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: Vec<ManifestEntry>,
    train_config: TrainConfig,
    model_config: ModelConfig,
    standardizer: Standardizer,
    epoch: usize,
    rng: RngState,
    optimizer: Adam,
    history: Vec<LossRecord>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays: Vec<(String, &Matrix)> = Vec::new();
    for (name, m) in ck.params.iter() {
        arrays.push((name.to_string(), m));
    }
    for (prefix, moments) in [("adam.m/", &ck.optimizer.m), ("adam.v/", &ck.optimizer.v)] {
        for ((name, _), m) in ck.params.iter().zip(moments.iter()) {
            arrays.push((format!("{prefix}{name}"), m));
        }
    }
    let mut manifest = Vec::with_capacity(arrays.len());
    let mut data = Vec::new();
    for (name, m) in &arrays {
        let offset = data.len() as u64;
        for v in m.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            dtype: "f64".into(),
            byte_order: "little".into(),
            offset,
            len: data.len() as u64 - offset,
        });
    }
    let header = Header {
        manifest,
        train_config: ck.config.clone(),
        model_config: ck.model.clone(),
        standardizer: ck.standardizer.clone(),
        epoch: ck.epoch,
        rng: ck.rng.clone(),
        optimizer: ck.optimizer.clone(),
        history: ck.history.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Parses bytes written by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(err("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let data = &body[hlen..];
    let mut arrays = std::collections::HashMap::new();
    for e in &header.manifest {
        if e.dtype != "f64" || e.byte_order != "little" {
            return Err(err(format!("array {} has unsupported encoding", e.name)));
        }
        let (start, len) = (e.offset as usize, e.len as usize);
        if len != e.shape[0] * e.shape[1] * 8 || start + len > data.len() {
            return Err(err(format!("array {} is out of bounds or mis-sized", e.name)));
        }
        let values = data[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.insert(e.name.clone(), Matrix::from_vec(e.shape[0], e.shape[1], values));
    }
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in header
        .manifest
        .iter()
        .filter(|e| !e.name.starts_with("adam."))
    {
        params.insert(e.name.clone(), arrays[&e.name].clone());
        for (prefix, dst) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
            let key = format!("{prefix}{}", e.name);
            let a = arrays
                .get(&key)
                .ok_or_else(|| err(format!("missing optimizer state {key}")))?;
            dst.push(a.clone());
        }
    }
    let mut optimizer = header.optimizer;
    optimizer.m = m;
    optimizer.v = v;
    let ck = Checkpoint {
        config: header.train_config,
        model: header.model_config,
        params,
        standardizer: header.standardizer,
        epoch: header.epoch,
        rng: header.rng,
        optimizer,
        history: header.history,
    };
    ck.build_model()?;
    Ok(ck)
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

/// Newline-delimited JSON, one [`LossRecord`] per line.
pub fn loss_log_ndjson(records: &[LossRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
