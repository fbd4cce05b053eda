//! Checkpoints: `manifest.json` describing every tensor plus `tensors.bin`,
//! a raw little-endian f32 blob.
//!
//! The manifest records each tensor's name, shape, byte offset and byte
//! length, the blob's total length and SHA-256, the optimizer step and the
//! full training config. Loading refuses unknown versions and any blob whose
//! length or digest disagrees with the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::OptimizerState;
use super::{TrainConfig, TrainError};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const FORMAT: &str = "relpos-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub optimizer_step: u64,
    pub config: TrainConfig,
    pub blob_length: u64,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamSet<T>,
    pub optimizer: OptimizerState<T>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn integrity(msg: impl Into<String>) -> TrainError {
    TrainError::Integrity(msg.into())
}

pub fn save<T: Scalar>(dir: &Path, ckpt: &Checkpoint<T>) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let groups = [
        (PARAM, ckpt.params.values()),
        (MOMENT1, ckpt.optimizer.m.as_slice()),
        (MOMENT2, ckpt.optimizer.v.as_slice()),
    ];
    for (prefix, values) in groups {
        for (name, t) in ckpt.params.names().iter().zip(values) {
            let offset = blob.len() as u64;
            for &v in t.data() {
                let f = v.to_f32().expect("finite parameter");
                blob.extend_from_slice(&f.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        step: ckpt.step,
        optimizer_step: ckpt.optimizer.step,
        config: ckpt.config.clone(),
        blob_length: blob.len() as u64,
        blob_sha256: hex(&Sha256::digest(&blob)),
        tensors,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| TrainError::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, TrainError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| integrity(format!("manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(TrainError::Version {
            found: format!("{} v{}", manifest.format, manifest.version),
            expected: format!("{FORMAT} v{VERSION}"),
        });
    }
    Ok(manifest)
}

pub fn load<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>, TrainError> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() as u64 != manifest.blob_length {
        return Err(integrity(format!(
            "blob is {} bytes, manifest records {}",
            blob.len(),
            manifest.blob_length
        )));
    }
    if hex(&Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(integrity("blob digest does not match manifest"));
    }
    let mut params = ParamSet::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len() as u64);
        if e.length != 4 * n as u64 || end.is_none() {
            return Err(integrity(format!("entry {} overruns the blob", e.name)));
        }
        let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        if let Some(name) = e.name.strip_prefix(PARAM) {
            params.insert(name, t);
        } else if e.name.starts_with(MOMENT1) {
            m.push(t);
        } else if e.name.starts_with(MOMENT2) {
            v.push(t);
        } else {
            return Err(integrity(format!("unknown entry {}", e.name)));
        }
    }
    if m.len() != params.len() || v.len() != params.len() {
        return Err(integrity("optimizer moments do not cover every parameter"));
    }
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        params,
        optimizer: OptimizerState {
            m,
            v,
            step: manifest.optimizer_step,
        },
    })
}
