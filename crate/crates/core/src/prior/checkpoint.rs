//! Versioned parameter checkpoints: magic, header length, JSON header, then
//! little-endian `f64` parameters in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Architecture, PriorParams};
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"CTPRIOR\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub precision: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: PriorParams,
}

impl Checkpoint {
    pub fn new(params: PriorParams, seed: u64, best_epoch: usize) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                schema_version: CHECKPOINT_VERSION,
                architecture: params.arch,
                precision: "f64le".into(),
                seed,
                best_epoch,
                n_params: params.values.len(),
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a prior checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Format("checkpoint header truncated".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&body[..hlen])?;
        if meta.precision != "f64le" {
            return Err(Error::Format(format!("unsupported precision {}", meta.precision)));
        }
        meta.architecture.validate()?;
        let n = meta.architecture.n_params();
        if meta.n_params != n {
            return Err(Error::Format(format!(
                "header lists {} parameters, architecture needs {n}",
                meta.n_params
            )));
        }
        let payload = &body[hlen..];
        if payload.len() != 8 * n {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                8 * n,
                payload.len()
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Checkpoint {
            params: PriorParams {
                arch: meta.architecture,
                values,
            },
            meta,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&crate::io::read_file(path)?)
}
