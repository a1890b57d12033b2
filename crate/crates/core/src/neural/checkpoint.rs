//! Versioned binary checkpoints.
//!
//! Layout: magic `EQSCKPT\0`, format version (u32 LE), header length (u32 LE),
//! a JSON header (config, epoch, test loss, tensor table, optional optimizer
//! and training state), then every parameter tensor as little-endian `f32` in
//! declaration order, followed by the Adam first and second moments when the
//! header says they are present.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::config::ModelConfig;
use super::params::ModelParams;
use super::train::TrainRecord;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EQSCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

/// Loop state needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub history: Vec<TrainRecord>,
    pub initial_test_loss: f64,
    pub best_test_loss: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    test_loss: f64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    state: Option<TrainState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub epoch: usize,
    pub test_loss: f64,
    pub optimizer: Option<Adam<f32>>,
    pub state: Option<TrainState>,
}

fn write_tensors(buf: &mut Vec<u8>, p: &ModelParams<f32>) {
    for (_, t) in p.tensors() {
        for x in t {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn read_tensors(bytes: &mut &[u8], p: &mut ModelParams<f32>) -> Result<()> {
    for t in p.tensors_mut() {
        let need = t.len() * 4;
        if bytes.len() < need {
            return Err(Error::Checkpoint("truncated tensor data".into()));
        }
        let (head, rest) = bytes.split_at(need);
        for (x, chunk) in t.iter_mut().zip(head.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        *bytes = rest;
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.params.config,
            epoch: self.epoch,
            test_loss: self.test_loss,
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, t)| TensorEntry { name, len: t.len() })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            state: self.state.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + self.params.param_count() * 12);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        write_tensors(&mut buf, &self.params);
        if let Some(opt) = &self.optimizer {
            write_tensors(&mut buf, &opt.m);
            write_tensors(&mut buf, &opt.v);
        }
        Ok(buf)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut fixed = [0u8; 16];
        bytes
            .read_exact(&mut fixed)
            .map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &fixed[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(fixed[12..16].try_into().expect("4 bytes")) as usize;
        if bytes.len() < header_len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let (json, mut rest) = bytes.split_at(header_len);
        let header: Header = serde_json::from_slice(json)?;
        let mut params = ModelParams::<f32>::init(&header.config)?;
        let expected: Vec<TensorEntry> = params
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorEntry { name, len: t.len() })
            .collect();
        if expected != header.tensors {
            return Err(Error::Checkpoint("tensor table does not match config".into()));
        }
        read_tensors(&mut rest, &mut params)?;
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut opt = Adam::new(h.config, &params);
                opt.step = h.step;
                read_tensors(&mut rest, &mut opt.m)?;
                read_tensors(&mut rest, &mut opt.v)?;
                Some(opt)
            }
            None => None,
        };
        if !rest.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            params,
            epoch: header.epoch,
            test_loss: header.test_loss,
            optimizer,
            state: header.state,
        })
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
