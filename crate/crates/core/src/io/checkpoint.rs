//! Encoder checkpoints: 8-byte little-endian header length, JSON header,
//! then every parameter as little-endian `f64` in the order the header's
//! `tensors` list gives (always [`Tensor::ALL`] order, row-major).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_framed, write_framed};
use crate::encoder::{EncoderConfig, EncoderParams, Tensor};
use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub tensors: Vec<TensorEntry>,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub epoch: usize,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
}

fn layout(config: &EncoderConfig) -> Vec<TensorEntry> {
    Tensor::ALL
        .iter()
        .map(|t| TensorEntry {
            name: t.name().to_string(),
            shape: t.shape(config),
        })
        .collect()
}

pub fn write_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let params = &checkpoint.params;
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        tensors: layout(params.config()),
        epoch: checkpoint.epoch,
        seed: checkpoint.seed,
        hyperparameters: checkpoint.hyperparameters.clone(),
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_framed(&mut w, &serde_json::to_vec(&header)?).map_err(io_err(path))?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let (header, payload) = read_framed(path)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: header.format_version,
        });
    }
    header.config.validate()?;
    let expected_layout = layout(&header.config);
    if header.tensors != expected_layout {
        let bad = header
            .tensors
            .iter()
            .zip(&expected_layout)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} declared {:?}, config implies {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| {
                format!(
                    "{} tensors declared, config implies {}",
                    header.tensors.len(),
                    expected_layout.len()
                )
            });
        return Err(Error::Shape(bad));
    }
    let declared: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let expected = (declared * 8) as u64;
    if payload.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() as u64,
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Checkpoint {
        params: EncoderParams::from_flat(&header.config, data)?,
        epoch: header.epoch,
        seed: header.seed,
        hyperparameters: header.hyperparameters,
    })
}
