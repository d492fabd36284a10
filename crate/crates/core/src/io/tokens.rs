//! Token tensor files.
//!
//! Layout: an 8-byte little-endian `u64` header length `L`, then `L` bytes of
//! UTF-8 JSON header, then the payload: `n_images · seq_len · token_dim`
//! IEEE-754 `f32` values, little-endian, image-major row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenHeader {
    pub n_images: usize,
    pub seq_len: usize,
    pub token_dim: usize,
    pub dtype: String,
    pub layout: String,
    pub endianness: String,
    /// Image id of each slab; defaults to `0..n_images` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ids: Option<Vec<u32>>,
}

impl TokenHeader {
    fn payload_bytes(&self) -> u64 {
        (self.n_images * self.seq_len * self.token_dim * 4) as u64
    }

    fn check(&self) -> Result<()> {
        if self.dtype != "f32" {
            return Err(Error::Format(format!("unknown dtype `{}`", self.dtype)));
        }
        if self.layout != "row-major" {
            return Err(Error::Format(format!("unknown layout `{}`", self.layout)));
        }
        if self.endianness != "little" {
            return Err(Error::Format(format!("unknown endianness `{}`", self.endianness)));
        }
        if self.n_images == 0 || self.seq_len == 0 || self.token_dim == 0 {
            return Err(Error::Format("header counts must be positive".into()));
        }
        if let Some(ids) = &self.image_ids {
            if ids.len() != self.n_images {
                return Err(Error::Format(format!(
                    "{} image ids for {} images",
                    ids.len(),
                    self.n_images
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub image_ids: Vec<u32>,
    /// `n_images × seq_len × token_dim`.
    pub values: Array3<f32>,
}

impl TokenTensor {
    pub fn from_f64(image_ids: Vec<u32>, values: &Array3<f64>) -> Result<Self> {
        if image_ids.len() != values.shape()[0] {
            return Err(Error::Shape(format!(
                "{} image ids for {} images",
                image_ids.len(),
                values.shape()[0]
            )));
        }
        Ok(Self {
            image_ids,
            values: values.mapv(|v| v as f32),
        })
    }

    pub fn to_f64(&self) -> Array3<f64> {
        self.values.mapv(f64::from)
    }

    pub fn header(&self) -> TokenHeader {
        let s = self.values.shape();
        TokenHeader {
            n_images: s[0],
            seq_len: s[1],
            token_dim: s[2],
            dtype: "f32".into(),
            layout: "row-major".into(),
            endianness: "little".into(),
            image_ids: Some(self.image_ids.clone()),
        }
    }
}

pub(crate) fn write_framed(w: &mut impl Write, header: &[u8]) -> std::io::Result<()> {
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)
}

/// Reads the length-prefixed JSON header; returns it with the remaining payload.
pub(crate) fn read_framed(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < 8 {
        return Err(Error::Format(format!("{}: missing header length", path.display())));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + len {
        return Err(Error::Format(format!("{}: truncated header", path.display())));
    }
    let payload = bytes.split_off(8 + len);
    bytes.drain(..8);
    Ok((bytes, payload))
}

pub fn write_tokens(path: impl AsRef<Path>, tensor: &TokenTensor) -> Result<()> {
    let path = path.as_ref();
    if tensor.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("token tensor".into()));
    }
    let header = serde_json::to_vec(&tensor.header())?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_framed(&mut w, &header).map_err(io_err(path))?;
    for v in tensor.values.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<TokenTensor> {
    let path = path.as_ref();
    let (header, payload) = read_framed(path)?;
    let header: TokenHeader = serde_json::from_slice(&header)?;
    header.check()?;
    let expected = header.payload_bytes();
    if payload.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() as u64,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let values = Array3::from_shape_vec((header.n_images, header.seq_len, header.token_dim), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let image_ids = header
        .image_ids
        .unwrap_or_else(|| (0..header.n_images as u32).collect());
    Ok(TokenTensor { image_ids, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor() -> TokenTensor {
        let values = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 100 + j * 10 + k) as f32 + 0.5);
        TokenTensor {
            image_ids: vec![7, 9],
            values,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tokens(&p, &tensor()).unwrap();
        assert_eq!(read_tokens(&p).unwrap(), tensor());
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_tokens(&p, &tensor()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        match read_tokens(&p) {
            Err(Error::PayloadSize {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 96);
                assert_eq!(actual, 92);
            }
            other => panic!("expected size error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let mut h = tensor().header();
        h.dtype = "f16".into();
        let mut bytes = Vec::new();
        write_framed(&mut bytes, &serde_json::to_vec(&h).unwrap()).unwrap();
        bytes.extend(std::iter::repeat(0u8).take(96));
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_tokens(&p), Err(Error::Format(_))));
    }
}
