//! Response tables: one row per `(image, voxel, rep)` trial, stored as
//! JSON-lines (`.jsonl`) or CSV (`.csv`).

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub image_id: u32,
    pub voxel_id: u32,
    pub rep_index: u32,
    pub response: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResponseTable {
    rows: Vec<ResponseRow>,
}

impl ResponseTable {
    pub fn new(rows: Vec<ResponseRow>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(rows.len());
        for r in &rows {
            if !r.response.is_finite() {
                return Err(Error::NonFinite(format!(
                    "response (image {}, voxel {}, rep {})",
                    r.image_id, r.voxel_id, r.rep_index
                )));
            }
            if !seen.insert((r.image_id, r.voxel_id, r.rep_index)) {
                return Err(Error::Format(format!(
                    "duplicate response key (image {}, voxel {}, rep {})",
                    r.image_id, r.voxel_id, r.rep_index
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ResponseRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorted distinct voxel ids.
    pub fn voxel_ids(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.rows.iter().map(|r| r.voxel_id).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn image_ids(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.rows.iter().map(|r| r.image_id).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Repeated responses grouped `[voxel][image] -> reps` (ordered by rep index).
    pub fn grouped(&self) -> BTreeMap<u32, BTreeMap<u32, Vec<(u32, f64)>>> {
        let mut out: BTreeMap<u32, BTreeMap<u32, Vec<(u32, f64)>>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.voxel_id)
                .or_default()
                .entry(r.image_id)
                .or_default()
                .push((r.rep_index, r.response));
        }
        for images in out.values_mut() {
            for reps in images.values_mut() {
                reps.sort_by_key(|(k, _)| *k);
            }
        }
        out
    }

    /// Rep-averaged responses, `images × voxels`, in the given id orders.
    pub fn mean_matrix(&self, image_ids: &[u32], voxel_ids: &[u32]) -> Result<Array2<f64>> {
        let img_pos: BTreeMap<u32, usize> =
            image_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let vox_pos: BTreeMap<u32, usize> =
            voxel_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut sum = Array2::<f64>::zeros((image_ids.len(), voxel_ids.len()));
        let mut count = Array2::<usize>::zeros((image_ids.len(), voxel_ids.len()));
        // accumulate in rep order so the mean is independent of row order
        let grouped = self.grouped();
        for (voxel, images) in &grouped {
            let Some(&v) = vox_pos.get(voxel) else { continue };
            for (image, reps) in images {
                let Some(&i) = img_pos.get(image) else { continue };
                for (_, r) in reps {
                    sum[(i, v)] += r;
                    count[(i, v)] += 1;
                }
            }
        }
        for ((i, v), c) in count.indexed_iter() {
            if *c == 0 {
                return Err(Error::InsufficientData(format!(
                    "no responses for image {} voxel {}",
                    image_ids[i], voxel_ids[v]
                )));
            }
            sum[(i, v)] /= *c as f64;
        }
        Ok(sum)
    }
}

pub fn write_responses(path: impl AsRef<Path>, table: &ResponseTable) -> Result<()> {
    let path = path.as_ref();
    match extension(path) {
        Some("csv") => {
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
            for r in table.rows() {
                w.serialize(r).map_err(|e| csv_err(path, e))?;
            }
            w.flush().map_err(io_err(path))
        }
        _ => {
            let file = File::create(path).map_err(io_err(path))?;
            let mut w = BufWriter::new(file);
            for r in table.rows() {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n").map_err(io_err(path))?;
            }
            w.flush().map_err(io_err(path))
        }
    }
}

pub fn read_responses(path: impl AsRef<Path>) -> Result<ResponseTable> {
    let path = path.as_ref();
    let rows = match extension(path) {
        Some("csv") => {
            let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
            r.deserialize()
                .collect::<std::result::Result<Vec<ResponseRow>, _>>()
                .map_err(|e| csv_err(path, e))?
        }
        _ => {
            let file = File::open(path).map_err(io_err(path))?;
            let mut rows = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                rows.push(serde_json::from_str(&line)?);
            }
            rows
        }
    };
    ResponseTable::new(rows)
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}
