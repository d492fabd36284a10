use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoder::{EncoderParams, TokenModel};
use crate::error::{Error, Result};

/// `1 − SS_res/SS_tot` with `SS_tot` about the target mean; `None` when the
/// targets have zero variance.
pub fn r2_score(pred: &[f64], target: &[f64]) -> Option<f64> {
    if pred.len() != target.len() || target.is_empty() {
        return None;
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return None;
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Report {
    /// `None` for voxels whose targets are constant on the split.
    pub per_voxel: Vec<Option<f64>>,
    /// Mean over voxels with a defined R².
    pub mean: f64,
    pub n_undefined: usize,
}

impl R2Report {
    pub fn from_columns(pred: &Array2<f64>, target: &Array2<f64>) -> Self {
        let per_voxel: Vec<Option<f64>> = (0..pred.ncols())
            .map(|v| {
                let p: Vec<f64> = pred.column(v).to_vec();
                let t: Vec<f64> = target.column(v).to_vec();
                r2_score(&p, &t)
            })
            .collect();
        let defined: Vec<f64> = per_voxel.iter().flatten().copied().collect();
        let mean = if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Self {
            n_undefined: per_voxel.len() - defined.len(),
            per_voxel,
            mean,
        }
    }
}

/// Predictions for every voxel on each row, `rows × voxels`.
pub fn predict_rows<M: TokenModel>(model: &M, dataset: &Dataset, rows: &[usize]) -> Result<Array2<f64>> {
    let voxels: Vec<usize> = (0..dataset.n_voxels()).collect();
    let preds: Vec<_> = rows
        .par_iter()
        .map(|&r| model.predict(dataset.tokens(r), &voxels))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), voxels.len()));
    for (i, p) in preds.into_iter().enumerate() {
        out.row_mut(i).assign(&p);
    }
    Ok(out)
}

pub fn targets_of(dataset: &Dataset, rows: &[usize]) -> Array2<f64> {
    dataset.targets().select(ndarray::Axis(0), rows)
}

pub fn evaluate_r2(params: &EncoderParams, dataset: &Dataset, split: &str) -> Result<R2Report> {
    let rows = dataset.split_rows(split)?;
    if rows.is_empty() {
        return Err(Error::Empty(format!("split `{split}` is empty")));
    }
    let pred = predict_rows(params, dataset, &rows)?;
    Ok(R2Report::from_columns(&pred, &targets_of(dataset, &rows)))
}

/// `R²/NC` per voxel; `None` where either is undefined or `NC ≤ 0`.
pub fn prediction_accuracy(r2: &[Option<f64>], noise_ceiling: &[f64]) -> Vec<Option<f64>> {
    r2.iter()
        .zip(noise_ceiling)
        .map(|(r, &nc)| match r {
            Some(r) if nc > 0.0 => Some(r / nc),
            _ => None,
        })
        .collect()
}
