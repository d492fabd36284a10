use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{top_k_tokens, BaselineToken, Selection};
use crate::dataset::Dataset;
use crate::encoder::{predict_from_kv, project_tokens, EncoderParams};
use crate::error::{Error, Result};
use crate::seed;
use crate::train::{targets_of, R2Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Replace the selected tokens with the baseline.
    Necessity,
    /// Replace every token except the selected ones.
    Sufficiency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPoint {
    pub k: usize,
    /// `R̄²_k / R̄²` over the evaluated rows.
    pub ratio: f64,
    pub r2_patched: f64,
    pub r2_full: f64,
    /// Per-voxel `R²_k / R²`, `None` where undefined.
    pub per_voxel: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCurve {
    pub mode: PatchMode,
    pub selection: Selection,
    pub points: Vec<PatchPoint>,
}

/// Predictions `rows × voxels` after patching. `scores[i]` holds the IG
/// scores (`voxels × s`) of row `rows[i]`. Patched key/value rows are the
/// baseline token's projections, so no token is re-projected.
#[allow(clippy::too_many_arguments)]
pub fn patched_predictions(
    params: &EncoderParams,
    dataset: &Dataset,
    rows: &[usize],
    scores: &[Array2<f64>],
    k: usize,
    mode: PatchMode,
    selection: Selection,
    baseline: &BaselineToken,
    seed_value: u64,
) -> Result<Array2<f64>> {
    if scores.len() != rows.len() {
        return Err(Error::Shape(format!(
            "{} score matrices for {} rows",
            scores.len(),
            rows.len()
        )));
    }
    let s_len = dataset.seq_len();
    if k > s_len {
        return Err(Error::OutOfRange(format!("k = {k} exceeds seq_len {s_len}")));
    }
    let n_vox = dataset.n_voxels();
    let base = baseline.sequence(1);
    let (kb, vb) = project_tokens(params, base.view());
    let preds: Vec<Array1<f64>> = rows
        .par_iter()
        .zip(scores)
        .map(|(&r, sc)| {
            if sc.dim() != (n_vox, s_len) {
                return Err(Error::Shape("IG score matrix has the wrong shape".into()));
            }
            let (kx, vx) = project_tokens(params, dataset.tokens(r));
            let image = dataset.image_ids()[r] as u64;
            let mut rng = seed::rng_for(seed_value, &[seed::PATCH, image, k as u64]);
            let mut out = Array1::zeros(n_vox);
            for v in 0..n_vox {
                let chosen = top_k_tokens(sc.row(v).as_slice().expect("contiguous"), k, selection, &mut rng)?;
                let mut patch = vec![mode == PatchMode::Sufficiency; s_len];
                for j in chosen {
                    patch[j] = mode == PatchMode::Necessity;
                }
                let (mut kp, mut vp) = (kx.clone(), vx.clone());
                for (j, &p) in patch.iter().enumerate() {
                    if p {
                        kp.row_mut(j).assign(&kb.row(0));
                        vp.row_mut(j).assign(&vb.row(0));
                    }
                }
                out[v] = predict_from_kv(params, kp.view(), vp.view(), &[v])[0];
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((rows.len(), n_vox));
    for (i, p) in preds.into_iter().enumerate() {
        out.row_mut(i).assign(&p);
    }
    Ok(out)
}

/// One point of a patch curve: the patched mean R² relative to the
/// unpatched mean R² on the same rows.
#[allow(clippy::too_many_arguments)]
pub fn patch_eval(
    params: &EncoderParams,
    dataset: &Dataset,
    rows: &[usize],
    scores: &[Array2<f64>],
    full_predictions: &Array2<f64>,
    k: usize,
    mode: PatchMode,
    selection: Selection,
    baseline: &BaselineToken,
    seed_value: u64,
) -> Result<PatchPoint> {
    let targets = targets_of(dataset, rows);
    let full = R2Report::from_columns(full_predictions, &targets);
    let patched_pred = if k == 0 && mode == PatchMode::Necessity {
        full_predictions.clone()
    } else {
        patched_predictions(params, dataset, rows, scores, k, mode, selection, baseline, seed_value)?
    };
    let patched = R2Report::from_columns(&patched_pred, &targets);
    if !(full.mean.abs() > 0.0) {
        return Err(Error::GuardedDenominator {
            value: full.mean,
            guard: 0.0,
        });
    }
    let per_voxel = full
        .per_voxel
        .iter()
        .zip(&patched.per_voxel)
        .map(|(f, p)| match (f, p) {
            (Some(f), Some(p)) if *f != 0.0 => Some(p / f),
            _ => None,
        })
        .collect();
    Ok(PatchPoint {
        k,
        ratio: patched.mean / full.mean,
        r2_patched: patched.mean,
        r2_full: full.mean,
        per_voxel,
    })
}
