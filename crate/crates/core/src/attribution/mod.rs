//! Integrated-gradients token attribution against a mean-token baseline,
//! top-k token selection, and mean-token patching.

mod patch;

pub use patch::{patch_eval, patched_predictions, PatchCurve, PatchMode, PatchPoint};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineToken {
    pub vector: Array1<f64>,
    pub provenance: String,
}

impl BaselineToken {
    /// The baseline token repeated at every one of `seq_len` positions.
    pub fn sequence(&self, seq_len: usize) -> Array2<f64> {
        let mut out = Array2::zeros((seq_len, self.vector.len()));
        for mut row in out.rows_mut() {
            row.assign(&self.vector);
        }
        out
    }
}

/// Arithmetic mean over every token of every image.
pub fn mean_baseline<'a>(
    images: impl IntoIterator<Item = ArrayView2<'a, f64>>,
    provenance: impl Into<String>,
) -> Result<BaselineToken> {
    let mut sum: Option<Array1<f64>> = None;
    let mut n = 0usize;
    for x in images {
        let s = x.sum_axis(Axis(0));
        match sum.as_mut() {
            Some(acc) => {
                if acc.len() != s.len() {
                    return Err(Error::Shape("token widths differ across images".into()));
                }
                *acc += &s;
            }
            None => sum = Some(s),
        }
        n += x.nrows();
    }
    match sum {
        Some(s) if n > 0 => Ok(BaselineToken {
            vector: s / n as f64,
            provenance: provenance.into(),
        }),
        _ => Err(Error::Empty("mean baseline over an empty corpus".into())),
    }
}

/// Incremental mean token, `μ ← μ + (t − μ)/n`.
#[derive(Debug, Clone, Default)]
pub struct StreamingMean {
    mean: Option<Array1<f64>>,
    count: usize,
}

impl StreamingMean {
    pub fn push(&mut self, token: ArrayView1<f64>) -> Result<()> {
        self.count += 1;
        match self.mean.as_mut() {
            None => self.mean = Some(token.to_owned()),
            Some(m) => {
                if m.len() != token.len() {
                    return Err(Error::Shape("token widths differ".into()));
                }
                let n = self.count as f64;
                m.zip_mut_with(&token, |a, &t| *a += (t - *a) / n);
            }
        }
        Ok(())
    }

    pub fn push_all(&mut self, tokens: ArrayView2<f64>) -> Result<()> {
        tokens.rows().into_iter().try_for_each(|r| self.push(r))
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self, provenance: impl Into<String>) -> Result<BaselineToken> {
        self.mean
            .map(|vector| BaselineToken {
                vector,
                provenance: provenance.into(),
            })
            .ok_or_else(|| Error::Empty("mean baseline over an empty corpus".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub voxel_id: u32,
    pub image_id: u32,
    pub scores: Vec<f64>,
    /// `|Σ scores − (ĥ(x) − ĥ(baseline sequence))|`.
    pub completeness_gap: f64,
    pub prediction: f64,
    pub baseline_prediction: f64,
    pub n_steps: usize,
}

/// IG scores for several voxels on one image.
pub fn integrated_gradients<M: TokenModel + ?Sized>(
    model: &M,
    image_id: u32,
    tokens: ArrayView2<f64>,
    voxel_ids: &[usize],
    baseline: &BaselineToken,
    steps: usize,
) -> Result<Vec<AttributionRecord>> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs m ≥ 1".into()));
    }
    let base = baseline.sequence(tokens.nrows());
    let scores = model.integrated_gradients(tokens, base.view(), voxel_ids, steps)?;
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("integrated-gradient scores".into()));
    }
    let fx = model.predict(tokens, voxel_ids)?;
    let fb = model.predict(base.view(), voxel_ids)?;
    Ok(voxel_ids
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let row = scores.row(i);
            AttributionRecord {
                voxel_id: v as u32,
                image_id,
                completeness_gap: (row.sum() - (fx[i] - fb[i])).abs(),
                scores: row.to_vec(),
                prediction: fx[i],
                baseline_prediction: fb[i],
                n_steps: steps,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    TopIg,
    Random,
    LowestIg,
}

impl Selection {
    pub const ALL: [Selection; 3] = [Selection::TopIg, Selection::Random, Selection::LowestIg];

    pub fn label(self) -> &'static str {
        match self {
            Selection::TopIg => "top-IG",
            Selection::Random => "random",
            Selection::LowestIg => "lowest-IG",
        }
    }
}

/// Indices of the `k` largest (or smallest, or uniformly random) scores,
/// ties broken toward the lower index, returned in selection order.
pub fn top_k_tokens<R: Rng>(scores: &[f64], k: usize, order: Selection, rng: &mut R) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::OutOfRange(format!("k = {k} exceeds {} tokens", scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match order {
        Selection::TopIg => idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        Selection::LowestIg => idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
        Selection::Random => return Ok(index::sample(rng, scores.len(), k).into_vec()),
    }
    idx.truncate(k);
    Ok(idx)
}

/// Per-entry integrated gradients (`s × d_s`) of one voxel, from explicit
/// token gradients.
pub fn ig_entries<M: TokenModel + ?Sized>(
    model: &M,
    tokens: ArrayView2<f64>,
    baseline: &BaselineToken,
    voxel: usize,
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs m ≥ 1".into()));
    }
    let base = baseline.sequence(tokens.nrows());
    let delta = &tokens - &base;
    let mut total = Array2::<f64>::zeros(tokens.raw_dim());
    for i in 0..steps {
        let point = &base + &(&delta * (i as f64 / steps as f64));
        let (_, g) = model.token_gradient(point.view(), voxel)?;
        total += &g;
    }
    let out = total * delta / steps as f64;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("integrated-gradient entries".into()));
    }
    Ok(out)
}

/// How per-entry scores are reduced to one score per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreReduction {
    #[default]
    Signed,
    Absolute,
}

pub fn reduce_entries(entries: &Array2<f64>, reduction: ScoreReduction) -> Array1<f64> {
    match reduction {
        ScoreReduction::Signed => entries.sum_axis(Axis(1)),
        ScoreReduction::Absolute => entries.mapv(f64::abs).sum_axis(Axis(1)),
    }
}
