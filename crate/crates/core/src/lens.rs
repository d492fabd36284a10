//! Logit-lens decoding of critical tokens into vocabulary words, and their
//! aggregation into per-image critical-feature sets.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{top_k_tokens, Selection};
use crate::error::{Error, Result};
use crate::world::{FeatureDictionary, World};

/// Unembedding `E_W⁻¹` (`d_s × |W|`) with one label per word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyProjector {
    unembed: Array2<f64>,
    labels: Vec<String>,
}

impl VocabularyProjector {
    /// The transpose of an orthonormal dictionary, otherwise its
    /// Moore–Penrose pseudo-inverse.
    pub fn from_dictionary(dict: &FeatureDictionary) -> Result<Self> {
        let e = dict.directions();
        let unembed = if dict.is_orthonormal() {
            e.t().to_owned()
        } else {
            let m = DMatrix::from_row_iterator(e.nrows(), e.ncols(), e.iter().copied());
            let pinv = m
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::Dimension(format!("pseudo-inverse failed: {e}")))?;
            Array2::from_shape_fn((pinv.nrows(), pinv.ncols()), |(i, j)| pinv[(i, j)])
        };
        Self::new(unembed, dict.names().to_vec())
    }

    pub fn new(unembed: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() || labels.len() != unembed.ncols() {
            return Err(Error::Shape(format!(
                "{} labels for {} vocabulary columns",
                labels.len(),
                unembed.ncols()
            )));
        }
        Ok(Self { unembed, labels })
    }

    pub fn vocab_size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn logits(&self, token: ArrayView1<f64>) -> Result<Array1<f64>> {
        if token.len() != self.unembed.nrows() {
            return Err(Error::Shape(format!(
                "token of width {} for a projector of width {}",
                token.len(),
                self.unembed.nrows()
            )));
        }
        Ok(token.dot(&self.unembed))
    }
}

/// The `top_n` words by logit, ties broken by word index.
pub fn logit_lens(
    token: ArrayView1<f64>,
    projector: &VocabularyProjector,
    top_n: usize,
) -> Result<Vec<(usize, f64)>> {
    if top_n > projector.vocab_size() {
        return Err(Error::OutOfRange(format!(
            "top_n {top_n} exceeds vocabulary of {}",
            projector.vocab_size()
        )));
    }
    let logits = projector.logits(token)?;
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    Ok(idx.into_iter().take(top_n).map(|w| (w, logits[w])).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagEntry {
    pub word: usize,
    pub label: String,
    pub count: usize,
    pub mean_logit: f64,
}

/// Words with multiplicity, ordered by count, then mean logit (both
/// descending), then word index.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WordBag {
    pub entries: Vec<BagEntry>,
}

impl WordBag {
    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Union with multiplicity of every token's top `words_per_token` words.
pub fn aggregate_bag<'a>(
    tokens: impl IntoIterator<Item = ArrayView1<'a, f64>>,
    projector: &VocabularyProjector,
    words_per_token: usize,
) -> Result<WordBag> {
    let mut acc: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    let mut n_tokens = 0;
    for t in tokens {
        n_tokens += 1;
        for (w, l) in logit_lens(t, projector, words_per_token)? {
            let e = acc.entry(w).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += l;
        }
    }
    if n_tokens == 0 {
        return Err(Error::Empty("no tokens to decode".into()));
    }
    let mut entries: Vec<BagEntry> = acc
        .into_iter()
        .map(|(word, (count, sum))| BagEntry {
            word,
            label: projector.labels[word].clone(),
            count,
            mean_logit: sum / count as f64,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.mean_logit.total_cmp(&a.mean_logit))
            .then(a.word.cmp(&b.word))
    });
    Ok(WordBag { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalFeatureSet {
    pub voxel_id: u32,
    pub image_id: u32,
    pub source: Selection,
    /// Decoded features `d(v, x)`, in bag order.
    pub features: Vec<usize>,
    pub bag: WordBag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub words_per_token: usize,
    /// Zero means the world's critical-set cap plus one.
    pub n_features_out: usize,
    /// Words whose mean logit falls below this fraction of the bag's
    /// largest mean logit are not reported.
    pub min_relative_logit: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            words_per_token: 10,
            n_features_out: 0,
            min_relative_logit: 0.5,
        }
    }
}

/// The first `n_out` words in bag order whose mean logit clears
/// `min_relative_logit × max mean logit` (when that maximum is positive).
pub fn decode_critical_features(bag: &WordBag, n_out: usize, min_relative_logit: f64) -> Result<Vec<usize>> {
    if bag.is_empty() {
        return Err(Error::Empty("cannot decode an empty bag".into()));
    }
    let best = bag
        .entries
        .iter()
        .map(|e| e.mean_logit)
        .fold(f64::NEG_INFINITY, f64::max);
    let floor = if best > 0.0 {
        min_relative_logit * best
    } else {
        f64::NEG_INFINITY
    };
    Ok(bag
        .entries
        .iter()
        .filter(|e| e.mean_logit >= floor)
        .take(n_out)
        .map(|e| e.word)
        .collect())
}

impl DecodeConfig {
    pub fn resolved_n_out(&self, critical_cap: usize) -> usize {
        if self.n_features_out == 0 {
            critical_cap + 1
        } else {
            self.n_features_out
        }
    }
}

/// Selects `k` tokens of one image by `source` from the voxel's IG scores,
/// then decodes them into a critical-feature set.
#[allow(clippy::too_many_arguments)]
pub fn decode_selection<R: Rng>(
    voxel_id: u32,
    image_id: u32,
    tokens: ArrayView2<f64>,
    scores: &[f64],
    k: usize,
    source: Selection,
    projector: &VocabularyProjector,
    config: &DecodeConfig,
    n_out: usize,
    rng: &mut R,
) -> Result<CriticalFeatureSet> {
    if k == 0 {
        return Err(Error::Config("decoding needs at least one selected token".into()));
    }
    let chosen = top_k_tokens(scores, k, source, rng)?;
    let bag = aggregate_bag(chosen.iter().map(|&j| tokens.row(j)), projector, config.words_per_token)?;
    let features = decode_critical_features(&bag, n_out, config.min_relative_logit)?;
    Ok(CriticalFeatureSet {
        voxel_id,
        image_id,
        source,
        features,
        bag,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub voxel_id: u32,
    pub precision: f64,
    pub recall: f64,
    /// Decoded sets scored.
    pub n_scored: usize,
    /// Decoded sets on images where the voxel's critical features are absent.
    pub n_without_target: usize,
}

/// Precision `|d ∩ (f_v ∩ x)| / |d|` and recall `|d ∩ (f_v ∩ x)| / |f_v ∩ x|`
/// averaged per voxel. Sets whose image carries none of the voxel's
/// critical features have no target and are counted separately; an empty
/// decode scores precision 0.
pub fn recovery_score(decoded: &[CriticalFeatureSet], world: Option<&World>) -> Result<Vec<RecoveryScore>> {
    let world = world.ok_or_else(|| {
        Error::Mode("recovery needs planted voxels (synthetic mode only)".into())
    })?;
    let mut per: BTreeMap<u32, (f64, f64, usize, usize)> = BTreeMap::new();
    for d in decoded {
        let voxel = world
            .voxels
            .get(d.voxel_id as usize)
            .ok_or_else(|| Error::OutOfRange(format!("voxel {}", d.voxel_id)))?;
        let stim = world
            .stimuli
            .get(d.image_id as usize)
            .ok_or_else(|| Error::OutOfRange(format!("image {}", d.image_id)))?;
        let target = voxel.present_critical(stim);
        let e = per.entry(d.voxel_id).or_insert((0.0, 0.0, 0, 0));
        if target.is_empty() {
            e.3 += 1;
            continue;
        }
        let hits = d.features.iter().filter(|f| target.contains(f)).count() as f64;
        e.0 += if d.features.is_empty() { 0.0 } else { hits / d.features.len() as f64 };
        e.1 += hits / target.len() as f64;
        e.2 += 1;
    }
    Ok(per
        .into_iter()
        .map(|(voxel_id, (p, r, n, skipped))| RecoveryScore {
            voxel_id,
            precision: if n > 0 { p / n as f64 } else { f64::NAN },
            recall: if n > 0 { r / n as f64 } else { f64::NAN },
            n_scored: n,
            n_without_target: skipped,
        })
        .collect())
}
