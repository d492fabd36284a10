use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{apply_edit, Condition, EditContext, EditKind, EditOp, EditRecord, PreferenceSplit};
use crate::attribution::Selection;
use crate::encoder::TokenModel;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::world::{stimulus_from_features, StimulusSpec};

/// `n_samples` fresh stimuli holding `base` plus uniformly drawn filler
/// features (count uniform in `filler_range`, disjoint from `base`), each
/// with its predicted activation for `voxel`.
pub fn regenerate<M: TokenModel + ?Sized>(
    ctx: EditContext<'_, M>,
    voxel: usize,
    image_id: u32,
    base: &[usize],
    n_samples: usize,
    filler_range: [usize; 2],
    seed: u64,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let n_features = ctx.dictionary.n_features();
    let mut base = base.to_vec();
    base.sort_unstable();
    base.dedup();
    if let Some(&f) = base.iter().find(|&&f| f >= n_features) {
        return Err(Error::OutOfRange(format!("feature {f}")));
    }
    if filler_range[0] > filler_range[1] {
        return Err(Error::Config("filler range must be ordered".into()));
    }
    let pool: Vec<usize> = (0..n_features).filter(|f| base.binary_search(f).is_err()).collect();
    let room = ctx.world.seq_len.saturating_sub(base.len()).min(pool.len());
    (0..n_samples)
        .map(|s| {
            let mut rng = rng_for(seed, &[s as u64]);
            let mut n_fill = rng.random_range(filler_range[0]..=filler_range[1]).min(room);
            if base.is_empty() {
                n_fill = n_fill.max(1).min(pool.len());
            }
            let mut features = base.clone();
            features.extend(index::sample(&mut rng, pool.len(), n_fill).into_iter().map(|i| pool[i]));
            features.sort_unstable();
            let spec = stimulus_from_features(ctx.world, image_id, &features, derive_seed(seed, &[s as u64, 1]))?;
            let pred = ctx.predict_stimulus(&spec, voxel, derive_seed(seed, &[s as u64, 2]))?;
            Ok((features, pred))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRecord {
    pub voxel_id: u32,
    pub image_id: u32,
    pub source: Selection,
    pub sample: usize,
    pub decoded: Vec<usize>,
    pub features: Vec<usize>,
    pub predicted: f64,
    pub recorded: f64,
    /// `|ĥ(v, x̂) − y(v, x)|`.
    pub error: f64,
}

/// Regenerates stimuli from each source's decoded set and scores their
/// predictions against the recorded response to the original image. All
/// sources share the sample seeds.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_eval<M: TokenModel + ?Sized>(
    ctx: EditContext<'_, M>,
    voxel: usize,
    image_id: u32,
    recorded: f64,
    sources: &[(Selection, Vec<usize>)],
    n_samples: usize,
    filler_range: [usize; 2],
    seed: u64,
) -> Result<Vec<ReconstructionRecord>> {
    let mut out = Vec::with_capacity(sources.len() * n_samples);
    for (source, decoded) in sources {
        if decoded.is_empty() {
            return Err(Error::Empty(format!(
                "{} decode for voxel {voxel} on image {image_id} is empty",
                source.label()
            )));
        }
        for (sample, (features, predicted)) in regenerate(ctx, voxel, image_id, decoded, n_samples, filler_range, seed)?
            .into_iter()
            .enumerate()
        {
            out.push(ReconstructionRecord {
                voxel_id: voxel as u32,
                image_id,
                source: *source,
                sample,
                decoded: decoded.clone(),
                features,
                predicted,
                recorded,
                error: (predicted - recorded).abs(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreferenceGroup {
    Preferred,
    NonPreferred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilityRecord {
    pub voxel_id: u32,
    pub image_id: u32,
    pub group: PreferenceGroup,
    pub sample: usize,
    pub features: Vec<usize>,
    pub predicted: f64,
}

/// Predicted activations of stimuli regenerated from the decodes of the
/// voxel's preferred and non-preferred images. Images without a non-empty
/// decode are skipped; a group left with none is an error.
pub fn discriminability_eval<M: TokenModel + ?Sized>(
    ctx: EditContext<'_, M>,
    split: &PreferenceSplit,
    decoded: &BTreeMap<u32, Vec<usize>>,
    n_samples: usize,
    filler_range: [usize; 2],
    seed: u64,
) -> Result<Vec<DiscriminabilityRecord>> {
    let voxel = split.voxel_id as usize;
    let mut out = Vec::new();
    for (group, images) in [
        (PreferenceGroup::Preferred, &split.preferred),
        (PreferenceGroup::NonPreferred, &split.non_preferred),
    ] {
        let before = out.len();
        for &image in images {
            let Some(d) = decoded.get(&image).filter(|d| !d.is_empty()) else {
                continue;
            };
            let samples = regenerate(ctx, voxel, image, d, n_samples, filler_range, derive_seed(seed, &[image as u64]))?;
            for (sample, (features, predicted)) in samples.into_iter().enumerate() {
                out.push(DiscriminabilityRecord {
                    voxel_id: split.voxel_id,
                    image_id: image,
                    group,
                    sample,
                    features,
                    predicted,
                });
            }
        }
        if out.len() == before {
            return Err(Error::Empty(format!(
                "voxel {voxel}: no {group:?} image has a usable decode"
            )));
        }
    }
    Ok(out)
}

/// Mean preferred-derived minus mean non-preferred-derived activation.
pub fn separation(records: &[DiscriminabilityRecord]) -> Option<f64> {
    let mean = |g: PreferenceGroup| {
        let v: Vec<f64> = records.iter().filter(|r| r.group == g).map(|r| r.predicted).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(mean(PreferenceGroup::Preferred)? - mean(PreferenceGroup::NonPreferred)?)
}

/// One matched faithfulness trial: a preferred image `x`, a non-preferred
/// reference `x'`, their predictions, and the features decoded from `x`.
#[derive(Debug, Clone)]
pub struct FaithfulnessTrial<'a> {
    pub voxel: usize,
    pub x: &'a StimulusSpec,
    pub x_ref: &'a StimulusSpec,
    pub h_x: f64,
    pub h_ref: f64,
    pub decoded: Vec<usize>,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRecord {
    pub voxel_id: u32,
    pub preferred_image: u32,
    pub reference_image: u32,
    pub condition: Condition,
    /// `f = d ∩ (x ∖ x')`.
    pub features: Vec<usize>,
    pub value: f64,
    pub numerator: f64,
    /// `ĥ(v, x) − ĥ(v, x')`.
    pub denominator: f64,
    pub h_edit: f64,
    /// Set when `f` is empty: nothing was inserted and the value is 0.
    pub empty_edit: bool,
}

/// `(ĥ(v, x' ∪ f) − ĥ(v, x')) / (ĥ(v, x) − ĥ(v, x'))`, with `x' ∪ f` freshly
/// rendered. Denominators smaller than `guard` in magnitude are refused.
pub fn faithfulness<M: TokenModel + ?Sized>(
    ctx: EditContext<'_, M>,
    trial: &FaithfulnessTrial<'_>,
    guard: f64,
    seed: u64,
) -> Result<FaithfulnessRecord> {
    let denominator = trial.h_x - trial.h_ref;
    if !(denominator.abs() >= guard) || denominator == 0.0 {
        return Err(Error::GuardedDenominator {
            value: denominator,
            guard,
        });
    }
    let mut features: Vec<usize> = trial
        .decoded
        .iter()
        .copied()
        .filter(|&f| trial.x.contains(f) && !trial.x_ref.contains(f))
        .collect();
    features.sort_unstable();
    features.dedup();
    let (h_edit, empty_edit) = if features.is_empty() {
        (trial.h_ref, true)
    } else {
        let op = EditOp::new(EditKind::Add, &features, trial.x_ref.image_id, seed);
        let (_, tokens) = apply_edit(trial.x_ref, &op, ctx.dictionary, ctx.world)?;
        (ctx.predict_tokens(tokens.values.view(), trial.voxel)?, false)
    };
    let numerator = h_edit - trial.h_ref;
    Ok(FaithfulnessRecord {
        voxel_id: trial.voxel as u32,
        preferred_image: trial.x.image_id,
        reference_image: trial.x_ref.image_id,
        condition: trial.condition,
        features,
        value: numerator / denominator,
        numerator,
        denominator,
        h_edit,
        empty_edit,
    })
}

/// Applies `op` to `stimulus` and records the voxel's predicted activation
/// before and after.
#[allow(clippy::too_many_arguments)]
pub fn edit_record<M: TokenModel + ?Sized>(
    ctx: EditContext<'_, M>,
    voxel: usize,
    stimulus: &StimulusSpec,
    before: f64,
    op: EditOp,
    reference_image: Option<u32>,
    condition: Condition,
    recorded: Option<f64>,
) -> Result<EditRecord> {
    let (_, tokens) = apply_edit(stimulus, &op, ctx.dictionary, ctx.world)?;
    let after = ctx.predict_tokens(tokens.values.view(), voxel)?;
    Ok(EditRecord {
        voxel_id: voxel as u32,
        op,
        reference_image,
        before,
        after,
        recorded,
        condition,
        skipped_features: Vec::new(),
    })
}
