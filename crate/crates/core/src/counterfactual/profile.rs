use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{edit_record, quantile_sorted, Condition, EditContext, EditKind, EditOp, EditRecord, FaithfulnessRecord};
use crate::encoder::TokenModel;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::world::StimulusSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// Trials below this quantile of the voxel's faithfulness are dropped.
    pub quartile: f64,
    pub min_trials: usize,
    /// Zero means the world's critical-set cap.
    pub n_canonical: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            quartile: 0.75,
            min_trials: 3,
            n_canonical: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFeature {
    pub feature: usize,
    /// Mean faithfulness of the surviving trials containing the feature,
    /// clamped to `[0, 1]`.
    pub weight: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub voxel_id: u32,
    /// Canonical features by weight, then support, then index.
    pub features: Vec<ProfileFeature>,
    pub n_supporting_trials: usize,
    pub n_source_images: usize,
    pub threshold: f64,
}

impl ProfileSpec {
    pub fn canonical(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.feature).collect()
    }
}

/// Aggregates one voxel's critical-condition faithfulness trials into a
/// profile. Only trials that inserted something count; `Ok(None)` means too
/// few survived the quantile cut.
pub fn build_profile(
    voxel_id: u32,
    records: &[FaithfulnessRecord],
    config: &ProfileConfig,
    critical_cap: usize,
) -> Result<Option<ProfileSpec>> {
    if records.is_empty() {
        return Err(Error::Empty(format!("voxel {voxel_id} has no faithfulness trials")));
    }
    if let Some(r) = records.iter().find(|r| r.voxel_id != voxel_id) {
        return Err(Error::Config(format!(
            "trial for voxel {} passed to the profile of voxel {voxel_id}",
            r.voxel_id
        )));
    }
    if !(0.0..=1.0).contains(&config.quartile) {
        return Err(Error::Config("profile quartile must lie in [0, 1]".into()));
    }
    let trials: Vec<&FaithfulnessRecord> = records
        .iter()
        .filter(|r| r.condition == Condition::Critical && !r.empty_edit && r.value.is_finite())
        .collect();
    if trials.is_empty() {
        return Ok(None);
    }
    let mut values: Vec<f64> = trials.iter().map(|r| r.value).collect();
    values.sort_by(f64::total_cmp);
    let threshold = quantile_sorted(&values, config.quartile);
    let surviving: Vec<&&FaithfulnessRecord> = trials.iter().filter(|r| r.value >= threshold).collect();
    if surviving.len() < config.min_trials.max(1) {
        return Ok(None);
    }
    let mut support: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &surviving {
        for &f in &r.features {
            let e = support.entry(f).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
    }
    let mut features: Vec<ProfileFeature> = support
        .into_iter()
        .map(|(feature, (sum, n))| ProfileFeature {
            feature,
            weight: (sum / n as f64).clamp(0.0, 1.0),
            n_trials: n,
        })
        .collect();
    features.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(b.n_trials.cmp(&a.n_trials))
            .then(a.feature.cmp(&b.feature))
    });
    let m = if config.n_canonical == 0 { critical_cap } else { config.n_canonical };
    features.truncate(m);
    let sources: BTreeSet<u32> = surviving.iter().map(|r| r.preferred_image).collect();
    Ok(Some(ProfileSpec {
        voxel_id,
        features,
        n_supporting_trials: surviving.len(),
        n_source_images: sources.len(),
        threshold,
    }))
}

/// Adds every canonical feature to each target image. Features the target
/// already carries are skipped and listed on the record; when nothing is
/// left to add the record is a zero edit.
pub fn profile_edit_eval<M: TokenModel + ?Sized>(
    ctx: EditContext<'_, M>,
    voxel: usize,
    canonical: &[usize],
    targets: &[(&StimulusSpec, f64, Option<f64>)],
    seed: u64,
) -> Result<Vec<EditRecord>> {
    targets
        .iter()
        .map(|&(stim, before, recorded)| {
            let (skipped, add): (Vec<usize>, Vec<usize>) = canonical.iter().partition(|&&f| stim.contains(f));
            let op_seed = derive_seed(seed, &[stim.image_id as u64]);
            let op = EditOp::new(EditKind::Add, &add, stim.image_id, op_seed);
            let mut rec = if add.is_empty() {
                EditRecord {
                    voxel_id: voxel as u32,
                    op,
                    reference_image: None,
                    before,
                    after: before,
                    recorded,
                    condition: Condition::Profile,
                    skipped_features: Vec::new(),
                }
            } else {
                edit_record(ctx, voxel, stim, before, op, None, Condition::Profile, recorded)?
            };
            rec.skipped_features = skipped;
            Ok(rec)
        })
        .collect()
}
