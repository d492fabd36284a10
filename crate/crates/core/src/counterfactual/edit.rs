use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::world::{render_stimulus, FeatureDictionary, StimulusSpec, TokenMatrix, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Add,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    /// Sorted, unique feature indices.
    pub features: Vec<usize>,
    pub target: u32,
    pub seed: u64,
}

impl EditOp {
    pub fn new(kind: EditKind, features: &[usize], target: u32, seed: u64) -> Self {
        let mut features = features.to_vec();
        features.sort_unstable();
        features.dedup();
        Self {
            kind,
            features,
            target,
            seed,
        }
    }
}

/// The edited feature set and token assignment, without rendering.
///
/// Removed features give their positions back to background. Each added
/// feature draws a footprint from `tokens_per_feature` and claims background
/// positions in random order; once background runs out it takes the highest
/// position of the least-populated feature still holding two or more
/// (lowest feature index on ties).
pub fn edit_spec(
    stimulus: &StimulusSpec,
    op: &EditOp,
    tokens_per_feature: [usize; 2],
    n_features: usize,
) -> Result<StimulusSpec> {
    if op.target != stimulus.image_id {
        return Err(Error::InvalidEdit(format!(
            "edit targets image {} but was applied to {}",
            op.target, stimulus.image_id
        )));
    }
    if op.features.is_empty() {
        return Err(Error::InvalidEdit("edit names no features".into()));
    }
    let mut out = stimulus.clone();
    match op.kind {
        EditKind::Remove => {
            if let Some(f) = op.features.iter().find(|&&f| !stimulus.contains(f)) {
                return Err(Error::InvalidEdit(format!(
                    "cannot remove feature {f}: absent from image {}",
                    stimulus.image_id
                )));
            }
            out.feature_set.retain(|f| op.features.binary_search(f).is_err());
            if out.feature_set.is_empty() {
                return Err(Error::InvalidEdit(format!(
                    "removing {:?} would leave image {} with no features",
                    op.features, stimulus.image_id
                )));
            }
            for a in out.assignment.iter_mut() {
                if matches!(a, Some(f) if op.features.binary_search(f).is_ok()) {
                    *a = None;
                }
            }
        }
        EditKind::Add => {
            if let Some(f) = op.features.iter().find(|&&f| stimulus.contains(f)) {
                return Err(Error::InvalidEdit(format!(
                    "cannot add feature {f}: already in image {}",
                    stimulus.image_id
                )));
            }
            if let Some(f) = op.features.iter().find(|&&f| f >= n_features) {
                return Err(Error::InvalidEdit(format!("feature {f} is outside the dictionary")));
            }
            let mut rng = seed::rng_for(op.seed, &[seed::EDIT]);
            let mut background = stimulus.background_positions();
            background.shuffle(&mut rng);
            let [lo, hi] = tokens_per_feature;
            for &f in &op.features {
                let want = rng.random_range(lo.max(1)..=hi.max(lo).max(1));
                let mut claimed = 0;
                while claimed < want {
                    let pos = match background.pop() {
                        Some(p) => p,
                        None => match donor_position(&out, &op.features) {
                            Some(p) => p,
                            None => break,
                        },
                    };
                    out.assignment[pos] = Some(f);
                    claimed += 1;
                }
                if claimed == 0 {
                    return Err(Error::InvalidEdit(format!(
                        "no token position is free for feature {f} in image {}",
                        stimulus.image_id
                    )));
                }
            }
            out.feature_set.extend_from_slice(&op.features);
            out.feature_set.sort_unstable();
        }
    }
    out.validate(n_features)?;
    Ok(out)
}

fn donor_position(spec: &StimulusSpec, adding: &[usize]) -> Option<usize> {
    let mut counts: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (j, a) in spec.assignment.iter().enumerate() {
        if let Some(f) = a {
            if adding.binary_search(f).is_ok() {
                continue;
            }
            let e = counts.entry(*f).or_insert((0, 0));
            e.0 += 1;
            e.1 = e.1.max(j);
        }
    }
    counts
        .into_iter()
        .filter(|(_, (n, _))| *n >= 2)
        .min_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.0.cmp(&b.0)))
        .map(|(_, (_, highest))| highest)
}

/// Applies the edit and re-renders the result with the op's seed.
pub fn apply_edit(
    stimulus: &StimulusSpec,
    op: &EditOp,
    dict: &FeatureDictionary,
    config: &WorldConfig,
) -> Result<(StimulusSpec, TokenMatrix)> {
    let spec = edit_spec(stimulus, op, config.tokens_per_feature, dict.n_features())?;
    let tokens = render_stimulus(&spec, dict, config.token_noise_sd, op.seed)?;
    Ok((spec, tokens))
}
