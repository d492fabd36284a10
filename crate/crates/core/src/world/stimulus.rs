use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureDictionary, WorldConfig};
use crate::error::{Error, Result};

/// A stimulus as a set of features plus the token position each one occupies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusSpec {
    pub image_id: u32,
    /// Sorted, unique feature indices.
    pub feature_set: Vec<usize>,
    /// Feature carried by each token position; `None` is background.
    pub assignment: Vec<Option<usize>>,
}

impl StimulusSpec {
    pub fn seq_len(&self) -> usize {
        self.assignment.len()
    }

    pub fn contains(&self, feature: usize) -> bool {
        self.feature_set.binary_search(&feature).is_ok()
    }

    pub fn positions_of(&self, feature: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(j, a)| (*a == Some(feature)).then_some(j))
            .collect()
    }

    pub fn background_positions(&self) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(j, a)| a.is_none().then_some(j))
            .collect()
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.feature_set.is_empty() {
            return Err(Error::Config(format!(
                "stimulus {} has an empty feature set",
                self.image_id
            )));
        }
        if self.feature_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stimulus {} feature set not sorted/unique",
                self.image_id
            )));
        }
        if let Some(&f) = self.feature_set.iter().find(|&&f| f >= n_features) {
            return Err(Error::Config(format!(
                "stimulus {} uses feature {f} outside the dictionary",
                self.image_id
            )));
        }
        let mut used = vec![false; self.feature_set.len()];
        for a in self.assignment.iter().flatten() {
            match self.feature_set.binary_search(a) {
                Ok(i) => used[i] = true,
                Err(_) => {
                    return Err(Error::Config(format!(
                        "stimulus {} assigns feature {a} which is not in its feature set",
                        self.image_id
                    )))
                }
            }
        }
        if used.iter().any(|u| !u) {
            return Err(Error::Config(format!(
                "stimulus {} has a feature without a token",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// Rendered token-sequence representation, `seq_len × token_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatrix {
    pub image_id: u32,
    pub values: Array2<f64>,
}

/// Random partition of `seq_len` positions among `features` (each gets at
/// least one) and background. Footprints are drawn from `tokens_per_feature`
/// and shrunk, largest first, until they fit.
pub(crate) fn assign_tokens<R: Rng>(
    features: &[usize],
    seq_len: usize,
    tokens_per_feature: [usize; 2],
    rng: &mut R,
) -> Result<Vec<Option<usize>>> {
    if features.len() > seq_len {
        return Err(Error::Config(format!(
            "{} features cannot each receive a token in seq_len {seq_len}",
            features.len()
        )));
    }
    let [lo, hi] = tokens_per_feature;
    let mut counts: Vec<usize> = features
        .iter()
        .map(|_| rng.random_range(lo.max(1)..=hi.max(lo).max(1)))
        .collect();
    while counts.iter().sum::<usize>() > seq_len {
        let (i, _) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        counts[i] -= 1;
    }
    let mut positions: Vec<usize> = (0..seq_len).collect();
    positions.shuffle(rng);
    let mut assignment = vec![None; seq_len];
    let mut next = positions.into_iter();
    for (&f, &c) in features.iter().zip(&counts) {
        for p in next.by_ref().take(c) {
            assignment[p] = Some(f);
        }
    }
    Ok(assignment)
}

/// Draws a stimulus: `|x|` uniform in the configured range, features uniform
/// without replacement, then a random token assignment.
pub fn sample_stimulus(config: &WorldConfig, image_id: u32, seed: u64) -> Result<StimulusSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [k_min, k_max] = config.features_per_image;
    let k = rng.random_range(k_min..=k_max);
    let mut feature_set = index::sample(&mut rng, config.n_features, k).into_vec();
    feature_set.sort_unstable();
    let assignment = assign_tokens(
        &feature_set,
        config.seq_len,
        config.tokens_per_feature,
        &mut rng,
    )?;
    Ok(StimulusSpec {
        image_id,
        feature_set,
        assignment,
    })
}

/// Builds a stimulus with a prescribed feature set and a random assignment.
pub fn stimulus_from_features(
    config: &WorldConfig,
    image_id: u32,
    features: &[usize],
    seed: u64,
) -> Result<StimulusSpec> {
    let mut feature_set = features.to_vec();
    feature_set.sort_unstable();
    feature_set.dedup();
    if feature_set.is_empty() {
        return Err(Error::Config("stimulus needs at least one feature".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = assign_tokens(
        &feature_set,
        config.seq_len,
        config.tokens_per_feature,
        &mut rng,
    )?;
    let spec = StimulusSpec {
        image_id,
        feature_set,
        assignment,
    };
    spec.validate(config.n_features)?;
    Ok(spec)
}

/// Token `j` is its feature's direction plus isotropic Gaussian noise of sd
/// `token_noise_sd`; background tokens are pure noise.
pub fn render_stimulus(
    spec: &StimulusSpec,
    dict: &FeatureDictionary,
    token_noise_sd: f64,
    seed: u64,
) -> Result<TokenMatrix> {
    if let Some(&f) = spec.feature_set.iter().find(|&&f| f >= dict.n_features()) {
        return Err(Error::Shape(format!(
            "feature {f} outside dictionary of {}",
            dict.n_features()
        )));
    }
    if !(token_noise_sd >= 0.0) {
        return Err(Error::Config("token noise sd must be ≥ 0".into()));
    }
    let (s, d) = (spec.seq_len(), dict.token_dim());
    let mut values = Array2::zeros((s, d));
    for (j, a) in spec.assignment.iter().enumerate() {
        if let Some(f) = a {
            values.row_mut(j).assign(&dict.direction(*f));
        }
    }
    if token_noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, token_noise_sd).expect("valid sd");
        values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(TokenMatrix {
        image_id: spec.image_id,
        values,
    })
}
