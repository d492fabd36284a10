use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-voxel trial noise is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialNoise {
    /// Same trial noise sd for every voxel.
    Fixed(f64),
    /// Per-voxel sd chosen so the expected noise ceiling equals this value.
    TargetNoiseCeiling(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_features: usize,
    pub token_dim: usize,
    pub seq_len: usize,
    pub n_images: usize,
    pub n_voxels: usize,
    /// Inclusive range of the number of features per stimulus.
    pub features_per_image: [usize; 2],
    /// Inclusive range of token positions claimed by each present feature.
    pub tokens_per_feature: [usize; 2],
    pub token_noise_sd: f64,
    pub orthonormal: bool,
    /// Upper bound on the size of a voxel's critical set.
    pub critical_cap: usize,
    pub gain_range: [f64; 2],
    pub baseline_range: [f64; 2],
    pub trial_noise: TrialNoise,
    pub n_reps: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_features: 64,
            token_dim: 64,
            seq_len: 32,
            n_images: 2000,
            n_voxels: 200,
            features_per_image: [2, 5],
            tokens_per_feature: [2, 4],
            token_noise_sd: 0.1,
            orthonormal: true,
            critical_cap: 3,
            gain_range: [0.8, 1.2],
            baseline_range: [-0.2, 0.2],
            trial_noise: TrialNoise::TargetNoiseCeiling(0.6),
            n_reps: 3,
            seed: 17,
        }
    }
}

impl WorldConfig {
    /// The noiseless variant used for realizability checks.
    pub fn noiseless(mut self) -> Self {
        self.token_noise_sd = 0.0;
        self.trial_noise = TrialNoise::Fixed(0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_features", self.n_features),
            ("token_dim", self.token_dim),
            ("seq_len", self.seq_len),
            ("n_images", self.n_images),
            ("n_voxels", self.n_voxels),
            ("critical_cap", self.critical_cap),
            ("n_reps", self.n_reps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let [k_min, k_max] = self.features_per_image;
        if k_min == 0 || k_min > k_max {
            return Err(Error::Config(format!(
                "features_per_image [{k_min}, {k_max}] must satisfy 1 ≤ k_min ≤ k_max"
            )));
        }
        if k_max > self.n_features {
            return Err(Error::Config(format!(
                "k_max {k_max} exceeds n_features {}",
                self.n_features
            )));
        }
        if k_min > self.seq_len {
            return Err(Error::Config(format!(
                "k_min {k_min} features cannot each receive a token in seq_len {}",
                self.seq_len
            )));
        }
        let [t_min, t_max] = self.tokens_per_feature;
        if t_min == 0 || t_min > t_max {
            return Err(Error::Config(format!(
                "tokens_per_feature [{t_min}, {t_max}] must satisfy 1 ≤ min ≤ max"
            )));
        }
        if self.critical_cap > self.n_features {
            return Err(Error::Config("critical_cap exceeds n_features".into()));
        }
        if !(self.token_noise_sd >= 0.0) || !self.token_noise_sd.is_finite() {
            return Err(Error::Config("token_noise_sd must be finite and ≥ 0".into()));
        }
        if self.orthonormal && self.n_features > self.token_dim {
            return Err(Error::Config(format!(
                "orthonormal dictionary needs n_features {} ≤ token_dim {}",
                self.n_features, self.token_dim
            )));
        }
        if !(self.gain_range[0] > 0.0 && self.gain_range[0] <= self.gain_range[1]) {
            return Err(Error::Config("gain_range must be positive and ordered".into()));
        }
        if !(self.baseline_range[0] <= self.baseline_range[1]) {
            return Err(Error::Config("baseline_range must be ordered".into()));
        }
        match self.trial_noise {
            TrialNoise::Fixed(sd) if !(sd >= 0.0 && sd.is_finite()) => {
                return Err(Error::Config("trial noise sd must be finite and ≥ 0".into()))
            }
            TrialNoise::TargetNoiseCeiling(nc) if !(nc > 0.0 && nc <= 1.0) => {
                return Err(Error::Config("target noise ceiling must lie in (0, 1]".into()))
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        WorldConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_unplaceable_features() {
        let cfg = WorldConfig {
            seq_len: 3,
            features_per_image: [4, 5],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip_with_noise_variant() {
        let cfg = WorldConfig {
            trial_noise: TrialNoise::Fixed(0.3),
            ..Default::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"fixed\":0.3"));
        let back: WorldConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }
}
