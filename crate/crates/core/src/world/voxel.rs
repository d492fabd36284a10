use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{StimulusSpec, WorldConfig};
use crate::error::{Error, Result};

/// A planted signal detector: responds with `gain` whenever any of its
/// critical features is present, on top of `baseline` and trial noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub voxel_id: u32,
    pub critical_set: Vec<usize>,
    pub gain: f64,
    pub baseline: f64,
    pub trial_noise_sd: f64,
    pub n_reps: usize,
}

impl VoxelSpec {
    pub fn validate(&self, cap: usize) -> Result<()> {
        if self.critical_set.is_empty() || self.critical_set.len() > cap {
            return Err(Error::Config(format!(
                "voxel {} critical set size {} outside [1, {cap}]",
                self.voxel_id,
                self.critical_set.len()
            )));
        }
        if !(self.gain > 0.0) {
            return Err(Error::Config(format!("voxel {} gain must be > 0", self.voxel_id)));
        }
        if !(self.trial_noise_sd >= 0.0) {
            return Err(Error::Config(format!(
                "voxel {} trial noise must be ≥ 0",
                self.voxel_id
            )));
        }
        Ok(())
    }

    /// The H₁ indicator `𝕀[f_v ∩ x ≠ ∅]`.
    pub fn detects(&self, stimulus: &StimulusSpec) -> bool {
        self.critical_set.iter().any(|&f| stimulus.contains(f))
    }

    /// Noise-free response `a·𝕀[f_v ∩ x ≠ ∅] + b`.
    pub fn expected_response(&self, stimulus: &StimulusSpec) -> f64 {
        self.expected_for_features(&stimulus.feature_set)
    }

    pub fn expected_for_features(&self, features: &[usize]) -> f64 {
        let hit = self.critical_set.iter().any(|f| features.contains(f));
        if hit {
            self.gain + self.baseline
        } else {
            self.baseline
        }
    }

    /// Critical features present in the stimulus (`f_v ∩ x`).
    pub fn present_critical(&self, stimulus: &StimulusSpec) -> Vec<usize> {
        self.critical_set
            .iter()
            .copied()
            .filter(|&f| stimulus.contains(f))
            .collect()
    }
}

/// One noisy trial: `a·𝕀[f_v ∩ x ≠ ∅] + b + ε`, `ε ~ N(0, σ_v²)`.
pub fn voxel_response(vspec: &VoxelSpec, stimulus: &StimulusSpec, rep_seed: u64) -> f64 {
    let mean = vspec.expected_response(stimulus);
    if vspec.trial_noise_sd == 0.0 {
        return mean;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
    let noise = Normal::new(0.0, vspec.trial_noise_sd).expect("valid sd");
    mean + noise.sample(&mut rng)
}

/// Probability that a stimulus drawn from the world contains at least one of
/// `critical` features, averaging over the uniform `|x|` law.
pub fn hit_probability(config: &WorldConfig, critical: usize) -> f64 {
    let n = config.n_features;
    let [k_min, k_max] = config.features_per_image;
    let mut miss = 0.0;
    for k in k_min..=k_max {
        // C(n - c, k) / C(n, k) = Π_{i<k} (n - c - i) / (n - i)
        let mut p = 1.0;
        for i in 0..k {
            let num = n as f64 - critical as f64 - i as f64;
            if num <= 0.0 {
                p = 0.0;
                break;
            }
            p *= num / (n - i) as f64;
        }
        miss += p;
    }
    1.0 - miss / (k_max - k_min + 1) as f64
}

/// Trial-noise sd that makes the expected noise ceiling equal `target` for a
/// detector of the given gain and hit probability.
pub fn noise_sd_for_ceiling(gain: f64, hit_p: f64, n_reps: usize, target: f64) -> f64 {
    let signal = gain * gain * hit_p * (1.0 - hit_p);
    (n_reps as f64 * signal * (1.0 / target - 1.0)).max(0.0).sqrt()
}

/// Variance-components noise ceiling from repeated trials.
///
/// `reps[i]` holds the repeated responses to image `i`. With `n` reps,
/// `σ²_noise` is the mean within-image variance and
/// `σ²_signal = max(0, Var(rep means) − σ²_noise / n)`; the ceiling is
/// `σ²_signal / (σ²_signal + σ²_noise / n)`, clamped to `[0, 1]`.
pub fn noise_ceiling(reps: &[Vec<f64>]) -> Result<f64> {
    if reps.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "noise ceiling needs ≥ 2 images, got {}",
            reps.len()
        )));
    }
    let n_reps = reps[0].len();
    if n_reps < 2 {
        return Err(Error::InsufficientData(format!(
            "noise ceiling needs ≥ 2 reps per image, got {n_reps}"
        )));
    }
    if reps.iter().any(|r| r.len() != n_reps) {
        return Err(Error::InsufficientData(
            "noise ceiling needs the same number of reps for every image".into(),
        ));
    }
    let n = n_reps as f64;
    let mut within = 0.0;
    let mut means = Vec::with_capacity(reps.len());
    for r in reps {
        let m = r.iter().sum::<f64>() / n;
        within += r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        means.push(m);
    }
    let noise = within / reps.len() as f64;
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let between =
        means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    let signal = (between - noise / n).max(0.0);
    let denom = signal + noise / n;
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((signal / denom).clamp(0.0, 1.0))
}
