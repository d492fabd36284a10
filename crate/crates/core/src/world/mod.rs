//! The synthetic signal-detector world: a feature dictionary, stimuli as
//! feature subsets rendered into token sequences, and planted voxels whose
//! responses are indicators of their critical features.

mod config;
mod dictionary;
mod stimulus;
mod voxel;

pub use config::{TrialNoise, WorldConfig};
pub use dictionary::FeatureDictionary;
pub use stimulus::{
    render_stimulus, sample_stimulus, stimulus_from_features, StimulusSpec, TokenMatrix,
};
pub use voxel::{
    hit_probability, noise_ceiling, noise_sd_for_ceiling, voxel_response, VoxelSpec,
};

use ndarray::{Array3, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::{ResponseRow, ResponseTable};
use crate::seed;

/// JSON description of a world: every config scalar plus the feature names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDocument {
    pub config: WorldConfig,
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub dictionary: FeatureDictionary,
    pub stimuli: Vec<StimulusSpec>,
    pub voxels: Vec<VoxelSpec>,
}

impl World {
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let master = config.seed;
        let dictionary = FeatureDictionary::build(
            config.n_features,
            config.token_dim,
            master,
            config.orthonormal,
        )?;
        let stimuli = (0..config.n_images)
            .map(|i| {
                sample_stimulus(
                    config,
                    i as u32,
                    seed::derive_seed(master, &[seed::STIMULUS, i as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let voxels = (0..config.n_voxels)
            .map(|v| Self::plant_voxel(config, v))
            .collect();
        Ok(Self {
            config: config.clone(),
            dictionary,
            stimuli,
            voxels,
        })
    }

    fn plant_voxel(config: &WorldConfig, v: usize) -> VoxelSpec {
        let mut rng = seed::rng_for(config.seed, &[seed::VOXEL, v as u64]);
        let size = rng.random_range(1..=config.critical_cap);
        let mut critical_set = index::sample(&mut rng, config.n_features, size).into_vec();
        critical_set.sort_unstable();
        let gain = uniform(&mut rng, config.gain_range);
        let baseline = uniform(&mut rng, config.baseline_range);
        let trial_noise_sd = match config.trial_noise {
            TrialNoise::Fixed(sd) => sd,
            TrialNoise::TargetNoiseCeiling(target) => noise_sd_for_ceiling(
                gain,
                hit_probability(config, size),
                config.n_reps,
                target,
            ),
        };
        VoxelSpec {
            voxel_id: v as u32,
            critical_set,
            gain,
            baseline,
            trial_noise_sd,
            n_reps: config.n_reps,
        }
    }

    pub fn document(&self) -> WorldDocument {
        WorldDocument {
            config: self.config.clone(),
            feature_names: self.dictionary.names().to_vec(),
        }
    }

    pub fn render_seed(&self, image: usize) -> u64 {
        seed::derive_seed(self.config.seed, &[seed::RENDER, image as u64])
    }

    pub fn render(&self, image: usize) -> Result<TokenMatrix> {
        render_stimulus(
            &self.stimuli[image],
            &self.dictionary,
            self.config.token_noise_sd,
            self.render_seed(image),
        )
    }

    /// All renders stacked image-major: `n_images × seq_len × token_dim`.
    pub fn render_all(&self) -> Result<Array3<f64>> {
        let c = &self.config;
        let mut out = Array3::zeros((c.n_images, c.seq_len, c.token_dim));
        for (i, mut slot) in out.axis_iter_mut(Axis(0)).enumerate() {
            slot.assign(&self.render(i)?.values);
        }
        Ok(out)
    }

    pub fn response(&self, image: usize, voxel: usize, rep: usize) -> f64 {
        voxel_response(
            &self.voxels[voxel],
            &self.stimuli[image],
            seed::derive_seed(
                self.config.seed,
                &[seed::RESPONSE, image as u64, voxel as u64, rep as u64],
            ),
        )
    }

    /// Every trial of every voxel on every image.
    pub fn responses(&self) -> ResponseTable {
        let c = &self.config;
        let mut rows = Vec::with_capacity(c.n_images * c.n_voxels * c.n_reps);
        for image in 0..c.n_images {
            for voxel in 0..c.n_voxels {
                for rep in 0..c.n_reps {
                    rows.push(ResponseRow {
                        image_id: image as u32,
                        voxel_id: voxel as u32,
                        rep_index: rep as u32,
                        response: self.response(image, voxel, rep),
                    });
                }
            }
        }
        ResponseTable::new(rows).expect("generated rows are unique and finite")
    }

    /// Empirical hit rate of every voxel over the given images.
    pub fn hit_rates(&self, images: &[usize]) -> Vec<f64> {
        self.voxels
            .iter()
            .map(|v| {
                images.iter().filter(|&&i| v.detects(&self.stimuli[i])).count() as f64
                    / images.len().max(1) as f64
            })
            .collect()
    }
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_images: 50,
            n_voxels: 10,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = World::generate(&small()).unwrap();
        let b = World::generate(&small()).unwrap();
        assert_eq!(a.stimuli, b.stimuli);
        assert_eq!(a.voxels, b.voxels);
        assert_eq!(a.render_all().unwrap(), b.render_all().unwrap());
        assert_eq!(a.responses(), b.responses());
    }

    #[test]
    fn voxels_respect_cap() {
        let w = World::generate(&small()).unwrap();
        for v in &w.voxels {
            v.validate(w.config.critical_cap).unwrap();
        }
    }

    #[test]
    fn noiseless_discriminability_equals_gain() {
        let w = World::generate(&small().noiseless()).unwrap();
        for v in 0..w.voxels.len() {
            let (mut hit, mut miss) = (Vec::new(), Vec::new());
            for i in 0..w.stimuli.len() {
                let r = w.response(i, v, 0);
                if w.voxels[v].detects(&w.stimuli[i]) {
                    hit.push(r);
                } else {
                    miss.push(r);
                }
            }
            if hit.is_empty() || miss.is_empty() {
                continue;
            }
            let mh = hit.iter().sum::<f64>() / hit.len() as f64;
            let mm = miss.iter().sum::<f64>() / miss.len() as f64;
            assert!((mh - mm - w.voxels[v].gain).abs() < 1e-12);
        }
    }

    #[test]
    fn document_round_trips() {
        let w = World::generate(&small()).unwrap();
        let s = serde_json::to_string(&w.document()).unwrap();
        let back: WorldDocument = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w.document());
    }
}
