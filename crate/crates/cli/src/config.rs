//! Pipeline configuration: one JSON document with a section per stage.

use std::path::{Path, PathBuf};

use mine_core::attribution::ScoreReduction;
use mine_core::counterfactual::ProfileConfig;
use mine_core::encoder::EncoderConfig;
use mine_core::io::SplitFractions;
use mine_core::lens::DecodeConfig;
use mine_core::train::{AdamWConfig, ScheduleConfig, TrainConfig};
use mine_core::world::WorldConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MINE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Output directory; `--out` and `MINE_OUT` take over when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub world: WorldConfig,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub attribution: AttributionSection,
    pub decode: DecodeConfig,
    pub counterfactual: CounterfactualSection,
    pub profile: ProfileConfig,
    pub stats: StatsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub splits: SplitFractions,
    /// Precomputed token tensor to use instead of the synthetic world.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<PathBuf>,
    /// Response table accompanying `tokens`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub responses: Option<PathBuf>,
    /// Train on targets permuted across images (the shuffled-label control).
    pub shuffle_labels: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            splits: SplitFractions::default(),
            tokens: None,
            responses: None,
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_expansion: usize,
    pub rms_epsilon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            model_dim: e.model_dim,
            n_heads: e.n_heads,
            ffn_expansion: e.ffn_expansion,
            rms_epsilon: e.rms_epsilon,
        }
    }
}

impl ModelSection {
    pub fn encoder(&self, token_dim: usize, n_voxels: usize) -> EncoderConfig {
        EncoderConfig {
            token_dim,
            model_dim: self.model_dim,
            n_heads: self.n_heads,
            ffn_expansion: self.ffn_expansion,
            n_voxels,
            rms_epsilon: self.rms_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    /// Tokens kept per (voxel, image) for decoding.
    pub k_top: usize,
    /// Riemann steps.
    pub steps: usize,
    pub reduction: ScoreReduction,
    /// Patch-curve points; each must be ≤ seq_len.
    pub patch_ks: Vec<usize>,
    /// Voxels below this noise ceiling are left out of the analyses.
    pub min_noise_ceiling: f64,
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self {
            k_top: 50,
            steps: 10,
            reduction: ScoreReduction::Signed,
            patch_ks: vec![0, 1, 2, 4, 8, 16, 32],
            min_noise_ceiling: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualSection {
    pub q_hi: f64,
    pub q_lo: f64,
    pub n_samples: usize,
    pub filler_range: [usize; 2],
    /// Faithfulness denominator guard; absent means 0.05 × the mean planted gain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guard: Option<f64>,
    /// Preferred images per voxel used for reconstruction (0 = all).
    pub reconstruct_images: usize,
}

impl Default for CounterfactualSection {
    fn default() -> Self {
        Self {
            q_hi: 0.9,
            q_lo: 0.1,
            n_samples: 5,
            filler_range: [1, 3],
            guard: None,
            reconstruct_images: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub max_iter: usize,
    pub restarts: usize,
    /// Patch-curve points tested for the necessity ordering.
    pub necessity_ks: Vec<usize>,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            max_iter: 4000,
            restarts: 3,
            necessity_ks: vec![4, 8, 16],
        }
    }
}

impl Default for PipelineConfig {
    /// The desk-scale pipeline. Training and selection sizes are tuned for a
    /// 64-dimensional world rather than taken from the large-model defaults.
    fn default() -> Self {
        let lr = 3e-2;
        Self {
            seed: 17,
            out: None,
            world: WorldConfig::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig {
                epochs: 6,
                steps_per_epoch: 0,
                images_per_batch: 32,
                voxels_per_batch: 256,
                eval_every: 1,
                seed: 17,
                optimizer: AdamWConfig::default(),
                schedule: ScheduleConfig {
                    initial_lr: lr / 25.0,
                    max_lr: lr,
                    ..Default::default()
                },
            },
            attribution: AttributionSection {
                k_top: 2,
                ..Default::default()
            },
            decode: DecodeConfig::default(),
            counterfactual: CounterfactualSection::default(),
            profile: ProfileConfig::default(),
            stats: StatsSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a config file, applies `key=value` overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Validation(vec![format!("{}: {e}", p.display())]))?
            }
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: Self =
            serde_json::from_value(doc).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
        cfg.tie_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// World and training streams follow the master seed; their own seed
    /// fields are overwritten.
    pub fn tie_seeds(&mut self) {
        self.world.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Every violation, each prefixed with its dotted path.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |path: &str, r: mine_core::Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{path}: {e}"));
            }
        };
        check("world", self.world.validate());
        check("train", self.train.validate());
        check(
            "model",
            self.model.encoder(self.world.token_dim, self.world.n_voxels).validate(),
        );
        let f = self.data.splits;
        if [f.train, f.val, f.test, f.analysis].iter().any(|v| !(*v >= 0.0))
            || f.train + f.val + f.test + f.analysis > 1.0 + 1e-12
        {
            errs.push("data.splits: fractions must be non-negative and sum to ≤ 1".into());
        }
        if self.data.tokens.is_some() != self.data.responses.is_some() {
            errs.push("data: tokens and responses must be given together".into());
        }
        for (key, p) in [("data.tokens", &self.data.tokens), ("data.responses", &self.data.responses)] {
            if let Some(p) = p {
                if !p.exists() {
                    errs.push(format!("{key}: {} does not exist", p.display()));
                }
            }
        }
        let a = &self.attribution;
        if a.steps == 0 {
            errs.push("attribution.steps: must be ≥ 1".into());
        }
        if a.k_top == 0 || a.k_top > self.world.seq_len {
            errs.push(format!(
                "attribution.k_top: must lie in 1..={} (seq_len)",
                self.world.seq_len
            ));
        }
        if let Some(k) = a.patch_ks.iter().find(|&&k| k > self.world.seq_len) {
            errs.push(format!("attribution.patch_ks: {k} exceeds seq_len"));
        }
        if let Some(k) = self.stats.necessity_ks.iter().find(|k| !a.patch_ks.contains(k)) {
            errs.push(format!("stats.necessity_ks: {k} is not among attribution.patch_ks"));
        }
        if self.decode.words_per_token == 0 || self.decode.words_per_token > self.world.n_features {
            errs.push("decode.words_per_token: must lie in 1..=n_features".into());
        }
        let c = &self.counterfactual;
        if !(0.0 <= c.q_lo && c.q_lo < c.q_hi && c.q_hi <= 1.0) {
            errs.push(format!(
                "counterfactual.q_lo, counterfactual.q_hi: need 0 ≤ q_lo < q_hi ≤ 1, got {} and {}",
                c.q_lo, c.q_hi
            ));
        }
        if c.n_samples == 0 {
            errs.push("counterfactual.n_samples: must be ≥ 1".into());
        }
        if c.filler_range[0] > c.filler_range[1] {
            errs.push("counterfactual.filler_range: min exceeds max".into());
        }
        if let Some(g) = c.guard {
            if !(g >= 0.0) {
                errs.push("counterfactual.guard: must be ≥ 0".into());
            }
        }
        if !(0.0..=1.0).contains(&self.profile.quartile) {
            errs.push("profile.quartile: must lie in [0, 1]".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(errs))
        }
    }

    pub fn guard(&self) -> f64 {
        self.counterfactual
            .guard
            .unwrap_or(0.05 * 0.5 * (self.world.gain_range[0] + self.world.gain_range[1]))
    }

    /// Output root: explicit flag, then the config, then `MINE_OUT`, then `./mine-out`.
    pub fn resolve_out(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("mine-out"))
    }

    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        hash_json(&serde_json::to_value(&c).expect("config serializes"))
    }
}

/// sha256 of a JSON value's compact serialization. `serde_json` maps keep
/// their keys sorted, so equal values hash equally.
pub fn hash_json(v: &Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Sets `a.b.c=value` in a JSON document. The value is parsed as JSON when it
/// can be and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(vec![format!("override `{assignment}` is not key=value")]))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Validation(vec![format!("{key}: `{}` is not a section", parts[..i].join("."))]))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Validation(vec![format!("empty override key in `{assignment}`")]))
}
