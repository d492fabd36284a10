use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub token_dim: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_expansion: usize,
    pub n_voxels: usize,
    pub rms_epsilon: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            model_dim: 64,
            n_heads: 8,
            ffn_expansion: 4,
            n_voxels: 200,
            rms_epsilon: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("token_dim", self.token_dim),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("ffn_expansion", self.ffn_expansion),
            ("n_voxels", self.n_voxels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be positive")));
            }
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(self.rms_epsilon > 0.0) {
            return Err(Error::Config("rms_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.ffn_expansion * self.model_dim
    }
}
