use serde::{Deserialize, Serialize};

use super::ModelError;

/// One of the four attention projections a low-rank adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnProj {
    Q,
    K,
    V,
    O,
}

impl AttnProj {
    pub const ALL: [AttnProj; 4] = [AttnProj::Q, AttnProj::K, AttnProj::V, AttnProj::O];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Shape and initialization of the frozen toy backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct BackboneConfig {
    /// Raw per-frame feature dimension fed to the vision encoder.
    pub frame_dim: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rank: usize,
    /// Layer indices that receive adapters.
    pub adapted_layers: Vec<usize>,
    pub adapted_projections: Vec<AttnProj>,
    pub pool_stride: usize,
    /// Seed for the frozen base weights and the shared adapter initialization.
    pub seed: u64,
    /// Standard deviation of the Gaussian used for the adapters' `A` matrices.
    pub lora_init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            frame_dim: 16,
            d_v: 32,
            d_l: 64,
            layers: 4,
            heads: 4,
            mlp_hidden: 128,
            vocab_size: crate::tokenizer::Tokenizer::from_templates().len(),
            max_seq_len: 96,
            rank: 8,
            adapted_layers: vec![0, 1, 2, 3],
            adapted_projections: AttnProj::ALL.to_vec(),
            pool_stride: 5,
            seed: 7,
            lora_init_std: 0.02,
        }
    }
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.d_l / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("frameDim", self.frame_dim),
            ("dV", self.d_v),
            ("dL", self.d_l),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlpHidden", self.mlp_hidden),
            ("vocabSize", self.vocab_size),
            ("maxSeqLen", self.max_seq_len),
            ("rank", self.rank),
            ("poolStride", self.pool_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_l.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("dL={} is not divisible by heads={}", self.d_l, self.heads)));
        }
        if self.rank * 4 > self.d_l {
            return Err(ModelError::Config(format!("rank {} exceeds dL/4 = {}", self.rank, self.d_l / 4)));
        }
        if let Some(&l) = self.adapted_layers.iter().find(|&&l| l >= self.layers) {
            return Err(ModelError::Config(format!("adapted layer {l} out of range")));
        }
        if !(self.lora_init_std.is_finite() && self.lora_init_std >= 0.0) {
            return Err(ModelError::Config("loraInitStd must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn is_adapted(&self, layer: usize, proj: AttnProj) -> bool {
        self.adapted_layers.contains(&layer) && self.adapted_projections.contains(&proj)
    }
}
