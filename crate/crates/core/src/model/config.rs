use alloc::format;

use crate::error::{Error, Result};
use crate::rules::RuleKind;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Per-head key and value width.
    pub head_dim: usize,
    /// Linear-attention layers per softmax-attention layer; 0 disables
    /// attention layers.
    pub hybrid_ratio: usize,
    pub rule: RuleKind,
    /// MLP hidden width is `mlp_mult × d_model`.
    pub mlp_mult: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            head_dim: 16,
            hybrid_ratio: 0,
            rule: RuleKind::Fg2Gdn,
            mlp_mult: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("mlp_mult", self.mlp_mult),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::invalid(format!(
                "d_model ({}) must equal n_heads × head_dim ({} × {})",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Whether layer `index` (0-based) is softmax attention: the 1-based
    /// layer number is a multiple of `hybrid_ratio + 1`.
    pub fn is_attention_layer(&self, index: usize) -> bool {
        self.hybrid_ratio > 0 && (index + 1).is_multiple_of(self.hybrid_ratio + 1)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_mult * self.d_model
    }
}
