use serde::{Deserialize, Serialize};

use crate::error::{FfckError, Result};

/// Architecture hyperparameters of the toy decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default toy configuration: 73 residual-stream components, small enough
    /// that brute-force oracles over the vocabulary run in seconds.
    pub fn toy_default(seed: u64) -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 8,
            d_model: 128,
            d_head: 16,
            d_mlp: 512,
            vocab_size: 512,
            max_seq: 64,
            seed,
        }
    }

    /// Two-layer micro configuration used by the finite-difference gradient
    /// check.
    pub fn micro(seed: u64) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 24,
            vocab_size: 32,
            max_seq: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_head == 0
            || self.d_mlp == 0
            || self.max_seq == 0
        {
            return Err(FfckError::Input("config has a zero dimension".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(FfckError::dimension(
                format!("d_model == n_heads*d_head == {}", self.n_heads * self.d_head),
                self.d_model,
                "model config",
            ));
        }
        if self.d_head % 2 != 0 {
            return Err(FfckError::Input(
                "d_head must be even for rotary positions".into(),
            ));
        }
        if self.vocab_size < 32 {
            return Err(FfckError::Input(format!(
                "vocab_size {} below minimum 32",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// 1 embedding + one component per attention head + one per MLP block.
    pub fn n_components(&self) -> usize {
        1 + self.n_layers * (self.n_heads + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_component_count() {
        let c = ModelConfig::toy_default(0);
        c.validate().unwrap();
        assert_eq!(c.n_components(), 73);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let mut c = ModelConfig::toy_default(0);
        c.d_head = 12;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy_default(0);
        c.vocab_size = 16;
        assert!(c.validate().is_err());
    }
}
