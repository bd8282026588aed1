//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static shape configuration of the transformer and its latent codec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub channels: usize,
    /// Pixel-to-latent downsampling factor of the codec.
    pub latent_downsample: usize,
    /// Latent cells per patch side when forming tokens.
    pub patch_size: usize,
    /// Embedding width.
    pub d_model: usize,
    pub heads: usize,
    /// Tokens per prompt slot (global and each entity).
    pub n_p: usize,
    pub n_double: usize,
    pub n_single: usize,
    /// Size of the hashed pseudo-vocabulary for prompt embeddings.
    pub vocab_hash_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canvas_h: 64,
            canvas_w: 64,
            channels: 3,
            latent_downsample: 4,
            patch_size: 2,
            d_model: 64,
            heads: 4,
            n_p: 8,
            n_double: 2,
            n_single: 2,
            vocab_hash_dim: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let block = self.latent_downsample * self.patch_size;
        if block == 0 {
            return Err(Error::InvalidConfig("latent_downsample and patch_size must be positive".into()));
        }
        if self.canvas_h % block != 0 || self.canvas_w % block != 0 {
            return Err(Error::InvalidConfig(format!(
                "canvas {}x{} must be divisible by latent_downsample*patch_size = {}",
                self.canvas_w, self.canvas_h, block
            )));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.channels == 0 || self.n_p == 0 || self.vocab_hash_dim == 0 {
            return Err(Error::InvalidConfig("channels, n_p, vocab_hash_dim must be positive".into()));
        }
        if self.n_double + self.n_single == 0 {
            return Err(Error::InvalidConfig("at least one transformer block required".into()));
        }
        Ok(())
    }

    /// Latent grid height (canvas rows / downsample).
    pub fn latent_h(&self) -> usize {
        self.canvas_h / self.latent_downsample
    }

    pub fn latent_w(&self) -> usize {
        self.canvas_w / self.latent_downsample
    }

    /// Token grid height (latent rows / patch side).
    pub fn grid_h(&self) -> usize {
        self.latent_h() / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.latent_w() / self.patch_size
    }

    /// Latent token count.
    pub fn n_z(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Per-token latent feature width (channels folded over a patch).
    pub fn d_latent(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn n_blocks(&self) -> usize {
        self.n_double + self.n_single
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_dimensions() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.latent_h(), 16);
        assert_eq!(cfg.grid_h(), 8);
        assert_eq!(cfg.n_z(), 64);
        assert_eq!(cfg.d_latent(), 12);
        assert_eq!(cfg.d_head(), 16);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.canvas_h = 30;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }
}
