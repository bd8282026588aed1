//! Low-rank adapters over frozen linear layers.
//!
//! Each target layer `W: [d_in x d_out]` gets a trainable delta
//! `(alpha / r) * B A` with down-projection `A: [r x d_in]` and
//! up-projection `B: [d_out x r]`. `B` starts at zero, so a freshly
//! initialized adapter changes nothing about the base model.

use crate::error::{Error, Result};
use crate::model::weights::ModelWeights;
use crate::rng::{mix_seed, NoiseRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraTarget {
    /// Name of the adapted base layer, e.g. `blocks.0.text_qkv`.
    pub name: String,
    /// Down projection `A: [rank x d_in]`.
    pub down: Tensor,
    /// Up projection `B: [d_out x rank]`.
    pub up: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoRAAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl LoRAAdapter {
    /// Standard initialization: Gaussian down projection, zero up
    /// projection, so the effective delta starts at exactly zero.
    pub fn init(weights: &ModelWeights, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be positive".into()));
        }
        let mut targets = Vec::new();
        for (idx, (name, d_in, d_out)) in weights.lora_targets().into_iter().enumerate() {
            let mut rng = NoiseRng::seed(mix_seed(seed, idx as u64));
            let std = 1.0 / (d_in as f64).sqrt();
            let mut down = vec![0.0; rank * d_in];
            for v in down.iter_mut() {
                *v = rng.next_normal() * std;
            }
            targets.push(LoraTarget {
                name,
                down: Tensor::new(vec![rank, d_in], down)?,
                up: Tensor::zeros(vec![d_out, rank]),
            });
        }
        Ok(LoRAAdapter { rank, alpha, targets })
    }

    /// All-zero adapter (down and up both zero): exactly the base model.
    pub fn zeroed(weights: &ModelWeights, rank: usize, alpha: f64) -> Result<Self> {
        let mut adapter = LoRAAdapter::init(weights, rank, alpha, 0)?;
        for t in adapter.targets.iter_mut() {
            t.down = Tensor::zeros(t.down.shape().to_vec());
        }
        Ok(adapter)
    }

    /// Multiplier applied to `B A`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.targets.iter().map(|t| t.down.numel() + t.up.numel()).sum()
    }

    /// Trainable tensor sizes in parameter order (down then up per target).
    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.targets.len() * 2);
        for t in &self.targets {
            out.push(t.down.numel());
            out.push(t.up.numel());
        }
        out
    }

    /// Check that the adapter matches the given base model's target list.
    pub fn compatible_with(&self, weights: &ModelWeights) -> Result<()> {
        let targets = weights.lora_targets();
        if targets.len() != self.targets.len() {
            return Err(Error::InvalidInput("adapter target count does not match model".into()));
        }
        for ((name, d_in, d_out), t) in targets.iter().zip(&self.targets) {
            if name != &t.name
                || t.down.shape() != [self.rank, *d_in]
                || t.up.shape() != [*d_out, self.rank]
            {
                return Err(Error::InvalidInput(format!(
                    "adapter target {} does not match model layer {}",
                    t.name, name
                )));
            }
        }
        Ok(())
    }
}
