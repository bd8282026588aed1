//! Deterministic embeddings: hashed prompt tokens, 2-D sinusoidal latent
//! positions, and sinusoidal timestep features.
//!
//! The text encoder is a stub with the one property the rest of the system
//! needs: global and local prompts share an embedding space, and identical
//! text produces bit-identical embeddings. Each whitespace token is hashed
//! into a pseudo-vocabulary bucket, and the bucket seeds a fixed Gaussian
//! embedding row. Padding rows are zero; the empty prompt is all padding
//! and doubles as the guidance negative.

use crate::model::config::ModelConfig;
use crate::rng::{hash_bytes, mix_seed, NoiseRng};
use crate::tensor::Tensor;

/// Embedding-space salt so bucket streams are disjoint from other uses of
/// the shared RNG.
const EMBED_STREAM: u64 = 0x7045_4d42; // "EMB"-ish tag, value is arbitrary but fixed

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    /// `n_p x d_model` token rows.
    pub tokens: Tensor,
    pub source_text: String,
}

/// Hash-embed a prompt: whitespace tokenization, bucket per token,
/// pad/truncate to `n_p` rows.
pub fn encode_prompt(text: &str, cfg: &ModelConfig) -> PromptEmbedding {
    let d = cfg.d_model;
    let mut data = vec![0.0; cfg.n_p * d];
    for (i, word) in text.split_whitespace().take(cfg.n_p).enumerate() {
        let bucket = hash_bytes(word.as_bytes()) % cfg.vocab_hash_dim as u64;
        let row = embedding_row(bucket, d);
        data[i * d..(i + 1) * d].copy_from_slice(&row);
    }
    PromptEmbedding {
        tokens: Tensor::new(vec![cfg.n_p, d], data).expect("prompt shape"),
        source_text: text.to_string(),
    }
}

/// The fixed Gaussian row for a vocabulary bucket, scaled to unit RMS.
pub fn embedding_row(bucket: u64, d: usize) -> Vec<f64> {
    let mut rng = NoiseRng::seed(mix_seed(EMBED_STREAM, bucket));
    let mut row = vec![0.0; d];
    rng.fill_normal(&mut row);
    row
}

/// 2-D sinusoidal positions for the latent token grid, row-major token
/// order. Half the channels encode x, half encode y.
pub fn latent_positions(cfg: &ModelConfig) -> Tensor {
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let d = cfg.d_model;
    let quarter = d / 4;
    let mut data = vec![0.0; gh * gw * d];
    for ty in 0..gh {
        for tx in 0..gw {
            let token = ty * gw + tx;
            let row = &mut data[token * d..(token + 1) * d];
            for i in 0..quarter {
                let freq = 1.0 / 10_000f64.powf(i as f64 / quarter.max(1) as f64);
                row[2 * i] = (tx as f64 * freq).sin();
                row[2 * i + 1] = (tx as f64 * freq).cos();
                row[2 * quarter + 2 * i] = (ty as f64 * freq).sin();
                row[2 * quarter + 2 * i + 1] = (ty as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![gh * gw, d], data).expect("position shape")
}

/// Within-slot positions for prompt tokens. Every slot gets the same
/// encoding, so swapping entity slots leaves positional content unchanged
/// and entity order cannot leak into attention.
pub fn prompt_positions(cfg: &ModelConfig) -> Tensor {
    let d = cfg.d_model;
    let half = d / 2;
    let mut data = vec![0.0; cfg.n_p * d];
    for t in 0..cfg.n_p {
        let row = &mut data[t * d..(t + 1) * d];
        for i in 0..half {
            let freq = 1.0 / 10_000f64.powf(i as f64 / half.max(1) as f64);
            row[2 * i] = (t as f64 * freq).sin();
            row[2 * i + 1] = (t as f64 * freq).cos();
        }
    }
    Tensor::new(vec![cfg.n_p, d], data).expect("prompt position shape")
}

/// Sinusoidal features of the flow time `sigma`, spread across frequencies
/// the way discrete diffusion timesteps usually are (sigma scaled by 1000).
pub fn timestep_features(sigma: f64, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; d];
    let t = sigma * 1000.0;
    for i in 0..half {
        let freq = 1.0 / 10_000f64.powf(i as f64 / half.max(1) as f64);
        data[2 * i] = (t * freq).sin();
        data[2 * i + 1] = (t * freq).cos();
    }
    Tensor::new(vec![1, d], data).expect("timestep shape")
}
