//! Transformer weights: initialization, naming, and low-rank adapter
//! target enumeration.
//!
//! Double-stream blocks keep separate text and latent projections; a
//! single-stream block holds one set applied to the whole concatenated
//! sequence, so its text and latent MLPs are the same object by
//! construction. Modulation projections start at zero, making every block
//! the identity map at initialization (gates are zero).

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::rng::{mix_seed, NoiseRng};
use crate::tensor::Tensor;

/// A dense affine layer: `y = x W + b` with `W: [d_in x d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearW {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearW {
    fn gaussian(d_in: usize, d_out: usize, rng: &mut NoiseRng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let mut data = vec![0.0; d_in * d_out];
        for v in data.iter_mut() {
            *v = rng.next_normal() * std;
        }
        LinearW {
            w: Tensor::new(vec![d_in, d_out], data).expect("linear shape"),
            b: Tensor::zeros(vec![d_out]),
        }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearW { w: Tensor::zeros(vec![d_in, d_out]), b: Tensor::zeros(vec![d_out]) }
    }

    pub fn d_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleBlockWeights {
    pub text_qkv: LinearW,
    pub text_proj: LinearW,
    pub text_mod: LinearW,
    pub text_ff1: LinearW,
    pub text_ff2: LinearW,
    pub lat_qkv: LinearW,
    pub lat_proj: LinearW,
    pub lat_mod: LinearW,
    pub lat_ff1: LinearW,
    pub lat_ff2: LinearW,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleBlockWeights {
    pub qkv: LinearW,
    pub proj: LinearW,
    pub modl: LinearW,
    pub ff1: LinearW,
    pub ff2: LinearW,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockWeights {
    Double(DoubleBlockWeights),
    Single(SingleBlockWeights),
}

/// The full frozen model: latent input/output projections, timestep MLP,
/// transformer blocks, and fixed positional tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub latent_in: LinearW,
    pub latent_out: LinearW,
    pub time_mlp1: LinearW,
    pub time_mlp2: LinearW,
    pub blocks: Vec<BlockWeights>,
    /// Derived, not checkpointed: recomputed from the config on load.
    pub pos_latent: Tensor,
    pub pos_prompt: Tensor,
}

/// Modulation produces shift/scale/gate for the attention and feed-forward
/// sublayers: six vectors of width `d_model`.
pub const MOD_CHUNKS: usize = 6;

impl ModelWeights {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = 4 * d;
        let mut rng = NoiseRng::seed(mix_seed(seed, 0xB10C));
        let mut blocks = Vec::with_capacity(config.n_blocks());
        for _ in 0..config.n_double {
            blocks.push(BlockWeights::Double(DoubleBlockWeights {
                text_qkv: LinearW::gaussian(d, 3 * d, &mut rng),
                text_proj: LinearW::gaussian(d, d, &mut rng),
                text_mod: LinearW::zeros(d, MOD_CHUNKS * d),
                text_ff1: LinearW::gaussian(d, ff, &mut rng),
                text_ff2: LinearW::gaussian(ff, d, &mut rng),
                lat_qkv: LinearW::gaussian(d, 3 * d, &mut rng),
                lat_proj: LinearW::gaussian(d, d, &mut rng),
                lat_mod: LinearW::zeros(d, MOD_CHUNKS * d),
                lat_ff1: LinearW::gaussian(d, ff, &mut rng),
                lat_ff2: LinearW::gaussian(ff, d, &mut rng),
            }));
        }
        for _ in 0..config.n_single {
            blocks.push(BlockWeights::Single(SingleBlockWeights {
                qkv: LinearW::gaussian(d, 3 * d, &mut rng),
                proj: LinearW::gaussian(d, d, &mut rng),
                modl: LinearW::zeros(d, MOD_CHUNKS * d),
                ff1: LinearW::gaussian(d, ff, &mut rng),
                ff2: LinearW::gaussian(ff, d, &mut rng),
            }));
        }
        let pos_latent = super::embed::latent_positions(&config);
        let pos_prompt = super::embed::prompt_positions(&config);
        Ok(ModelWeights {
            latent_in: LinearW::gaussian(config.d_latent(), d, &mut rng),
            latent_out: LinearW::gaussian(d, config.d_latent(), &mut rng),
            time_mlp1: LinearW::gaussian(d, d, &mut rng),
            time_mlp2: LinearW::gaussian(d, d, &mut rng),
            config,
            blocks,
            pos_latent,
            pos_prompt,
        })
    }

    /// Checkpointed tensors in a fixed order; positional tables are derived
    /// and therefore excluded.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        fn push<'a>(out: &mut Vec<(String, &'a Tensor)>, name: String, lin: &'a LinearW) {
            out.push((format!("{name}.w"), &lin.w));
            out.push((format!("{name}.b"), &lin.b));
        }
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        push(&mut out, "latent_in".into(), &self.latent_in);
        push(&mut out, "latent_out".into(), &self.latent_out);
        push(&mut out, "time_mlp1".into(), &self.time_mlp1);
        push(&mut out, "time_mlp2".into(), &self.time_mlp2);
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                BlockWeights::Double(db) => {
                    push(&mut out, format!("blocks.{i}.text_qkv"), &db.text_qkv);
                    push(&mut out, format!("blocks.{i}.text_proj"), &db.text_proj);
                    push(&mut out, format!("blocks.{i}.text_mod"), &db.text_mod);
                    push(&mut out, format!("blocks.{i}.text_ff1"), &db.text_ff1);
                    push(&mut out, format!("blocks.{i}.text_ff2"), &db.text_ff2);
                    push(&mut out, format!("blocks.{i}.lat_qkv"), &db.lat_qkv);
                    push(&mut out, format!("blocks.{i}.lat_proj"), &db.lat_proj);
                    push(&mut out, format!("blocks.{i}.lat_mod"), &db.lat_mod);
                    push(&mut out, format!("blocks.{i}.lat_ff1"), &db.lat_ff1);
                    push(&mut out, format!("blocks.{i}.lat_ff2"), &db.lat_ff2);
                }
                BlockWeights::Single(sb) => {
                    push(&mut out, format!("blocks.{i}.qkv"), &sb.qkv);
                    push(&mut out, format!("blocks.{i}.proj"), &sb.proj);
                    push(&mut out, format!("blocks.{i}.mod"), &sb.modl);
                    push(&mut out, format!("blocks.{i}.ff1"), &sb.ff1);
                    push(&mut out, format!("blocks.{i}.ff2"), &sb.ff2);
                }
            }
        }
        out
    }

    /// Rebuild from config plus a name -> tensor list (checkpoint load).
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut base = ModelWeights::init(config, 0)?;
        let expected: Vec<String> = base.named_tensors().into_iter().map(|(n, _)| n).collect();
        let got: Vec<&String> = tensors.iter().map(|(n, _)| n).collect();
        if expected.len() != got.len() || expected.iter().zip(&got).any(|(a, b)| &a != b) {
            return Err(Error::Format("checkpoint tensor names do not match model".into()));
        }
        let mut iter = tensors.into_iter();
        let mut assign = |lin: &mut LinearW| -> Result<()> {
            let (_, w) = iter.next().expect("length checked");
            let (_, b) = iter.next().expect("length checked");
            if w.shape() != lin.w.shape() || b.shape() != lin.b.shape() {
                return Err(Error::Format("checkpoint tensor shape mismatch".into()));
            }
            lin.w = w;
            lin.b = b;
            Ok(())
        };
        assign(&mut base.latent_in)?;
        assign(&mut base.latent_out)?;
        assign(&mut base.time_mlp1)?;
        assign(&mut base.time_mlp2)?;
        for b in base.blocks.iter_mut() {
            match b {
                BlockWeights::Double(db) => {
                    assign(&mut db.text_qkv)?;
                    assign(&mut db.text_proj)?;
                    assign(&mut db.text_mod)?;
                    assign(&mut db.text_ff1)?;
                    assign(&mut db.text_ff2)?;
                    assign(&mut db.lat_qkv)?;
                    assign(&mut db.lat_proj)?;
                    assign(&mut db.lat_mod)?;
                    assign(&mut db.lat_ff1)?;
                    assign(&mut db.lat_ff2)?;
                }
                BlockWeights::Single(sb) => {
                    assign(&mut sb.qkv)?;
                    assign(&mut sb.proj)?;
                    assign(&mut sb.modl)?;
                    assign(&mut sb.ff1)?;
                    assign(&mut sb.ff2)?;
                }
            }
        }
        Ok(base)
    }

    /// Adapter targets: the projections before and after attention plus the
    /// modulation linears of every block, in block order.
    pub fn lora_targets(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                BlockWeights::Double(db) => {
                    out.push((format!("blocks.{i}.text_qkv"), db.text_qkv.d_in(), db.text_qkv.d_out()));
                    out.push((format!("blocks.{i}.text_proj"), db.text_proj.d_in(), db.text_proj.d_out()));
                    out.push((format!("blocks.{i}.text_mod"), db.text_mod.d_in(), db.text_mod.d_out()));
                    out.push((format!("blocks.{i}.lat_qkv"), db.lat_qkv.d_in(), db.lat_qkv.d_out()));
                    out.push((format!("blocks.{i}.lat_proj"), db.lat_proj.d_in(), db.lat_proj.d_out()));
                    out.push((format!("blocks.{i}.lat_mod"), db.lat_mod.d_in(), db.lat_mod.d_out()));
                }
                BlockWeights::Single(sb) => {
                    out.push((format!("blocks.{i}.qkv"), sb.qkv.d_in(), sb.qkv.d_out()));
                    out.push((format!("blocks.{i}.proj"), sb.proj.d_in(), sb.proj.d_out()));
                    out.push((format!("blocks.{i}.mod"), sb.modl.d_in(), sb.modl.d_out()));
                }
            }
        }
        out
    }
}
