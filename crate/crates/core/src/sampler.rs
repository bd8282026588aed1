//! Flow-matching Euler sampler with classifier-free guidance.
//!
//! The sigma schedule runs from 1 (pure noise) down to exactly 0. Each step
//! runs a positive pass conditioned on the entities, a negative pass with
//! the negative prompt and no entities, guidance extrapolation
//! `N = N_neg + cfg * (N_pos - N_neg)`, then the Euler update
//! `z_prev = z + N * (sigma_prev - sigma)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{patchify_mask, EntityMask, PatchifiedMask};
use crate::model::codec::{decode_image, LatentGrid};
use crate::model::config::ModelConfig;
use crate::model::{AttnCapture, VelocityModel};
use crate::rng::NoiseRng;

/// Sampling hyperparameters: step count, sigma schedule, guidance scale,
/// and noise seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// `steps + 1` strictly decreasing values, endpoints exactly 1 and 0.
    pub sigmas: Vec<f64>,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl SamplerConfig {
    /// Linear schedule `sigma_t = t / T`, stored from 1 down to 0.
    pub fn linear(steps: usize, cfg_scale: f64, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("sampler needs at least one step".into()));
        }
        let sigmas = (0..=steps).map(|i| (steps - i) as f64 / steps as f64).collect();
        SamplerConfig::with_sigmas(sigmas, cfg_scale, seed)
    }

    pub fn with_sigmas(sigmas: Vec<f64>, cfg_scale: f64, seed: u64) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::InvalidConfig("sigma schedule needs at least two points".into()));
        }
        if cfg_scale < 0.0 {
            return Err(Error::InvalidConfig("guidance scale must be >= 0".into()));
        }
        if *sigmas.first().unwrap() != 1.0 || *sigmas.last().unwrap() != 0.0 {
            return Err(Error::InvalidConfig("sigma schedule endpoints must be exactly 1 and 0".into()));
        }
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig("sigma schedule must be strictly decreasing".into()));
        }
        Ok(SamplerConfig { steps: sigmas.len() - 1, sigmas, cfg_scale, seed })
    }
}

/// One entity condition: local prompt plus canvas-resolution mask.
#[derive(Debug, Clone)]
pub struct EntitySpec {
    pub prompt: String,
    pub mask: EntityMask,
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub global_prompt: String,
    pub negative_prompt: String,
    pub entities: Vec<EntitySpec>,
    pub config: SamplerConfig,
}

/// Seeded standard-normal latent.
pub fn noise_latent(cfg: &ModelConfig, seed: u64) -> LatentGrid {
    let mut lat = LatentGrid::zeros(cfg.latent_h(), cfg.latent_w(), cfg.channels);
    NoiseRng::seed(seed).fill_normal(lat.data_mut());
    lat
}

/// `z_prev = z + v * (sigma_prev - sigma)`.
pub fn euler_step(
    z: &LatentGrid,
    velocity: &LatentGrid,
    sigma: f64,
    sigma_prev: f64,
) -> Result<LatentGrid> {
    if sigma_prev >= sigma {
        return Err(Error::InvalidInput(format!(
            "euler step requires sigma_prev < sigma, got {} >= {}",
            sigma_prev, sigma
        )));
    }
    z.axpy(velocity, sigma_prev - sigma)
}

/// Classifier-free guidance: `N = N_neg + cfg * (N_pos - N_neg)`.
/// The degenerate scales short-circuit so `cfg = 1` returns the positive
/// velocity exactly and `cfg = 0` the negative, with no rounding residue.
pub fn cfg_combine(pos: &LatentGrid, neg: &LatentGrid, cfg_scale: f64) -> Result<LatentGrid> {
    if pos.numel() != neg.numel() {
        return Err(Error::shape("cfg_combine", "velocity sizes differ"));
    }
    if cfg_scale == 1.0 {
        return Ok(pos.clone());
    }
    if cfg_scale == 0.0 {
        return Ok(neg.clone());
    }
    let data = pos
        .data()
        .iter()
        .zip(neg.data())
        .map(|(&p, &n)| n + cfg_scale * (p - n))
        .collect();
    LatentGrid::from_data(pos.height, pos.width, pos.channels, data)
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Capture attention maps for the first `capture_steps` positive passes.
    pub capture_steps: usize,
}

pub struct GenerateOutput {
    pub image: Image,
    pub final_latent: LatentGrid,
    /// `(step index, capture)` for captured steps.
    pub captures: Vec<(usize, AttnCapture)>,
    /// Number of model velocity evaluations performed.
    pub model_calls: usize,
}

/// Patchify entity masks against the model's canvas and token layout.
pub fn patchify_entities(
    entities: &[EntitySpec],
    cfg: &ModelConfig,
) -> Result<Vec<(String, PatchifiedMask)>> {
    entities
        .iter()
        .map(|e| {
            if e.mask.height != cfg.canvas_h || e.mask.width != cfg.canvas_w {
                return Err(Error::shape(
                    "entity_mask",
                    format!(
                        "mask {}x{} does not match canvas {}x{}",
                        e.mask.width, e.mask.height, cfg.canvas_w, cfg.canvas_h
                    ),
                ));
            }
            Ok((e.prompt.clone(), patchify_mask(&e.mask, cfg.latent_downsample, cfg.patch_size)?))
        })
        .collect()
}

/// Full generation loop. Deterministic for a fixed request and seed.
pub fn generate<M: VelocityModel>(
    req: &GenerationRequest,
    model: &M,
    opts: &GenerateOptions,
) -> Result<GenerateOutput> {
    let cfg = model.config();
    let entities = patchify_entities(&req.entities, cfg)?;
    let sc = &req.config;

    let mut z = noise_latent(cfg, sc.seed);
    let mut captures = Vec::new();
    let mut model_calls = 0;
    for i in 0..sc.steps {
        let sigma = sc.sigmas[i];
        let sigma_prev = sc.sigmas[i + 1];

        let n_pos = if i < opts.capture_steps {
            let (v, cap) =
                model.velocity_with_capture(&z, &req.global_prompt, &entities, sigma)?;
            if let Some(cap) = cap {
                captures.push((i, cap));
            }
            v
        } else {
            model.velocity(&z, &req.global_prompt, &entities, sigma)?
        };
        model_calls += 1;
        let n_neg = model.velocity(&z, &req.negative_prompt, &[], sigma)?;
        model_calls += 1;

        let n = cfg_combine(&n_pos, &n_neg, sc.cfg_scale)?;
        z = euler_step(&z, &n, sigma, sigma_prev)?;
    }

    let image = decode_image(&z, cfg)?;
    Ok(GenerateOutput { image, final_latent: z, captures, model_calls })
}
