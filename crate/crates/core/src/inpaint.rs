//! Inpainting fusion: entity-conditioned denoising inside the mask union,
//! analytic background velocity outside it.
//!
//! Per step, the model velocity (foreground) and the closed-form background
//! velocity `(z_t - z_init) / sigma_t` are fused token-wise by the mask
//! union, guidance is applied after fusion, then the Euler update runs. At
//! guidance scale 1 the background tokens follow the straight path
//! `z_t = (1 - sigma_t) z_init + sigma_t eps` exactly, so the decoded
//! background equals the input image on block-aligned inputs.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::PatchifiedMask;
use crate::model::codec::{decode_image, encode_image, token_mask_to_cells, LatentGrid};
use crate::model::VelocityModel;
use crate::sampler::{cfg_combine, euler_step, noise_latent, patchify_entities, EntitySpec, SamplerConfig};

#[derive(Debug, Clone)]
pub struct InpaintRequest {
    pub image: Image,
    pub global_prompt: String,
    pub negative_prompt: String,
    pub entities: Vec<EntitySpec>,
    pub config: SamplerConfig,
}

/// Initial latent plus the token-space union of all inpainting masks.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub z_init: LatentGrid,
    pub union: PatchifiedMask,
}

/// Analytic background velocity `(z_t - z_init) / sigma_t`.
pub fn background_noise(z_t: &LatentGrid, z_init: &LatentGrid, sigma_t: f64) -> Result<LatentGrid> {
    if sigma_t <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "background velocity undefined at sigma {}",
            sigma_t
        )));
    }
    if z_t.numel() != z_init.numel() {
        return Err(Error::shape("background_noise", "latent sizes differ"));
    }
    let data = z_t
        .data()
        .iter()
        .zip(z_init.data())
        .map(|(&zt, &zi)| (zt - zi) / sigma_t)
        .collect();
    LatentGrid::from_data(z_t.height, z_t.width, z_t.channels, data)
}

/// Token-wise select: foreground velocity where the union mask is set,
/// background velocity elsewhere. `cell_mask` has one bit per latent cell.
fn fuse_cells(fg: &LatentGrid, bg: &LatentGrid, cell_mask: &[u8]) -> Result<LatentGrid> {
    if fg.numel() != bg.numel() {
        return Err(Error::shape("fuse", "velocity sizes differ"));
    }
    if cell_mask.len() * fg.channels != fg.numel() {
        return Err(Error::shape("fuse", "mask does not cover the latent grid"));
    }
    let mut out = LatentGrid::zeros(fg.height, fg.width, fg.channels);
    for y in 0..fg.height {
        for x in 0..fg.width {
            let bit = cell_mask[y * fg.width + x];
            for c in 0..fg.channels {
                let v = if bit == 1 { fg.get(x, y, c) } else { bg.get(x, y, c) };
                out.set(x, y, c, v);
            }
        }
    }
    Ok(out)
}

/// Token-space fuse: expands the token mask to latent cells, then selects.
pub fn fuse(
    fg: &LatentGrid,
    bg: &LatentGrid,
    union: &PatchifiedMask,
    cfg: &crate::model::config::ModelConfig,
) -> Result<LatentGrid> {
    let cells = token_mask_to_cells(union.tokens(), cfg)?;
    fuse_cells(fg, bg, &cells)
}

pub struct InpaintOutput {
    pub image: Image,
    pub final_latent: LatentGrid,
    pub state: FusionState,
    /// Max |z_0 - z_init| over latent cells outside the mask union.
    pub background_drift: f64,
    pub model_calls: usize,
    pub steps: usize,
}

/// Full inpainting loop over one denoising schedule, entity count
/// notwithstanding.
pub fn inpaint<M: VelocityModel>(req: &InpaintRequest, model: &M) -> Result<InpaintOutput> {
    let cfg = model.config();
    let entities = patchify_entities(&req.entities, cfg)?;
    let sc = &req.config;

    let z_init = encode_image(&req.image, cfg)?;
    let mut union = PatchifiedMask::zeros(cfg.n_z());
    for (_, m) in &entities {
        union = union.union(m)?;
    }
    let cell_mask = token_mask_to_cells(union.tokens(), cfg)?;

    // z_T = (1 - sigma_T) z_init + sigma_T eps with sigma_T = 1: pure noise.
    let eps = noise_latent(cfg, sc.seed);
    let sigma_top = sc.sigmas[0];
    let mut z = {
        let data = z_init
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&zi, &e)| (1.0 - sigma_top) * zi + sigma_top * e)
            .collect();
        LatentGrid::from_data(z_init.height, z_init.width, z_init.channels, data)?
    };

    let mut model_calls = 0;
    for i in 0..sc.steps {
        let sigma = sc.sigmas[i];
        let sigma_prev = sc.sigmas[i + 1];

        let n_fg = model.velocity(&z, &req.global_prompt, &entities, sigma)?;
        model_calls += 1;
        let n_bg = background_noise(&z, &z_init, sigma)?;
        let n_pos = fuse_cells(&n_fg, &n_bg, &cell_mask)?;

        let n_neg = model.velocity(&z, &req.negative_prompt, &[], sigma)?;
        model_calls += 1;

        let n = cfg_combine(&n_pos, &n_neg, sc.cfg_scale)?;
        z = euler_step(&z, &n, sigma, sigma_prev)?;
    }

    let mut background_drift = 0.0f64;
    for y in 0..z.height {
        for x in 0..z.width {
            if cell_mask[y * z.width + x] == 0 {
                for c in 0..z.channels {
                    background_drift =
                        background_drift.max((z.get(x, y, c) - z_init.get(x, y, c)).abs());
                }
            }
        }
    }

    let image = decode_image(&z, cfg)?;
    Ok(InpaintOutput {
        image,
        final_latent: z,
        state: FusionState { z_init, union },
        background_drift,
        model_calls,
        steps: sc.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::rng::NoiseRng;

    fn rand_latent(seed: u64) -> LatentGrid {
        let mut z = LatentGrid::zeros(16, 16, 3);
        NoiseRng::seed(seed).fill_normal(z.data_mut());
        z
    }

    #[test]
    fn background_noise_of_initial_state_is_zero() {
        let z = rand_latent(1);
        let n = background_noise(&z, &z, 0.7).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn background_noise_recovers_eps_minus_init() {
        // z_t = (1-sigma) z_init + sigma eps  =>  (z_t - z_init)/sigma = eps - z_init
        let z_init = rand_latent(2);
        let eps = rand_latent(3);
        for &sigma in &[0.1, 0.5, 0.93] {
            let zt: Vec<f64> = z_init
                .data()
                .iter()
                .zip(eps.data())
                .map(|(&zi, &e)| (1.0 - sigma) * zi + sigma * e)
                .collect();
            let zt = LatentGrid::from_data(16, 16, 3, zt).unwrap();
            let n = background_noise(&zt, &z_init, sigma).unwrap();
            for ((nv, e), zi) in n.data().iter().zip(eps.data()).zip(z_init.data()) {
                assert!((nv - (e - zi)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn background_noise_rejects_sigma_zero() {
        let z = rand_latent(4);
        assert!(background_noise(&z, &z, 0.0).is_err());
    }

    #[test]
    fn fuse_degenerate_unions() {
        let cfg = ModelConfig::default();
        let fg = rand_latent(5);
        let bg = rand_latent(6);
        let all = fuse(&fg, &bg, &PatchifiedMask::ones(64), &cfg).unwrap();
        assert_eq!(all.data(), fg.data());
        let none = fuse(&fg, &bg, &PatchifiedMask::zeros(64), &cfg).unwrap();
        assert_eq!(none.data(), bg.data());
    }

    #[test]
    fn fuse_matches_elementwise_reference() {
        let cfg = ModelConfig::default();
        let fg = rand_latent(7);
        let bg = rand_latent(8);
        let mut rng = NoiseRng::seed(9);
        let tokens: Vec<u8> = (0..64).map(|_| (rng.next_u64() & 1) as u8).collect();
        let union = PatchifiedMask::from_tokens(tokens.clone()).unwrap();
        let out = fuse(&fg, &bg, &union, &cfg).unwrap();
        // reference loop over latent cells
        for y in 0..16 {
            for x in 0..16 {
                let token = (y / 2) * 8 + (x / 2);
                for c in 0..3 {
                    let expect =
                        if tokens[token] == 1 { fg.get(x, y, c) } else { bg.get(x, y, c) };
                    assert_eq!(out.get(x, y, c), expect);
                }
            }
        }
    }

    #[test]
    fn fuse_is_idempotent_in_the_union() {
        let cfg = ModelConfig::default();
        let fg = rand_latent(10);
        let bg = rand_latent(11);
        let mut rng = NoiseRng::seed(12);
        let tokens: Vec<u8> = (0..64).map(|_| (rng.next_u64() & 1) as u8).collect();
        let union = PatchifiedMask::from_tokens(tokens).unwrap();
        let once = fuse(&fg, &bg, &union, &cfg).unwrap();
        let twice = fuse(&once, &bg, &union, &cfg).unwrap();
        assert_eq!(once.data(), twice.data());
    }
}
