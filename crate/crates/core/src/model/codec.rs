//! Exact latent codec and patchify/unpatchify.
//!
//! The encoder takes per-channel block means over
//! `latent_downsample x latent_downsample` pixel cells; the decoder fills
//! each block back with its latent value. On block-constant images the
//! round trip is exact: constant blocks short-circuit to the shared value,
//! other blocks sum in row-major order, so results never depend on thread
//! count.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::config::ModelConfig;
use crate::tensor::Tensor;

/// Latent image: `latent_h x latent_w x channels` grid of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        LatentGrid { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("latent_grid", "data length does not match dimensions"));
        }
        Ok(LatentGrid { height, width, channels, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Elementwise `self + other * scale`.
    pub fn axpy(&self, other: &LatentGrid, scale: f64) -> Result<LatentGrid> {
        if self.data.len() != other.data.len() {
            return Err(Error::shape("latent_axpy", "sizes differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b * scale).collect();
        LatentGrid::from_data(self.height, self.width, self.channels, data)
    }
}

/// Block-mean encode: each latent cell is the mean of its pixel block,
/// per channel.
pub fn encode_image(img: &Image, cfg: &ModelConfig) -> Result<LatentGrid> {
    if img.width != cfg.canvas_w || img.height != cfg.canvas_h || img.channels != cfg.channels {
        return Err(Error::shape(
            "encode_image",
            format!(
                "image {}x{}x{} does not match canvas {}x{}x{}",
                img.width, img.height, img.channels, cfg.canvas_w, cfg.canvas_h, cfg.channels
            ),
        ));
    }
    let ds = cfg.latent_downsample;
    let (lh, lw) = (cfg.latent_h(), cfg.latent_w());
    let mut lat = LatentGrid::zeros(lh, lw, cfg.channels);
    for ly in 0..lh {
        for lx in 0..lw {
            for c in 0..cfg.channels {
                let first = img.get(lx * ds, ly * ds, c);
                let mut constant = true;
                let mut sum = 0.0;
                for py in 0..ds {
                    for px in 0..ds {
                        let v = img.get(lx * ds + px, ly * ds + py, c);
                        constant &= v == first;
                        sum += v;
                    }
                }
                // Constant blocks take the exact shared value so the
                // decode(encode(x)) round trip is bit-exact on them.
                let mean = if constant { first } else { sum / (ds * ds) as f64 };
                lat.set(lx, ly, c, mean);
            }
        }
    }
    Ok(lat)
}

/// Block-fill decode: every pixel of a block takes its latent value.
pub fn decode_image(lat: &LatentGrid, cfg: &ModelConfig) -> Result<Image> {
    if lat.width != cfg.latent_w() || lat.height != cfg.latent_h() || lat.channels != cfg.channels {
        return Err(Error::shape("decode_image", "latent dims do not match config"));
    }
    let ds = cfg.latent_downsample;
    let mut img = Image::new(cfg.canvas_w, cfg.canvas_h, cfg.channels);
    for y in 0..cfg.canvas_h {
        for x in 0..cfg.canvas_w {
            for c in 0..cfg.channels {
                img.set(x, y, c, lat.get(x / ds, y / ds, c));
            }
        }
    }
    Ok(img)
}

/// Fold `patch_size x patch_size` latent cells into one token row; tokens
/// are ordered row-major over the patch grid, features ordered
/// `(cell_y, cell_x, channel)`. Exact inverse of [`unpatchify`].
pub fn patchify(lat: &LatentGrid, cfg: &ModelConfig) -> Result<Tensor> {
    if lat.width != cfg.latent_w() || lat.height != cfg.latent_h() || lat.channels != cfg.channels {
        return Err(Error::shape("patchify", "latent dims do not match config"));
    }
    let ps = cfg.patch_size;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let d = cfg.d_latent();
    let mut data = vec![0.0; gh * gw * d];
    for ty in 0..gh {
        for tx in 0..gw {
            let token = ty * gw + tx;
            let mut f = 0;
            for py in 0..ps {
                for px in 0..ps {
                    for c in 0..cfg.channels {
                        data[token * d + f] = lat.get(tx * ps + px, ty * ps + py, c);
                        f += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, d], data)
}

pub fn unpatchify(tokens: &Tensor, cfg: &ModelConfig) -> Result<LatentGrid> {
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let d = cfg.d_latent();
    if tokens.shape() != [gh * gw, d] {
        return Err(Error::shape(
            "unpatchify",
            format!("tokens {:?} do not match grid {}x{} with d_latent {}", tokens.shape(), gh, gw, d),
        ));
    }
    let ps = cfg.patch_size;
    let mut lat = LatentGrid::zeros(cfg.latent_h(), cfg.latent_w(), cfg.channels);
    for ty in 0..gh {
        for tx in 0..gw {
            let token = ty * gw + tx;
            let mut f = 0;
            for py in 0..ps {
                for px in 0..ps {
                    for c in 0..cfg.channels {
                        lat.set(tx * ps + px, ty * ps + py, c, tokens.data()[token * d + f]);
                        f += 1;
                    }
                }
            }
        }
    }
    Ok(lat)
}

/// Expand a token-space mask (one bit per patch token) to latent cells.
pub fn token_mask_to_cells(bits: &[u8], cfg: &ModelConfig) -> Result<Vec<u8>> {
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    if bits.len() != gh * gw {
        return Err(Error::shape("token_mask_to_cells", "token count mismatch"));
    }
    let ps = cfg.patch_size;
    let (lh, lw) = (cfg.latent_h(), cfg.latent_w());
    let mut cells = vec![0u8; lh * lw];
    for ly in 0..lh {
        for lx in 0..lw {
            cells[ly * lw + lx] = bits[(ly / ps) * gw + (lx / ps)];
        }
    }
    Ok(cells)
}
