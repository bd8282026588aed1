//! Synthetic entity-annotated training data.
//!
//! Each sample is a neutral gray canvas with 1-4 non-overlapping colored
//! shapes (square, circle, triangle in six named colors), drawn on the
//! latent-codec block grid so every image is exactly representable by the
//! codec. Entity masks are the rectangles of the shapes' tight bounding
//! boxes; local prompts are "<color> <shape>" and the global prompt is
//! their concatenation. Colors within a sample are distinct so the
//! color-keyed detector recovers every annotation exactly.

use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{BBox, PALETTE};
use crate::image::Image;
use crate::mask::EntityMask;
use crate::model::config::ModelConfig;
use crate::rng::{mix_seed, NoiseRng};

pub const SHAPES: &[&str] = &["square", "circle", "triangle"];

/// Neutral background, chosen far from every palette color.
pub const BACKGROUND_GRAY: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEntity {
    /// "<color> <shape>"
    pub prompt: String,
    /// Rectangular mask covering the shape's bounding box.
    pub mask: EntityMask,
    /// Tight bounding box of the shape's colored pixels.
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: Image,
    pub global_prompt: String,
    pub entities: Vec<SampleEntity>,
}

/// Deterministic dataset: sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(n: usize, seed: u64, cfg: &ModelConfig) -> Result<Vec<TrainingSample>> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be >= 1".into()));
    }
    (0..n).map(|i| synth_sample(mix_seed(seed, i as u64), cfg)).collect()
}

fn synth_sample(seed: u64, cfg: &ModelConfig) -> Result<TrainingSample> {
    let mut rng = NoiseRng::seed(seed);
    let block = cfg.latent_downsample;
    let (bw_max, bh_max) = (cfg.canvas_w / block, cfg.canvas_h / block);

    let mut img = Image::filled(
        cfg.canvas_w,
        cfg.canvas_h,
        cfg.channels,
        BACKGROUND_GRAY as f64 / 255.0,
    );

    let want = 1 + rng.below(4);
    // distinct colors per sample keep the detector's recovery exact
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    for i in (1..colors.len()).rev() {
        let j = rng.below(i + 1);
        colors.swap(i, j);
    }

    let mut entities = Vec::new();
    let mut taken: Vec<[usize; 4]> = Vec::new(); // block-space boxes incl. margin
    for e in 0..want {
        let (name, rgb) = PALETTE[colors[e]];
        let shape = SHAPES[rng.below(SHAPES.len())];
        // place a 3..=8 block box, margin of one block from other shapes
        let mut placed = None;
        for _ in 0..40 {
            let bw = 3 + rng.below(6);
            let bh = 3 + rng.below(6);
            if bw > bw_max || bh > bh_max {
                continue;
            }
            let bx = rng.below(bw_max - bw + 1);
            let by = rng.below(bh_max - bh + 1);
            let candidate = [bx, by, bx + bw, by + bh];
            let clear = taken.iter().all(|t| {
                candidate[2] + 1 <= t[0]
                    || t[2] + 1 <= candidate[0]
                    || candidate[3] + 1 <= t[1]
                    || t[3] + 1 <= candidate[1]
            });
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        let Some(bbox_blocks) = placed else {
            break; // canvas too crowded; keep the entities placed so far
        };
        taken.push(bbox_blocks);

        let blocks = rasterize_shape(shape, bbox_blocks);
        for &(bx, by) in &blocks {
            for py in 0..block {
                for px in 0..block {
                    img.set_rgb8(bx * block + px, by * block + py, rgb);
                }
            }
        }
        // tight box of the colored blocks, in pixels
        let x1 = blocks.iter().map(|b| b.0).min().unwrap() * block;
        let y1 = blocks.iter().map(|b| b.1).min().unwrap() * block;
        let x2 = (blocks.iter().map(|b| b.0).max().unwrap() + 1) * block;
        let y2 = (blocks.iter().map(|b| b.1).max().unwrap() + 1) * block;
        let bbox = BBox::new(x1, y1, x2, y2)?;
        let mask = EntityMask::from_rect(cfg.canvas_h, cfg.canvas_w, bbox.as_array())?;
        entities.push(SampleEntity { prompt: format!("{name} {shape}"), mask, bbox });
    }

    let global_prompt =
        entities.iter().map(|e| e.prompt.as_str()).collect::<Vec<_>>().join(" ");
    Ok(TrainingSample { image: img, global_prompt, entities })
}

/// Blocks covered by a shape inside a block-space box `[x1, y1, x2, y2)`.
/// Every shape is 4-connected and touches at least one block.
fn rasterize_shape(shape: &str, b: [usize; 4]) -> Vec<(usize, usize)> {
    let [x1, y1, x2, y2] = b;
    let (w, h) = (x2 - x1, y2 - y1);
    let mut out = Vec::new();
    match shape {
        "circle" => {
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            let rx = w as f64 / 2.0 - 0.25;
            let ry = h as f64 / 2.0 - 0.25;
            for j in 0..h {
                for i in 0..w {
                    let dx = (i as f64 - cx) / rx;
                    let dy = (j as f64 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        out.push((x1 + i, y1 + j));
                    }
                }
            }
        }
        "triangle" => {
            // isoceles: apex on the top row, base on the bottom row
            let apex = (w as f64 - 1.0) / 2.0;
            for j in 0..h {
                let t = if h == 1 { 1.0 } else { j as f64 / (h - 1) as f64 };
                let half = t * (w as f64) / 2.0;
                for i in 0..w {
                    if (i as f64 - apex).abs() <= half.max(0.5) {
                        out.push((x1 + i, y1 + j));
                    }
                }
            }
        }
        _ => {
            for j in 0..h {
                for i in 0..w {
                    out.push((x1 + i, y1 + j));
                }
            }
        }
    }
    out
}

// ── JSON-lines serialization ─────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct EntityRow {
    prompt: String,
    bbox: [usize; 4],
    mask_pgm: String,
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    image_ppm: String,
    global_prompt: String,
    entities: Vec<EntityRow>,
}

/// Write `dataset.jsonl` (one sample per line, base64 PPM image, prompts,
/// rectangles) plus sidecar PGM masks under `masks/`.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[TrainingSample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join("dataset.jsonl"))?);
    for (i, s) in samples.iter().enumerate() {
        let mut entities = Vec::new();
        for (e, ent) in s.entities.iter().enumerate() {
            let rel = format!("masks/{i:05}_{e}.pgm");
            let mut pgm = crate::image::GrayImage::new(ent.mask.width, ent.mask.height);
            for y in 0..ent.mask.height {
                for x in 0..ent.mask.width {
                    pgm.set(x, y, ent.mask.get(x, y) * 255);
                }
            }
            crate::image::write_pgm(dir.join(&rel), &pgm)?;
            entities.push(EntityRow {
                prompt: ent.prompt.clone(),
                bbox: ent.bbox.as_array(),
                mask_pgm: rel,
            });
        }
        let row = SampleRow {
            image_ppm: BASE64.encode(crate::image::encode_ppm(&s.image)?),
            global_prompt: s.global_prompt.clone(),
            entities,
        };
        serde_json::to_writer(&mut file, &row)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a dataset directory written by [`save_dataset`]. Masks come from
/// the sidecar PGMs when present, otherwise from the stored rectangles.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    let dir = dir.as_ref();
    let file = std::io::BufReader::new(std::fs::File::open(dir.join("dataset.jsonl"))?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SampleRow = serde_json::from_str(&line)?;
        let ppm = BASE64
            .decode(row.image_ppm.as_bytes())
            .map_err(|e| Error::Format(format!("bad base64 image: {e}")))?;
        let image = crate::image::decode_ppm(&ppm)?;
        let mut entities = Vec::new();
        for e in row.entities {
            let bbox = BBox::new(e.bbox[0], e.bbox[1], e.bbox[2], e.bbox[3])?;
            let mask_path = dir.join(&e.mask_pgm);
            let mask = if mask_path.exists() {
                EntityMask::from_pgm(&crate::image::read_pgm(mask_path)?)
            } else {
                EntityMask::from_rect(image.height, image.width, bbox.as_array())?
            };
            entities.push(SampleEntity { prompt: e.prompt, mask, bbox });
        }
        out.push(TrainingSample { image, global_prompt: row.global_prompt, entities });
    }
    Ok(out)
}
