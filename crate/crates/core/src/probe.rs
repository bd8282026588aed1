//! Layout-activation measurement: how well generated entities land on
//! their requested boxes, before and after adapter training.
//!
//! A probe item is a single-entity request with a known target box. For
//! each item and seed the image is generated, the entity's color is
//! detected, and the IoU against the target recorded (detection failure
//! counts as zero).

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evalkit::{color_rgb, detect_blob, iou, BBox, PALETTE};
use crate::lora::LoRAAdapter;
use crate::mask::EntityMask;
use crate::model::config::ModelConfig;
use crate::model::{AdaptedModel, VelocityModel};
use crate::model::weights::ModelWeights;
use crate::rng::{mix_seed, NoiseRng};
use crate::sampler::{generate, EntitySpec, GenerateOptions, GenerationRequest, SamplerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeItem {
    /// Local prompt, also used as the global prompt ("<color> <shape>").
    pub prompt: String,
    pub color: String,
    pub target: BBox,
}

/// Deterministic single-entity probe set on the block grid.
pub fn probe_set(n: usize, seed: u64, cfg: &ModelConfig) -> Result<Vec<ProbeItem>> {
    let shapes = crate::dataset::SHAPES;
    let block = cfg.latent_downsample;
    let (bw_max, bh_max) = (cfg.canvas_w / block, cfg.canvas_h / block);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = NoiseRng::seed(mix_seed(seed, i as u64));
        let (color, _) = PALETTE[rng.below(PALETTE.len())];
        let shape = shapes[rng.below(shapes.len())];
        let bw = 4 + rng.below(5); // 4..=8 blocks
        let bh = 4 + rng.below(5);
        let bx = rng.below(bw_max - bw + 1);
        let by = rng.below(bh_max - bh + 1);
        out.push(ProbeItem {
            prompt: format!("{color} {shape}"),
            color: color.to_string(),
            target: BBox::new(bx * block, by * block, (bx + bw) * block, (by + bh) * block)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeItemResult {
    pub prompt: String,
    pub target: BBox,
    /// One IoU per seed; detection failures are zero.
    pub ious: Vec<f64>,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub per_item: Vec<ProbeItemResult>,
    pub mean_iou: f64,
    /// Mean over items of the IoU variance across seeds.
    pub mean_seed_variance: f64,
    pub seed_count: usize,
}

/// Evaluate one probe item under one seed.
pub fn probe_one<M: VelocityModel>(
    model: &M,
    item: &ProbeItem,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<f64> {
    let cfg = model.config();
    let request = GenerationRequest {
        global_prompt: item.prompt.clone(),
        negative_prompt: String::new(),
        entities: vec![EntitySpec {
            prompt: item.prompt.clone(),
            mask: EntityMask::from_rect(cfg.canvas_h, cfg.canvas_w, item.target.as_array())?,
        }],
        config: SamplerConfig::linear(steps, cfg_scale, seed)?,
    };
    let out = generate(&request, model, &GenerateOptions::default())?;
    let rgb = color_rgb(&item.color)
        .ok_or_else(|| crate::error::Error::InvalidInput(format!("unknown color {}", item.color)))?;
    Ok(match detect_blob(&out.image, rgb) {
        Some(found) => iou(&found, &item.target),
        None => 0.0,
    })
}

/// Run the probe set across seeds for one model configuration (with or
/// without an adapter) and aggregate.
pub fn layout_activation_probe(
    weights: &ModelWeights,
    adapter: Option<&LoRAAdapter>,
    items: &[ProbeItem],
    seeds: &[u64],
    steps: usize,
    cfg_scale: f64,
) -> Result<ProbeOutcome> {
    let model = AdaptedModel::new(weights, adapter);
    let mut per_item = Vec::with_capacity(items.len());
    for item in items {
        let mut ious = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            ious.push(probe_one(&model, item, steps, cfg_scale, seed)?);
        }
        let mean = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
        per_item.push(ProbeItemResult {
            prompt: item.prompt.clone(),
            target: item.target,
            ious,
            mean_iou: mean,
        });
    }
    Ok(summarize(per_item, seeds.len()))
}

pub fn summarize(per_item: Vec<ProbeItemResult>, seed_count: usize) -> ProbeOutcome {
    let mean_iou = per_item.iter().map(|r| r.mean_iou).sum::<f64>() / per_item.len().max(1) as f64;
    let mean_seed_variance = per_item
        .iter()
        .map(|r| {
            let m = r.mean_iou;
            r.ious.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / r.ious.len().max(1) as f64
        })
        .sum::<f64>()
        / per_item.len().max(1) as f64;
    ProbeOutcome { per_item, mean_iou, mean_seed_variance, seed_count }
}
