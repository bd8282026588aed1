//! Scratch harness: measure training speed and layout-activation quality
//! under different hyperparameters.

use std::time::Instant;

use entitygen_core::dataset::synth_dataset;
use entitygen_core::model::config::ModelConfig;
use entitygen_core::model::weights::ModelWeights;
use entitygen_core::probe::{layout_activation_probe, probe_set};
use entitygen_core::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let rank: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let alpha: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8.0);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let probe_cfg: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let probe_steps: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(10);
    let n_items: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(10);
    let n_data: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(5000);

    let cfg = ModelConfig::default();
    let weights = ModelWeights::init(cfg.clone(), 42).unwrap();
    let t0 = Instant::now();
    let data = synth_dataset(n_data, 7, &cfg).unwrap();
    println!("dataset: {} samples in {:.1?}", data.len(), t0.elapsed());

    let config = TrainConfig {
        steps,
        rank,
        alpha,
        learning_rate: lr,
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let outcome = train(&weights, &data, &config).unwrap();
    let dt = t0.elapsed();
    println!(
        "train: {} steps in {:.1?} ({:.0} ms/step)",
        steps,
        dt,
        dt.as_millis() as f64 / steps as f64
    );
    let chunk = (steps / 10).max(1);
    for (i, c) in outcome.losses.chunks(chunk).enumerate() {
        let mean: f64 = c.iter().sum::<f64>() / c.len() as f64;
        println!("  loss[{:4}..]: {:.4}", i * chunk, mean);
    }

    let items = probe_set(n_items, 99, &cfg).unwrap();
    let seeds: Vec<u64> = (0..2).collect();
    let t0 = Instant::now();
    let untrained =
        layout_activation_probe(&weights, None, &items, &seeds, probe_steps, probe_cfg).unwrap();
    let trained =
        layout_activation_probe(&weights, Some(&outcome.adapter), &items, &seeds, probe_steps, probe_cfg)
            .unwrap();
    println!("probe: {:.1?}", t0.elapsed());
    println!(
        "untrained mean IoU {:.3} (seed var {:.4})",
        untrained.mean_iou, untrained.mean_seed_variance
    );
    println!(
        "trained   mean IoU {:.3} (seed var {:.4})",
        trained.mean_iou, trained.mean_seed_variance
    );
    let mut ordered = 0;
    for (u, t) in untrained.per_item.iter().zip(&trained.per_item) {
        println!(
            "  {:24} target {:?} untrained {:.3} trained {:.3}",
            u.prompt,
            u.target.as_array(),
            u.mean_iou,
            t.mean_iou
        );
        if t.mean_iou > u.mean_iou {
            ordered += 1;
        }
    }
    println!("ordering holds on {}/{} items", ordered, untrained.per_item.len());

    // dump images of the first few probes for eyeballing
    use entitygen_core::mask::EntityMask;
    use entitygen_core::model::AdaptedModel;
    use entitygen_core::sampler::{generate, EntitySpec, GenerateOptions, GenerationRequest, SamplerConfig};
    std::fs::create_dir_all("/tmp/calib").unwrap();
    for (i, item) in items.iter().take(4).enumerate() {
        for (tag, adapter) in [("untrained", None), ("trained", Some(&outcome.adapter))] {
            let model = AdaptedModel::new(&weights, adapter);
            let req = GenerationRequest {
                global_prompt: item.prompt.clone(),
                negative_prompt: String::new(),
                entities: vec![EntitySpec {
                    prompt: item.prompt.clone(),
                    mask: EntityMask::from_rect(64, 64, item.target.as_array()).unwrap(),
                }],
                config: SamplerConfig::linear(probe_steps, probe_cfg, 1).unwrap(),
            };
            let out = generate(&req, &model, &GenerateOptions::default()).unwrap();
            let path = format!("/tmp/calib/{i}_{tag}_{}.ppm", item.prompt.replace(' ', "_"));
            entitygen_core::image::write_ppm(&path, &out.image).unwrap();
            // quick stats: mean rgb inside vs outside target
            let tgt = item.target;
            let (mut in_sum, mut out_sum) = ([0.0; 3], [0.0; 3]);
            let (mut n_in, mut n_out) = (0.0, 0.0);
            for y in 0..64 {
                for x in 0..64 {
                    let inside = x >= tgt.x1 && x < tgt.x2 && y >= tgt.y1 && y < tgt.y2;
                    for c in 0..3 {
                        if inside {
                            in_sum[c] += out.image.get(x, y, c);
                        } else {
                            out_sum[c] += out.image.get(x, y, c);
                        }
                    }
                    if inside {
                        n_in += 1.0;
                    } else {
                        n_out += 1.0;
                    }
                }
            }
            println!(
                "  img {} {}: inside rgb ({:.2},{:.2},{:.2}) outside ({:.2},{:.2},{:.2})",
                i,
                tag,
                in_sum[0] / n_in,
                in_sum[1] / n_in,
                in_sum[2] / n_in,
                out_sum[0] / n_out,
                out_sum[1] / n_out,
                out_sum[2] / n_out
            );
        }
    }
}
