//! Placement evaluation: IoU, color-keyed blob detection, attention-map
//! statistics, and heatmap export.
//!
//! The detector is deterministic and color-keyed rather than learned: on
//! the synthetic shape domain it is exact, so placement measurements carry
//! no detector noise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Image};
use crate::mask::PatchifiedMask;
use crate::tensor::Tensor;

/// Pixel-space axis-aligned box, inclusive-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidInput(format!(
                "degenerate box ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    if ix1 >= ix2 || iy1 >= iy2 {
        return 0.0;
    }
    let inter = ((ix2 - ix1) * (iy2 - iy1)) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    inter / union
}

/// Named colors shared by the synthetic dataset and the detector.
pub const PALETTE: &[(&str, [u8; 3])] = &[
    ("red", [230, 40, 40]),
    ("green", [40, 200, 70]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 220, 50]),
    ("magenta", [210, 60, 210]),
    ("cyan", [60, 210, 210]),
];

pub fn color_rgb(name: &str) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Pixels closer than this (Euclidean RGB distance) count as the target
/// color.
pub const COLOR_DISTANCE_THRESHOLD: f64 = 90.0;

/// Components smaller than this are ignored.
pub const MIN_BLOB_PIXELS: usize = 12;

/// Tight bounding box of the largest 4-connected component of pixels near
/// `color`. `None` when no component reaches the minimum size.
pub fn detect_blob(image: &Image, color: [u8; 3]) -> Option<BBox> {
    let (w, h) = (image.width, image.height);
    let mut hit = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut dist_sq = 0.0;
            for c in 0..3 {
                let v = image.get(x, y, c) * 255.0;
                let d = v - color[c] as f64;
                dist_sq += d * d;
            }
            hit[y * w + x] = dist_sq.sqrt() <= COLOR_DISTANCE_THRESHOLD;
        }
    }

    let mut visited = vec![false; w * h];
    let mut best: Option<(usize, BBox)> = None;
    let mut queue = Vec::new();
    for start in 0..w * h {
        if !hit[start] || visited[start] {
            continue;
        }
        // BFS flood fill
        queue.clear();
        queue.push(start);
        visited[start] = true;
        let (mut count, mut x1, mut y1, mut x2, mut y2) =
            (0usize, usize::MAX, usize::MAX, 0usize, 0usize);
        let mut head = 0;
        while head < queue.len() {
            let p = queue[head];
            head += 1;
            count += 1;
            let (x, y) = (p % w, p / w);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
            let mut push = |np: usize| {
                if hit[np] && !visited[np] {
                    visited[np] = true;
                    queue.push(np);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        if count >= MIN_BLOB_PIXELS {
            let bbox = BBox { x1, y1, x2, y2 };
            match &best {
                Some((best_count, _)) if *best_count >= count => {}
                _ => best = Some((count, bbox)),
            }
        }
    }
    best.map(|(_, b)| b)
}

/// Fraction of attention mass inside the mask: sum of weights at active
/// tokens over the total sum, defined as 1.0 when the total is zero.
pub fn attention_inmask_fraction(map: &Tensor, mask: &PatchifiedMask) -> Result<f64> {
    if map.numel() != mask.len() {
        return Err(Error::shape(
            "attention_inmask_fraction",
            format!("map of {} vs mask of {}", map.numel(), mask.len()),
        ));
    }
    let mut total = 0.0;
    let mut inside = 0.0;
    for (&w, &bit) in map.data().iter().zip(mask.tokens()) {
        total += w;
        if bit == 1 {
            inside += w;
        }
    }
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(inside / total)
}

/// Min-max normalized grayscale heatmap, nearest-upsampled to the target
/// canvas. A constant map renders mid-gray.
pub fn heatmap_image(map: &Tensor, canvas_w: usize, canvas_h: usize) -> Result<GrayImage> {
    if map.shape().len() != 2 {
        return Err(Error::shape("heatmap", "expected a 2-d map"));
    }
    if !map.all_finite() {
        return Err(Error::NonFinite { op: "heatmap" });
    }
    let (gh, gw) = (map.shape()[0], map.shape()[1]);
    if gh == 0 || gw == 0 || canvas_h % gh != 0 || canvas_w % gw != 0 {
        return Err(Error::shape("heatmap", "canvas not divisible by map grid"));
    }
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let (sy, sx) = (canvas_h / gh, canvas_w / gw);
    let mut img = GrayImage::new(canvas_w, canvas_h);
    for y in 0..canvas_h {
        for x in 0..canvas_w {
            let v = map.data()[(y / sy) * gw + (x / sx)];
            let norm = if range == 0.0 { 0.5 } else { (v - lo) / range };
            img.set(x, y, (norm * 255.0).round() as u8);
        }
    }
    Ok(img)
}

pub fn heatmap_export(
    map: &Tensor,
    canvas_w: usize,
    canvas_h: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let img = heatmap_image(map, canvas_w, canvas_h)?;
    crate::image::write_pgm(path, &img)
}

/// Per-entity placement report. External model-based scores are not
/// computable here; the `external` map holds them if merged from
/// elsewhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_entity_iou: Vec<f64>,
    pub mean_iou: f64,
    pub attention_inmask_fractions: Vec<f64>,
    pub seed_count: usize,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub external: serde_json::Map<String, serde_json::Value>,
}

impl EvalReport {
    pub fn from_ious(ious: Vec<f64>, fractions: Vec<f64>, seed_count: usize) -> Self {
        let mean_iou = if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        };
        EvalReport {
            per_entity_iou: ious,
            mean_iou,
            attention_inmask_fractions: fractions,
            seed_count,
            external: serde_json::Map::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_and_disjoint() {
        let a = BBox::new(0, 0, 4, 4).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(10, 10, 14, 14).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_brute_force_pixel_count() {
        let a = BBox::new(0, 0, 4, 4).unwrap();
        let b = BBox::new(2, 0, 6, 4).unwrap();
        // count pixels by brute force
        let mut inter = 0;
        let mut union = 0;
        for y in 0..8 {
            for x in 0..8 {
                let in_a = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
                let in_b = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
                inter += usize::from(in_a && in_b);
                union += usize::from(in_a || in_b);
            }
        }
        assert_eq!(iou(&a, &b), inter as f64 / union as f64);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric() {
        let a = BBox::new(1, 2, 9, 7).unwrap();
        let b = BBox::new(4, 0, 12, 5).unwrap();
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    fn gray_canvas() -> Image {
        Image::filled(64, 64, 3, 128.0 / 255.0)
    }

    #[test]
    fn detect_single_square_exactly() {
        let mut img = gray_canvas();
        for y in 8..24 {
            for x in 16..40 {
                img.set_rgb8(x, y, color_rgb("red").unwrap());
            }
        }
        let b = detect_blob(&img, color_rgb("red").unwrap()).unwrap();
        assert_eq!(b, BBox::new(16, 8, 40, 24).unwrap());
    }

    #[test]
    fn detect_nothing_on_empty_canvas() {
        assert!(detect_blob(&gray_canvas(), color_rgb("red").unwrap()).is_none());
    }

    /// Exhaustive component labeling over all pixels, as an independent
    /// reference for the largest-component choice.
    fn largest_component_oracle(img: &Image, color: [u8; 3]) -> Option<(usize, BBox)> {
        let (w, h) = (img.width, img.height);
        let near = |x: usize, y: usize| {
            let mut d = 0.0;
            for c in 0..3 {
                let v = img.get(x, y, c) * 255.0 - color[c] as f64;
                d += v * v;
            }
            d.sqrt() <= COLOR_DISTANCE_THRESHOLD
        };
        let mut label = vec![usize::MAX; w * h];
        let mut next = 0usize;
        let mut sizes = Vec::new();
        let mut boxes: Vec<BBox> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !near(x, y) || label[y * w + x] != usize::MAX {
                    continue;
                }
                let id = next;
                next += 1;
                sizes.push(0usize);
                boxes.push(BBox { x1: x, y1: y, x2: x + 1, y2: y + 1 });
                let mut stack = vec![(x, y)];
                label[y * w + x] = id;
                while let Some((cx, cy)) = stack.pop() {
                    sizes[id] += 1;
                    let b = &mut boxes[id];
                    b.x1 = b.x1.min(cx);
                    b.y1 = b.y1.min(cy);
                    b.x2 = b.x2.max(cx + 1);
                    b.y2 = b.y2.max(cy + 1);
                    let mut try_push = |nx: usize, ny: usize| {
                        if near(nx, ny) && label[ny * w + nx] == usize::MAX {
                            label[ny * w + nx] = id;
                            stack.push((nx, ny));
                        }
                    };
                    if cx > 0 {
                        try_push(cx - 1, cy);
                    }
                    if cx + 1 < w {
                        try_push(cx + 1, cy);
                    }
                    if cy > 0 {
                        try_push(cx, cy - 1);
                    }
                    if cy + 1 < h {
                        try_push(cx, cy + 1);
                    }
                }
            }
        }
        (0..next)
            .filter(|&i| sizes[i] >= MIN_BLOB_PIXELS)
            .max_by_key(|&i| sizes[i])
            .map(|i| (sizes[i], boxes[i]))
    }

    #[test]
    fn two_regions_pick_the_larger_matching_oracle() {
        let mut img = gray_canvas();
        let red = color_rgb("red").unwrap();
        for y in 4..10 {
            for x in 4..10 {
                img.set_rgb8(x, y, red); // 36 px
            }
        }
        for y in 30..50 {
            for x in 20..52 {
                img.set_rgb8(x, y, red); // 640 px
            }
        }
        let got = detect_blob(&img, red).unwrap();
        let (_, expect) = largest_component_oracle(&img, red).unwrap();
        assert_eq!(got, expect);
        assert_eq!(got, BBox::new(20, 30, 52, 50).unwrap());
    }

    #[test]
    fn tiny_specks_are_ignored() {
        let mut img = gray_canvas();
        img.set_rgb8(5, 5, color_rgb("blue").unwrap());
        assert!(detect_blob(&img, color_rgb("blue").unwrap()).is_none());
    }

    #[test]
    fn inmask_fraction_basics() {
        let mask = PatchifiedMask::from_tokens(
            (0..64).map(|i| u8::from(i < 32)).collect(),
        )
        .unwrap();
        let uniform = Tensor::filled(vec![8, 8], 0.5);
        assert_eq!(attention_inmask_fraction(&uniform, &mask).unwrap(), 0.5);
        let zero = Tensor::zeros(vec![8, 8]);
        assert_eq!(attention_inmask_fraction(&zero, &mask).unwrap(), 1.0);
    }

    #[test]
    fn heatmap_constant_is_mid_gray() {
        let map = Tensor::filled(vec![8, 8], 3.0);
        let img = heatmap_image(&map, 64, 64).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn heatmap_delta_is_single_white_block() {
        let mut map = Tensor::zeros(vec![8, 8]);
        map.data_mut()[9] = 1.0; // token (1,1)
        let img = heatmap_image(&map, 64, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let expect = if (8..16).contains(&x) && (8..16).contains(&y) { 255 } else { 0 };
                assert_eq!(img.get(x, y), expect, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn heatmap_file_roundtrip_matches_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let mut map = Tensor::zeros(vec![4, 4]);
        for (i, v) in map.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        heatmap_export(&map, 16, 16, &path).unwrap();
        let written = std::fs::read(&path).unwrap();
        let img = heatmap_image(&map, 16, 16).unwrap();
        assert_eq!(written, crate::image::encode_pgm(&img));
    }

    #[test]
    fn report_mean_matches_recomputation() {
        let report = EvalReport::from_ious(vec![0.25, 0.5, 1.0], vec![], 3);
        let recomputed: f64 =
            report.per_entity_iou.iter().sum::<f64>() / report.per_entity_iou.len() as f64;
        assert!((report.mean_iou - recomputed).abs() < 1e-12);
    }
}
