//! Property tests over the structural invariants.

use proptest::collection::vec;
use proptest::prelude::*;

use entitygen_core::evalkit::{iou, BBox};
use entitygen_core::image::{decode_ppm, encode_ppm, Image};
use entitygen_core::mask::{compose, PatchifiedMask};
use entitygen_core::model::codec::{decode_image, encode_image, patchify, unpatchify, LatentGrid};
use entitygen_core::model::config::ModelConfig;
use entitygen_core::tensor::Tensor;

fn patch_masks(k: usize, n_z: usize) -> impl Strategy<Value = Vec<PatchifiedMask>> {
    vec(vec(0u8..=1u8, n_z), k)
        .prop_map(|ms| ms.into_iter().map(|m| PatchifiedMask::from_tokens(m).unwrap()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composed_mask_symmetry_diagonal_and_size(
        k in 0usize..=4,
        seed_masks in patch_masks(4, 16),
    ) {
        let masks = &seed_masks[..k];
        let m = compose(masks, 4, 16).unwrap();
        prop_assert_eq!(m.n_r(), (k + 1) * 4 + 16);
        for a in 0..m.n_r() {
            prop_assert_eq!(m.get(a, a), 1);
            for b in 0..a {
                prop_assert_eq!(m.get(a, b), m.get(b, a));
            }
        }
    }

    #[test]
    fn latent_rows_see_global_latent_and_masked_entities(
        k in 1usize..=4,
        seed_masks in patch_masks(4, 16),
    ) {
        let masks = &seed_masks[..k];
        let m = compose(masks, 4, 16).unwrap();
        let latent0 = (k + 1) * 4;
        for t in 0..16 {
            let row = latent0 + t;
            for c in 0..4 {
                prop_assert_eq!(m.get(row, c), 1); // global block
            }
            for c in latent0..m.n_r() {
                prop_assert_eq!(m.get(row, c), 1); // latent block
            }
            for (slot, em) in masks.iter().enumerate() {
                for c in (slot + 1) * 4..(slot + 2) * 4 {
                    prop_assert_eq!(m.get(row, c), em.tokens()[t]);
                }
            }
        }
    }

    #[test]
    fn iou_symmetry_and_identity(
        ax in 0usize..50, ay in 0usize..50, aw in 1usize..14, ah in 1usize..14,
        bx in 0usize..50, by in 0usize..50, bw in 1usize..14, bh in 1usize..14,
    ) {
        let a = BBox::new(ax, ay, ax + aw, ay + ah).unwrap();
        let b = BBox::new(bx, by, bx + bw, by + bh).unwrap();
        prop_assert_eq!(iou(&a, &b).to_bits(), iou(&b, &a).to_bits());
        prop_assert_eq!(iou(&a, &a), 1.0);
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn block_aligned_images_roundtrip_the_codec(cells in vec(0u8..=255u8, 16 * 16 * 3)) {
        let cfg = ModelConfig::default();
        let mut img = Image::new(64, 64, 3);
        for ly in 0..16 {
            for lx in 0..16 {
                for c in 0..3 {
                    let v = cells[(ly * 16 + lx) * 3 + c] as f64 / 255.0;
                    for py in 0..4 {
                        for px in 0..4 {
                            img.set(lx * 4 + px, ly * 4 + py, c, v);
                        }
                    }
                }
            }
        }
        let lat = encode_image(&img, &cfg).unwrap();
        let back = decode_image(&lat, &cfg).unwrap();
        prop_assert_eq!(back.data(), img.data());
    }

    #[test]
    fn patchify_roundtrip_is_exact(values in vec(-1.0f64..1.0, 16 * 16 * 3)) {
        let cfg = ModelConfig::default();
        let lat = LatentGrid::from_data(16, 16, 3, values).unwrap();
        let tokens = patchify(&lat, &cfg).unwrap();
        let back = unpatchify(&tokens, &cfg).unwrap();
        prop_assert_eq!(back.data(), lat.data());
    }

    #[test]
    fn ppm_bytes_roundtrip(pixels in vec(0u8..=255u8, 6 * 4 * 3)) {
        let img = Image::from_bytes(6, 4, 3, &pixels).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn softmax_rows_sum_to_one_or_zero(rows in vec(vec(-30.0f64..30.0, 5), 1..6)) {
        let r = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        let t = Tensor::new(vec![r, 5], data).unwrap();
        let s = t.softmax_lastdim().unwrap();
        for i in 0..r {
            let sum: f64 = s.data()[i * 5..(i + 1) * 5].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
