//! Attention visibility masks for entity-conditioned joint attention.
//!
//! An entity is a local prompt plus a binary spatial mask at canvas
//! resolution. Masks are patchified with the same spatial layout as the
//! latent tokens, then composed into one symmetric `N_r x N_r` visibility
//! matrix over the token sequence
//! `[global prompt | entity 1 prompt | ... | entity k prompt | latent]`
//! with `N_r = (k+1)*n_p + n_z`.
//!
//! Composition rules:
//! - prompt block i with itself: visible (a prompt attends to its own tokens)
//! - prompt block i with prompt block j, i != j: hidden, so no semantic
//!   leakage between entities (the global prompt counts as entity 0 with an
//!   all-ones spatial mask)
//! - prompt block i with latent token t: the entity's patchified mask bit
//! - latent with latent: visible

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::{Tensor, MASK_SENTINEL};

/// Binary spatial mask at canvas resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMask {
    pub height: usize,
    pub width: usize,
    bits: Vec<u8>,
}

impl EntityMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        EntityMask { height, width, bits: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        EntityMask { height, width, bits: vec![1; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape("entity_mask", "bit count does not match dimensions"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidInput("entity mask bits must be 0 or 1".into()));
        }
        Ok(EntityMask { height, width, bits })
    }

    /// Rasterize an axis-aligned rectangle `[x1, y1, x2, y2)` (inclusive-
    /// exclusive) onto the canvas.
    pub fn from_rect(height: usize, width: usize, rect: [usize; 4]) -> Result<Self> {
        let [x1, y1, x2, y2] = rect;
        if x1 >= x2 || y1 >= y2 || x2 > width || y2 > height {
            return Err(Error::InvalidInput(format!(
                "rectangle {:?} is empty or outside the {}x{} canvas",
                rect, width, height
            )));
        }
        let mut m = EntityMask::zeros(height, width);
        for y in y1..y2 {
            for x in x1..x2 {
                m.bits[y * width + x] = 1;
            }
        }
        Ok(m)
    }

    /// Read a PGM as a mask: pixels at or above 128 are active.
    pub fn from_pgm(img: &GrayImage) -> Self {
        let bits = img.pixels.iter().map(|&p| u8::from(p >= 128)).collect();
        EntityMask { height: img.height, width: img.width, bits }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, bit: u8) {
        self.bits[y * self.width + x] = bit;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Entity mask pooled down to latent-token resolution, aligned with the
/// row-major latent patchify ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchifiedMask {
    tokens: Vec<u8>,
}

impl PatchifiedMask {
    pub fn ones(n_z: usize) -> Self {
        PatchifiedMask { tokens: vec![1; n_z] }
    }

    pub fn zeros(n_z: usize) -> Self {
        PatchifiedMask { tokens: vec![0; n_z] }
    }

    pub fn from_tokens(tokens: Vec<u8>) -> Result<Self> {
        if tokens.iter().any(|&b| b > 1) {
            return Err(Error::InvalidInput("patchified mask bits must be 0 or 1".into()));
        }
        Ok(PatchifiedMask { tokens })
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Per-token maximum of two masks.
    pub fn union(&self, other: &PatchifiedMask) -> Result<PatchifiedMask> {
        if self.len() != other.len() {
            return Err(Error::shape("mask_union", "token counts differ"));
        }
        let tokens =
            self.tokens.iter().zip(&other.tokens).map(|(&a, &b)| a.max(b)).collect();
        Ok(PatchifiedMask { tokens })
    }
}

/// Max-pool an entity mask to token resolution: token j is active iff any
/// pixel inside its `(latent_downsample * patch_size)`-square receptive
/// block is active. Max pooling keeps thin strokes alive; a majority rule
/// would drop small entities.
pub fn patchify_mask(
    m: &EntityMask,
    latent_downsample: usize,
    patch_size: usize,
) -> Result<PatchifiedMask> {
    let block = latent_downsample * patch_size;
    if block == 0 || m.height % block != 0 || m.width % block != 0 {
        return Err(Error::shape(
            "patchify_mask",
            format!("{}x{} canvas not divisible by block {}", m.width, m.height, block),
        ));
    }
    let gh = m.height / block;
    let gw = m.width / block;
    let mut tokens = vec![0u8; gh * gw];
    for ty in 0..gh {
        for tx in 0..gw {
            'scan: for py in 0..block {
                for px in 0..block {
                    if m.get(tx * block + px, ty * block + py) == 1 {
                        tokens[ty * gw + tx] = 1;
                        break 'scan;
                    }
                }
            }
        }
    }
    Ok(PatchifiedMask { tokens })
}

/// The composed `N_r x N_r` visibility matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedAttentionMask {
    pub n_p: usize,
    pub n_z: usize,
    /// Entity count, excluding the implicit global entity.
    pub k: usize,
    bits: Vec<u8>,
}

impl ComposedAttentionMask {
    pub fn n_r(&self) -> usize {
        (self.k + 1) * self.n_p + self.n_z
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.n_r() + col]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Additive attention bias: visible -> 0.0, hidden -> a large negative
    /// sentinel whose exponential underflows to exactly zero. The sentinel
    /// stays finite so max-subtraction in softmax never produces NaN.
    pub fn to_bias(&self) -> Tensor {
        let n = self.n_r();
        let data = self.bits.iter().map(|&b| if b == 1 { 0.0 } else { MASK_SENTINEL }).collect();
        Tensor::new(vec![n, n], data).expect("square bias")
    }
}

/// Compose per-entity patchified masks into the joint visibility matrix.
/// The global prompt is prepended as an implicit entity with an all-ones
/// spatial mask; `k = 0` therefore yields the fully visible baseline mask.
pub fn compose(
    entity_masks: &[PatchifiedMask],
    n_p: usize,
    n_z: usize,
) -> Result<ComposedAttentionMask> {
    if n_p == 0 {
        return Err(Error::InvalidInput("n_p must be positive".into()));
    }
    for (i, m) in entity_masks.iter().enumerate() {
        if m.len() != n_z {
            return Err(Error::shape(
                "compose",
                format!("entity {} mask has {} tokens, expected {}", i, m.len(), n_z),
            ));
        }
    }
    let k = entity_masks.len();
    let n_r = (k + 1) * n_p + n_z;
    let mut bits = vec![0u8; n_r * n_r];

    // Token-space masks for all k+1 prompt blocks; slot 0 is the global
    // entity with an all-ones mask.
    let global = PatchifiedMask::ones(n_z);
    let slot_mask = |slot: usize| -> &PatchifiedMask {
        if slot == 0 {
            &global
        } else {
            &entity_masks[slot - 1]
        }
    };

    let latent_base = (k + 1) * n_p;
    for slot in 0..=k {
        let base = slot * n_p;
        // intra-entity: a prompt block sees itself
        for a in 0..n_p {
            for b in 0..n_p {
                bits[(base + a) * n_r + (base + b)] = 1;
            }
        }
        // entity-latent: both directions carry the patchified mask
        let m = slot_mask(slot);
        for a in 0..n_p {
            for (t, &bit) in m.tokens().iter().enumerate() {
                bits[(base + a) * n_r + (latent_base + t)] = bit;
                bits[(latent_base + t) * n_r + (base + a)] = bit;
            }
        }
    }
    // latent-latent: fully visible
    for a in 0..n_z {
        for b in 0..n_z {
            bits[(latent_base + a) * n_r + (latent_base + b)] = 1;
        }
    }

    Ok(ComposedAttentionMask { n_p, n_z, k, bits })
}

/// Row layout of the joint token sequence the mask indexes into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub n_p: usize,
    pub k: usize,
    pub n_z: usize,
}

impl SeqLayout {
    pub fn n_r(&self) -> usize {
        (self.k + 1) * self.n_p + self.n_z
    }

    pub fn text_rows(&self) -> usize {
        (self.k + 1) * self.n_p
    }

    /// Row range of prompt slot `slot` (0 = global).
    pub fn prompt_rows(&self, slot: usize) -> std::ops::Range<usize> {
        slot * self.n_p..(slot + 1) * self.n_p
    }

    pub fn latent_rows(&self) -> std::ops::Range<usize> {
        self.text_rows()..self.n_r()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_full_and_empty_coverage() {
        let m = EntityMask::ones(64, 64);
        let p = patchify_mask(&m, 4, 2).unwrap();
        assert_eq!(p.tokens(), vec![1u8; 64].as_slice());

        let m = EntityMask::zeros(64, 64);
        let p = patchify_mask(&m, 4, 2).unwrap();
        assert_eq!(p.tokens(), vec![0u8; 64].as_slice());
    }

    #[test]
    fn patchify_single_pixel_activates_token_zero() {
        let mut m = EntityMask::zeros(64, 64);
        m.set(0, 0, 1);
        let p = patchify_mask(&m, 4, 2).unwrap();
        assert_eq!(p.tokens()[0], 1);
        assert_eq!(p.tokens()[1..], vec![0u8; 63][..]);
    }

    #[test]
    fn patchify_matches_exhaustive_pixel_to_token_map() {
        // Every pixel position, one at a time, against an independent
        // pixel -> token index computation.
        let (ld, ps) = (4, 2);
        let block = ld * ps;
        let (h, w) = (16, 24);
        let gw = w / block;
        for y in 0..h {
            for x in 0..w {
                let mut m = EntityMask::zeros(h, w);
                m.set(x, y, 1);
                let p = patchify_mask(&m, ld, ps).unwrap();
                let expect_token = (y / block) * gw + (x / block);
                for (t, &bit) in p.tokens().iter().enumerate() {
                    assert_eq!(bit == 1, t == expect_token, "pixel ({},{}) token {}", x, y, t);
                }
            }
        }
    }

    #[test]
    fn patchify_rejects_non_divisible_dims() {
        let m = EntityMask::zeros(30, 64);
        assert!(patchify_mask(&m, 4, 2).is_err());
    }

    #[test]
    fn compose_k0_is_all_ones_baseline() {
        let m = compose(&[], 8, 64).unwrap();
        assert_eq!(m.n_r(), 72);
        assert!(m.bits().iter().all(|&b| b == 1));
    }

    #[test]
    fn compose_sizes_with_two_entities() {
        let masks = vec![PatchifiedMask::zeros(64), PatchifiedMask::ones(64)];
        let m = compose(&masks, 8, 64).unwrap();
        assert_eq!(m.n_r(), 88); // (k+1)*n_p + n_z = 3*8 + 64
    }

    /// Independent visibility rule, re-derived pair by pair: classify both
    /// tokens, then apply the block rules directly.
    fn visibility_oracle(
        masks: &[PatchifiedMask],
        n_p: usize,
        n_z: usize,
        a: usize,
        b: usize,
    ) -> u8 {
        let k = masks.len();
        let classify = |t: usize| -> (bool, usize) {
            // (is_prompt, slot-or-token)
            if t < (k + 1) * n_p {
                (true, t / n_p)
            } else {
                (false, t - (k + 1) * n_p)
            }
        };
        let mask_bit = |slot: usize, tok: usize| -> u8 {
            if slot == 0 {
                1
            } else {
                masks[slot - 1].tokens()[tok]
            }
        };
        match (classify(a), classify(b)) {
            ((true, sa), (true, sb)) => u8::from(sa == sb),
            ((true, sa), (false, t)) => mask_bit(sa, t),
            ((false, t), (true, sb)) => mask_bit(sb, t),
            ((false, _), (false, _)) => 1,
        }
    }

    fn random_mask(n_z: usize, seed: u64) -> PatchifiedMask {
        let mut s = seed;
        let tokens = (0..n_z)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 60) & 1) as u8
            })
            .collect();
        PatchifiedMask::from_tokens(tokens).unwrap()
    }

    #[test]
    fn compose_matches_rule_by_rule_oracle() {
        let (n_p, n_z) = (4, 16);
        for trial in 0..25 {
            let k = (trial % 5) as usize; // 0..=4
            let masks: Vec<PatchifiedMask> =
                (0..k).map(|i| random_mask(n_z, 1000 * trial + i as u64)).collect();
            let m = compose(&masks, n_p, n_z).unwrap();
            let n_r = m.n_r();
            assert_eq!(n_r, (k + 1) * n_p + n_z);
            for a in 0..n_r {
                assert_eq!(m.get(a, a), 1, "diagonal at {}", a);
                for b in 0..n_r {
                    assert_eq!(m.get(a, b), m.get(b, a), "symmetry at ({},{})", a, b);
                    assert_eq!(
                        m.get(a, b),
                        visibility_oracle(&masks, n_p, n_z, a, b),
                        "oracle mismatch at ({},{}) k={}",
                        a,
                        b,
                        k
                    );
                }
            }
        }
    }

    #[test]
    fn all_ones_entity_matches_global_latent_visibility() {
        let masks = vec![PatchifiedMask::ones(16)];
        let m = compose(&masks, 4, 16).unwrap();
        let layout = SeqLayout { n_p: 4, k: 1, n_z: 16 };
        for t in 0..16 {
            let row = layout.latent_rows().start + t;
            let to_global = m.get(row, layout.prompt_rows(0).start);
            let to_entity = m.get(row, layout.prompt_rows(1).start);
            assert_eq!(to_global, to_entity);
            assert_eq!(to_global, 1);
        }
    }

    #[test]
    fn latent_row_visible_set() {
        let masks = vec![random_mask(16, 9), random_mask(16, 10)];
        let m = compose(&masks, 4, 16).unwrap();
        let layout = SeqLayout { n_p: 4, k: 2, n_z: 16 };
        for t in 0..16 {
            let row = layout.latent_rows().start + t;
            // all latent and global-prompt columns visible
            for col in layout.latent_rows() {
                assert_eq!(m.get(row, col), 1);
            }
            for col in layout.prompt_rows(0) {
                assert_eq!(m.get(row, col), 1);
            }
            // entity columns visible iff the token is inside the entity mask
            for (slot, em) in masks.iter().enumerate() {
                for col in layout.prompt_rows(slot + 1) {
                    assert_eq!(m.get(row, col), em.tokens()[t]);
                }
            }
        }
    }

    #[test]
    fn rect_mask_rasterize_then_patchify_matches_direct() {
        // A rectangle drawn via from_rect and one drawn pixel by pixel
        // patchify identically.
        let rect = [8, 16, 40, 32];
        let a = EntityMask::from_rect(64, 64, rect).unwrap();
        let mut b = EntityMask::zeros(64, 64);
        for y in rect[1]..rect[3] {
            for x in rect[0]..rect[2] {
                b.set(x, y, 1);
            }
        }
        assert_eq!(a, b);
        assert_eq!(patchify_mask(&a, 4, 2).unwrap(), patchify_mask(&b, 4, 2).unwrap());
    }

    #[test]
    fn bias_all_visible_is_all_zero() {
        let m = compose(&[], 2, 4).unwrap();
        let bias = m.to_bias();
        assert!(bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_hidden_position_softmaxes_to_zero() {
        let masks = vec![PatchifiedMask::from_tokens(vec![1, 0, 1, 1]).unwrap()];
        let m = compose(&masks, 2, 4).unwrap();
        let bias = m.to_bias();
        let scores = Tensor::zeros(vec![m.n_r(), m.n_r()]).add(&bias).unwrap();
        let probs = scores.softmax_lastdim().unwrap();
        for r in 0..m.n_r() {
            for c in 0..m.n_r() {
                let p = probs.data()[r * m.n_r() + c];
                if m.get(r, c) == 0 {
                    assert_eq!(p, 0.0, "row {} col {}", r, c);
                } else {
                    assert!(p > 0.0);
                }
            }
        }
    }
}
