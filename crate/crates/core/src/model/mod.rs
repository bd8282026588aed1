//! The diffusion transformer: prompt/latent token preparation, double- and
//! single-stream blocks with adaptive layer-norm modulation, and masked
//! joint attention over the `[global | entities | latent]` sequence.
//!
//! One forward pass composes a single visibility mask and shares it across
//! every block. The pass runs on a [`GradTape`] in all cases; inference
//! simply never calls `backward`, so training and inference share one code
//! path and agree bit for bit.

pub mod codec;
pub mod config;
pub mod embed;
pub mod weights;

use crate::error::{Error, Result};
use crate::lora::LoRAAdapter;
use crate::mask::{compose, ComposedAttentionMask, PatchifiedMask, SeqLayout};
use crate::tape::{GradTape, VarId};
use crate::tensor::Tensor;

use codec::{patchify, unpatchify, LatentGrid};
use config::ModelConfig;
use embed::{encode_prompt, timestep_features, PromptEmbedding};
use weights::{BlockWeights, LinearW, ModelWeights, MOD_CHUNKS};

/// Layer-norm epsilon. Small enough that normalized rows of typical
/// activation scale keep unit variance to well under 1e-6.
pub const LN_EPS: f64 = 1e-9;

// ── Tape binding ─────────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct BoundLinear {
    w: VarId,
    b: VarId,
    /// (down, up, scale) when this layer carries an adapter.
    lora: Option<(VarId, VarId, f64)>,
}

struct BoundDouble {
    text_qkv: BoundLinear,
    text_proj: BoundLinear,
    text_mod: BoundLinear,
    text_ff1: BoundLinear,
    text_ff2: BoundLinear,
    lat_qkv: BoundLinear,
    lat_proj: BoundLinear,
    lat_mod: BoundLinear,
    lat_ff1: BoundLinear,
    lat_ff2: BoundLinear,
}

struct BoundSingle {
    qkv: BoundLinear,
    proj: BoundLinear,
    modl: BoundLinear,
    ff1: BoundLinear,
    ff2: BoundLinear,
}

enum BoundBlock {
    Double(BoundDouble),
    Single(BoundSingle),
}

/// Model weights registered on a tape, with adapter deltas attached to
/// their target layers. Adapter leaves come first in `lora_params`, in the
/// adapter's target order (down, up per target).
pub struct BoundModel<'w> {
    weights: &'w ModelWeights,
    latent_out: BoundLinear,
    blocks: Vec<BoundBlock>,
    /// VarIds of adapter parameters when bound trainable.
    pub lora_params: Vec<VarId>,
}

impl<'w> BoundModel<'w> {
    /// Register weights (as constants) and adapter tensors (as parameters
    /// when `trainable`) on the tape.
    pub fn bind(
        tape: &mut GradTape,
        weights: &'w ModelWeights,
        adapter: Option<&LoRAAdapter>,
        trainable: bool,
    ) -> Result<Self> {
        if let Some(a) = adapter {
            a.compatible_with(weights)?;
        }
        let mut lora_params = Vec::new();
        let mut lora_iter = adapter.map(|a| a.targets.iter());
        let scale = adapter.map(|a| a.scale()).unwrap_or(0.0);

        let bind_plain = |tape: &mut GradTape, lin: &LinearW| BoundLinear {
            w: tape.constant(lin.w.clone()),
            b: tape.constant(lin.b.clone()),
            lora: None,
        };
        let latent_out = bind_plain(tape, &weights.latent_out);

        let mut bind_target = |tape: &mut GradTape, lin: &LinearW| -> BoundLinear {
            let mut bound = BoundLinear {
                w: tape.constant(lin.w.clone()),
                b: tape.constant(lin.b.clone()),
                lora: None,
            };
            if let Some(iter) = lora_iter.as_mut() {
                let t = iter.next().expect("adapter target count verified");
                let (down, up) = if trainable {
                    (tape.leaf(t.down.clone().with_grad()), tape.leaf(t.up.clone().with_grad()))
                } else {
                    (tape.constant(t.down.clone()), tape.constant(t.up.clone()))
                };
                if trainable {
                    lora_params.push(down);
                    lora_params.push(up);
                }
                bound.lora = Some((down, up, scale));
            }
            bound
        };

        let mut blocks = Vec::with_capacity(weights.blocks.len());
        for b in &weights.blocks {
            match b {
                BlockWeights::Double(db) => blocks.push(BoundBlock::Double(BoundDouble {
                    text_qkv: bind_target(tape, &db.text_qkv),
                    text_proj: bind_target(tape, &db.text_proj),
                    text_mod: bind_target(tape, &db.text_mod),
                    text_ff1: BoundLinear {
                        w: tape.constant(db.text_ff1.w.clone()),
                        b: tape.constant(db.text_ff1.b.clone()),
                        lora: None,
                    },
                    text_ff2: BoundLinear {
                        w: tape.constant(db.text_ff2.w.clone()),
                        b: tape.constant(db.text_ff2.b.clone()),
                        lora: None,
                    },
                    lat_qkv: bind_target(tape, &db.lat_qkv),
                    lat_proj: bind_target(tape, &db.lat_proj),
                    lat_mod: bind_target(tape, &db.lat_mod),
                    lat_ff1: BoundLinear {
                        w: tape.constant(db.lat_ff1.w.clone()),
                        b: tape.constant(db.lat_ff1.b.clone()),
                        lora: None,
                    },
                    lat_ff2: BoundLinear {
                        w: tape.constant(db.lat_ff2.w.clone()),
                        b: tape.constant(db.lat_ff2.b.clone()),
                        lora: None,
                    },
                })),
                BlockWeights::Single(sb) => blocks.push(BoundBlock::Single(BoundSingle {
                    qkv: bind_target(tape, &sb.qkv),
                    proj: bind_target(tape, &sb.proj),
                    modl: bind_target(tape, &sb.modl),
                    ff1: BoundLinear {
                        w: tape.constant(sb.ff1.w.clone()),
                        b: tape.constant(sb.ff1.b.clone()),
                        lora: None,
                    },
                    ff2: BoundLinear {
                        w: tape.constant(sb.ff2.w.clone()),
                        b: tape.constant(sb.ff2.b.clone()),
                        lora: None,
                    },
                })),
            }
        }
        Ok(BoundModel { weights, latent_out, blocks, lora_params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }
}

fn apply_linear(tape: &mut GradTape, x: VarId, lin: &BoundLinear) -> Result<VarId> {
    let y = tape.matmul(x, lin.w)?;
    let y = tape.add_row(y, lin.b)?;
    if let Some((down, up, scale)) = lin.lora {
        let down_t = tape.transpose(down)?; // [d_in x r]
        let up_t = tape.transpose(up)?; // [r x d_out]
        let xa = tape.matmul(x, down_t)?;
        let delta = tape.matmul(xa, up_t)?;
        let delta = tape.scale(delta, scale)?;
        return tape.add(y, delta);
    }
    Ok(y)
}

/// Modulated layer norm: `(1 + scale) * LN(x) + shift` with row vectors
/// from the timestep modulation.
fn modulate(tape: &mut GradTape, x: VarId, scale: VarId, shift: VarId) -> Result<VarId> {
    let ln = tape.layer_norm(x, LN_EPS)?;
    let one_plus = tape.add_scalar(scale, 1.0)?;
    let y = tape.mul_row(ln, one_plus)?;
    tape.add_row(y, shift)
}

/// Split a `[1 x 6d]` modulation row into its six `[1 x d]` chunks:
/// (shift_attn, scale_attn, gate_attn, shift_ff, scale_ff, gate_ff).
fn mod_chunks(tape: &mut GradTape, m: VarId, d: usize) -> Result<[VarId; MOD_CHUNKS]> {
    let mut out = [0usize; MOD_CHUNKS];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = tape.slice_cols(m, i * d, d)?;
    }
    Ok(out)
}

// ── Attention ────────────────────────────────────────────────────────

/// Per-head `softmax(Q Kᵀ / sqrt(d_head) + bias) V`, heads concatenated.
/// `h` is the `[N_r x 3d]` stacked Q|K|V projection. When `capture` is
/// set, the head-averaged probability matrix is written into it.
fn masked_heads(
    tape: &mut GradTape,
    h: VarId,
    bias: VarId,
    heads: usize,
    capture: Option<&mut Option<Tensor>>,
) -> Result<VarId> {
    let cols = tape.value(h).shape()[1];
    if cols % 3 != 0 {
        return Err(Error::shape("attention", "QKV width not divisible by 3"));
    }
    let d = cols / 3;
    if d % heads != 0 {
        return Err(Error::shape("attention", "width not divisible by head count"));
    }
    let dh = d / heads;
    let q = tape.slice_cols(h, 0, d)?;
    let k = tape.slice_cols(h, d, d)?;
    let v = tape.slice_cols(h, 2 * d, d)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_outs = Vec::with_capacity(heads);
    let mut prob_sum: Option<Tensor> = None;
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.add(scores, bias)?;
        let probs = tape.softmax_lastdim(scores)?;
        if capture.is_some() {
            let p = tape.value(probs);
            prob_sum = Some(match prob_sum {
                Some(acc) => acc.add(p)?,
                None => p.clone(),
            });
        }
        head_outs.push(tape.matmul(probs, vh)?);
    }
    if let Some(slot) = capture {
        *slot = Some(prob_sum.expect("at least one head").scale(1.0 / heads as f64)?);
    }
    tape.concat_cols(&head_outs)
}

/// Masked joint attention over a stacked QKV sequence followed by a single
/// output projection. Rows attend only to columns the mask leaves visible.
pub fn regional_attention(
    tape: &mut GradTape,
    h: VarId,
    mask: &ComposedAttentionMask,
    out_proj_w: VarId,
    out_proj_b: VarId,
    heads: usize,
) -> Result<VarId> {
    let rows = tape.value(h).shape()[0];
    if rows != mask.n_r() {
        return Err(Error::shape(
            "regional_attention",
            format!("sequence of {} rows does not match mask N_r {}", rows, mask.n_r()),
        ));
    }
    let bias = tape.constant(mask.to_bias());
    let attn = masked_heads(tape, h, bias, heads, None)?;
    let y = tape.matmul(attn, out_proj_w)?;
    tape.add_row(y, out_proj_b)
}

// ── Blocks ───────────────────────────────────────────────────────────

struct BlockIo {
    x_p: VarId,
    x_z: VarId,
}

#[allow(clippy::too_many_arguments)]
fn double_block(
    tape: &mut GradTape,
    bw: &BoundDouble,
    io: BlockIo,
    bias: VarId,
    t_emb: VarId,
    layout: SeqLayout,
    heads: usize,
    capture: Option<&mut Option<Tensor>>,
) -> Result<BlockIo> {
    let d = tape.value(t_emb).shape()[1];
    let m_p = apply_linear(tape, t_emb, &bw.text_mod)?;
    let [p_sh1, p_sc1, p_g1, p_sh2, p_sc2, p_g2] = mod_chunks(tape, m_p, d)?;
    let m_z = apply_linear(tape, t_emb, &bw.lat_mod)?;
    let [z_sh1, z_sc1, z_g1, z_sh2, z_sc2, z_g2] = mod_chunks(tape, m_z, d)?;

    // attention sublayer: both streams project, attend jointly, project back
    let a_p = modulate(tape, io.x_p, p_sc1, p_sh1)?;
    let a_z = modulate(tape, io.x_z, z_sc1, z_sh1)?;
    let h_p = apply_linear(tape, a_p, &bw.text_qkv)?;
    let h_z = apply_linear(tape, a_z, &bw.lat_qkv)?;
    let h = tape.concat_rows(&[h_p, h_z])?;
    let attn = masked_heads(tape, h, bias, heads, capture)?;
    let attn_p = tape.slice_rows(attn, 0, layout.text_rows())?;
    let attn_z = tape.slice_rows(attn, layout.text_rows(), layout.n_z)?;

    let o_p = apply_linear(tape, attn_p, &bw.text_proj)?;
    let o_p = tape.mul_row(o_p, p_g1)?;
    let x_p = tape.add(io.x_p, o_p)?;
    let o_z = apply_linear(tape, attn_z, &bw.lat_proj)?;
    let o_z = tape.mul_row(o_z, z_g1)?;
    let x_z = tape.add(io.x_z, o_z)?;

    // feed-forward sublayer per stream
    let f = modulate(tape, x_p, p_sc2, p_sh2)?;
    let f = apply_linear(tape, f, &bw.text_ff1)?;
    let f = tape.gelu(f)?;
    let f = apply_linear(tape, f, &bw.text_ff2)?;
    let f = tape.mul_row(f, p_g2)?;
    let x_p = tape.add(x_p, f)?;

    let f = modulate(tape, x_z, z_sc2, z_sh2)?;
    let f = apply_linear(tape, f, &bw.lat_ff1)?;
    let f = tape.gelu(f)?;
    let f = apply_linear(tape, f, &bw.lat_ff2)?;
    let f = tape.mul_row(f, z_g2)?;
    let x_z = tape.add(x_z, f)?;

    Ok(BlockIo { x_p, x_z })
}

fn single_block(
    tape: &mut GradTape,
    bw: &BoundSingle,
    h_seq: VarId,
    bias: VarId,
    t_emb: VarId,
    heads: usize,
    capture: Option<&mut Option<Tensor>>,
) -> Result<VarId> {
    let d = tape.value(t_emb).shape()[1];
    let m = apply_linear(tape, t_emb, &bw.modl)?;
    let [sh1, sc1, g1, sh2, sc2, g2] = mod_chunks(tape, m, d)?;

    let a = modulate(tape, h_seq, sc1, sh1)?;
    let qkv = apply_linear(tape, a, &bw.qkv)?;
    let attn = masked_heads(tape, qkv, bias, heads, capture)?;
    let o = apply_linear(tape, attn, &bw.proj)?;
    let o = tape.mul_row(o, g1)?;
    let h_seq = tape.add(h_seq, o)?;

    let f = modulate(tape, h_seq, sc2, sh2)?;
    let f = apply_linear(tape, f, &bw.ff1)?;
    let f = tape.gelu(f)?;
    let f = apply_linear(tape, f, &bw.ff2)?;
    let f = tape.mul_row(f, g2)?;
    tape.add(h_seq, f)
}

// ── Forward pass ─────────────────────────────────────────────────────

/// Head-averaged attention probabilities recorded during one forward pass,
/// one `N_r x N_r` matrix per block.
#[derive(Debug, Clone)]
pub struct AttnCapture {
    pub maps: Vec<Tensor>,
    pub layout: SeqLayout,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Attention weights from one prompt slot to the latent tokens at one
/// block, averaged over heads and the slot's rows, as a token-grid tensor.
/// `entity_index` 0 addresses the global slot, `1..=k` the entities.
pub fn capture_attention_map(
    capture: &AttnCapture,
    layer: usize,
    entity_index: usize,
) -> Result<Tensor> {
    let map = capture
        .maps
        .get(layer)
        .ok_or_else(|| Error::IndexOutOfRange(format!("block {} not captured", layer)))?;
    if entity_index > capture.layout.k {
        return Err(Error::IndexOutOfRange(format!(
            "entity index {} with only {} entities",
            entity_index, capture.layout.k
        )));
    }
    let layout = capture.layout;
    let n_r = layout.n_r();
    let rows = layout.prompt_rows(entity_index);
    let latent0 = layout.latent_rows().start;
    let mut grid = vec![0.0; layout.n_z];
    for (t, g) in grid.iter_mut().enumerate() {
        let mut acc = 0.0;
        for r in rows.clone() {
            acc += map.data()[r * n_r + latent0 + t];
        }
        *g = acc / layout.n_p as f64;
    }
    Tensor::new(vec![capture.grid_h, capture.grid_w], grid)
}

/// Unwrap a capture, surfacing the capture-not-enabled error.
pub fn require_capture(capture: Option<AttnCapture>) -> Result<AttnCapture> {
    capture.ok_or(Error::CaptureUnavailable)
}

pub struct ForwardOutput {
    /// Velocity prediction in token space, `[n_z x d_latent]`.
    pub velocity: VarId,
    pub capture: Option<AttnCapture>,
}

/// Run the transformer on a tape. `z_tokens` is the patchified noisy
/// latent; entities carry already-encoded prompts and patchified masks.
pub fn forward_on_tape(
    tape: &mut GradTape,
    bound: &BoundModel,
    z_tokens: &Tensor,
    global: &PromptEmbedding,
    entities: &[(PromptEmbedding, PatchifiedMask)],
    sigma: f64,
    want_capture: bool,
) -> Result<ForwardOutput> {
    let cfg = bound.config();
    let d = cfg.d_model;
    let layout = SeqLayout { n_p: cfg.n_p, k: entities.len(), n_z: cfg.n_z() };
    if z_tokens.shape() != [cfg.n_z(), cfg.d_latent()] {
        return Err(Error::shape(
            "forward",
            format!("latent tokens {:?}, expected [{}, {}]", z_tokens.shape(), cfg.n_z(), cfg.d_latent()),
        ));
    }

    // One visibility mask per forward pass, shared by every block.
    let masks: Vec<PatchifiedMask> = entities.iter().map(|(_, m)| m.clone()).collect();
    let composed = compose(&masks, cfg.n_p, cfg.n_z())?;
    let bias = tape.constant(composed.to_bias());

    // Frozen preprocessing happens at value level; the tape picks up at the
    // first adapted layer.
    let weights = bound.weights;
    let mut x_p0_parts: Vec<Tensor> = Vec::with_capacity(layout.k + 1);
    x_p0_parts.push(global.tokens.add(&weights.pos_prompt)?);
    for (emb, _) in entities {
        // Same positional table for every slot: slot order is invisible.
        x_p0_parts.push(emb.tokens.add(&weights.pos_prompt)?);
    }
    let part_refs: Vec<&Tensor> = x_p0_parts.iter().collect();
    let x_p0 = Tensor::concat_rows(&part_refs)?;

    let x_z0 = z_tokens
        .matmul(&weights.latent_in.w)?
        .add_row(&weights.latent_in.b)?
        .add(&weights.pos_latent)?;

    let t_feat = timestep_features(sigma, d);
    let t_emb0 = t_feat
        .matmul(&weights.time_mlp1.w)?
        .add_row(&weights.time_mlp1.b)?
        .gelu()?
        .matmul(&weights.time_mlp2.w)?
        .add_row(&weights.time_mlp2.b)?;

    let mut x_p = tape.constant(x_p0);
    let mut x_z = tape.constant(x_z0);
    let t_emb = tape.constant(t_emb0);

    let mut captured: Vec<Tensor> = Vec::new();
    let mut h_seq: Option<VarId> = None;
    for block in &bound.blocks {
        let mut slot: Option<Tensor> = None;
        match block {
            BoundBlock::Double(db) => {
                let io = double_block(
                    tape,
                    db,
                    BlockIo { x_p, x_z },
                    bias,
                    t_emb,
                    layout,
                    cfg.heads,
                    want_capture.then_some(&mut slot),
                )?;
                x_p = io.x_p;
                x_z = io.x_z;
            }
            BoundBlock::Single(sb) => {
                let h = match h_seq {
                    Some(h) => h,
                    None => tape.concat_rows(&[x_p, x_z])?,
                };
                let h = single_block(
                    tape,
                    sb,
                    h,
                    bias,
                    t_emb,
                    cfg.heads,
                    want_capture.then_some(&mut slot),
                )?;
                h_seq = Some(h);
            }
        }
        if want_capture {
            captured.push(slot.expect("capture requested"));
        }
    }
    if let Some(h) = h_seq {
        x_z = tape.slice_rows(h, layout.text_rows(), layout.n_z)?;
    }

    let velocity = apply_linear(tape, x_z, &bound.latent_out)?;
    let capture = want_capture.then(|| AttnCapture {
        maps: captured,
        layout,
        grid_h: cfg.grid_h(),
        grid_w: cfg.grid_w(),
    });
    Ok(ForwardOutput { velocity, capture })
}

// ── Inference-facing handle ──────────────────────────────────────────

/// Anything that predicts a velocity field for the sampler. The real model
/// implements it; tests substitute closed-form stubs.
pub trait VelocityModel {
    fn config(&self) -> &ModelConfig;

    fn velocity(
        &self,
        z: &LatentGrid,
        global_prompt: &str,
        entities: &[(String, PatchifiedMask)],
        sigma: f64,
    ) -> Result<LatentGrid>;

    /// Velocity plus, when supported, per-block attention captures.
    fn velocity_with_capture(
        &self,
        z: &LatentGrid,
        global_prompt: &str,
        entities: &[(String, PatchifiedMask)],
        sigma: f64,
    ) -> Result<(LatentGrid, Option<AttnCapture>)> {
        Ok((self.velocity(z, global_prompt, entities, sigma)?, None))
    }
}

/// Base weights plus an optional adapter: the standard inference handle.
#[derive(Clone, Copy)]
pub struct AdaptedModel<'a> {
    pub weights: &'a ModelWeights,
    pub adapter: Option<&'a LoRAAdapter>,
}

impl<'a> AdaptedModel<'a> {
    pub fn new(weights: &'a ModelWeights, adapter: Option<&'a LoRAAdapter>) -> Self {
        AdaptedModel { weights, adapter }
    }

    fn run(
        &self,
        z: &LatentGrid,
        global_prompt: &str,
        entities: &[(String, PatchifiedMask)],
        sigma: f64,
        want_capture: bool,
    ) -> Result<(LatentGrid, Option<AttnCapture>)> {
        let cfg = &self.weights.config;
        let mut tape = GradTape::new();
        let bound = BoundModel::bind(&mut tape, self.weights, self.adapter, false)?;
        let z_tokens = patchify(z, cfg)?;
        let global = encode_prompt(global_prompt, cfg);
        let encoded: Vec<(PromptEmbedding, PatchifiedMask)> = entities
            .iter()
            .map(|(p, m)| (encode_prompt(p, cfg), m.clone()))
            .collect();
        let out =
            forward_on_tape(&mut tape, &bound, &z_tokens, &global, &encoded, sigma, want_capture)?;
        let velocity = unpatchify(tape.value(out.velocity), cfg)?;
        Ok((velocity, out.capture))
    }
}

impl VelocityModel for AdaptedModel<'_> {
    fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    fn velocity(
        &self,
        z: &LatentGrid,
        global_prompt: &str,
        entities: &[(String, PatchifiedMask)],
        sigma: f64,
    ) -> Result<LatentGrid> {
        Ok(self.run(z, global_prompt, entities, sigma, false)?.0)
    }

    fn velocity_with_capture(
        &self,
        z: &LatentGrid,
        global_prompt: &str,
        entities: &[(String, PatchifiedMask)],
        sigma: f64,
    ) -> Result<(LatentGrid, Option<AttnCapture>)> {
        self.run(z, global_prompt, entities, sigma, true)
    }
}
