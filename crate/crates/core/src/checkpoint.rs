//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ENTGENW1"
//! header     u32 length + that many JSON bytes (kind/config metadata)
//! count      u32 tensor count
//! per tensor:
//!   u32 name length + UTF-8 name
//!   u32 ndim, then ndim x u64 extents
//!   numel x f64 (IEEE-754 bits, little-endian)
//! ```
//!
//! Values round-trip bit-exactly: the f64 bit patterns are written and read
//! verbatim.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lora::{LoRAAdapter, LoraTarget};
use crate::model::config::ModelConfig;
use crate::model::weights::ModelWeights;
use crate::optim::AdamW;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ENTGENW1";

pub fn encode(header_json: &str, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let hlen = take_u32(&mut pos)? as usize;
    let header = std::str::from_utf8(take(&mut pos, hlen)?)
        .map_err(|_| Error::Format("non-utf8 checkpoint header".into()))?
        .to_string();
    let count = take_u32(&mut pos)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = take_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, nlen)?)
            .map_err(|_| Error::Format("non-utf8 tensor name".into()))?
            .to_string();
        let ndim = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let b = take(&mut pos, 8)?;
            shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok((header, tensors))
}

pub fn save_file(path: impl AsRef<Path>, header_json: &str, tensors: &[(String, &Tensor)]) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode(header_json, tensors))?;
    Ok(())
}

pub fn load_file(path: impl AsRef<Path>) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

// ── Model weights ────────────────────────────────────────────────────

#[derive(Serialize, serde::Deserialize)]
struct ModelHeader {
    kind: String,
    config: ModelConfig,
}

pub fn save_model(path: impl AsRef<Path>, weights: &ModelWeights) -> Result<()> {
    let header = serde_json::to_string(&ModelHeader {
        kind: "model".into(),
        config: weights.config.clone(),
    })?;
    save_file(path, &header, &weights.named_tensors())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let (header, tensors) = load_file(path)?;
    let header: ModelHeader = parse_header(&header, "model")?;
    ModelWeights::from_named(header.config, tensors)
}

// ── Adapters (with optional optimizer state for resume) ─────────────

#[derive(Serialize, serde::Deserialize)]
struct AdapterHeader {
    kind: String,
    rank: usize,
    alpha: f64,
    target_names: Vec<String>,
    /// Completed training steps, when saved from training.
    train_step: Option<usize>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, serde::Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
}

/// Optimizer state plus progress counter carried inside an adapter file.
pub struct TrainState {
    pub optimizer: AdamW,
    pub train_step: usize,
}

pub fn save_adapter(
    path: impl AsRef<Path>,
    adapter: &LoRAAdapter,
    state: Option<(&AdamW, usize)>,
) -> Result<()> {
    let header = AdapterHeader {
        kind: "adapter".into(),
        rank: adapter.rank,
        alpha: adapter.alpha,
        target_names: adapter.targets.iter().map(|t| t.name.clone()).collect(),
        train_step: state.map(|(_, s)| s),
        optimizer: state.map(|(o, _)| OptimizerHeader {
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            step_count: o.step_count,
        }),
    };
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for t in &adapter.targets {
        tensors.push((format!("{}.down", t.name), &t.down));
        tensors.push((format!("{}.up", t.name), &t.up));
    }
    let moment_tensors: Vec<(String, Tensor)> = match state {
        Some((opt, _)) => {
            let mut out = Vec::new();
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                out.push((format!("opt.m.{i}"), Tensor::new(vec![m.len()], m.clone())?));
                out.push((format!("opt.v.{i}"), Tensor::new(vec![v.len()], v.clone())?));
            }
            out
        }
        None => Vec::new(),
    };
    for (name, t) in &moment_tensors {
        tensors.push((name.clone(), t));
    }
    save_file(path, &serde_json::to_string(&header)?, &tensors)
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<(LoRAAdapter, Option<TrainState>)> {
    let (header, tensors) = load_file(path)?;
    let header: AdapterHeader = parse_header(&header, "adapter")?;
    let mut iter = tensors.into_iter().peekable();
    let mut targets = Vec::with_capacity(header.target_names.len());
    for name in &header.target_names {
        let (dn, down) = iter
            .next()
            .ok_or_else(|| Error::Format("adapter file missing tensors".into()))?;
        let (un, up) = iter
            .next()
            .ok_or_else(|| Error::Format("adapter file missing tensors".into()))?;
        if dn != format!("{name}.down") || un != format!("{name}.up") {
            return Err(Error::Format(format!("unexpected adapter tensors {dn}/{un}")));
        }
        targets.push(LoraTarget { name: name.clone(), down, up });
    }
    let adapter = LoRAAdapter { rank: header.rank, alpha: header.alpha, targets };

    let state = match header.optimizer {
        Some(o) => {
            let mut opt = AdamW::new(o.learning_rate, o.weight_decay, &adapter.param_sizes());
            opt.beta1 = o.beta1;
            opt.beta2 = o.beta2;
            opt.eps = o.eps;
            opt.step_count = o.step_count;
            for i in 0..opt.m.len() {
                let (mn, m) = iter
                    .next()
                    .ok_or_else(|| Error::Format("adapter file missing optimizer state".into()))?;
                let (vn, v) = iter
                    .next()
                    .ok_or_else(|| Error::Format("adapter file missing optimizer state".into()))?;
                if mn != format!("opt.m.{i}") || vn != format!("opt.v.{i}") {
                    return Err(Error::Format("optimizer tensors out of order".into()));
                }
                opt.m[i] = m.data().to_vec();
                opt.v[i] = v.data().to_vec();
            }
            Some(TrainState {
                optimizer: opt,
                train_step: header.train_step.unwrap_or(0),
            })
        }
        None => None,
    };
    if iter.next().is_some() {
        return Err(Error::Format("unexpected extra tensors in adapter file".into()));
    }
    Ok((adapter, state))
}

fn parse_header<T: DeserializeOwned + HasKind>(header: &str, want: &str) -> Result<T> {
    let value: T = serde_json::from_str(header)?;
    if value.kind() != want {
        return Err(Error::Format(format!("expected a {want} checkpoint, got {}", value.kind())));
    }
    Ok(value)
}

trait HasKind {
    fn kind(&self) -> &str;
}

impl HasKind for ModelHeader {
    fn kind(&self) -> &str {
        &self.kind
    }
}

impl HasKind for AdapterHeader {
    fn kind(&self) -> &str {
        &self.kind
    }
}
