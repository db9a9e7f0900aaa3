//! Binary checkpoint: model configuration, parameters and optionally the
//! Adam state.
//!
//! Layout (little endian):
//!
//! ```text
//! "NWCF" | u32 version | u32 config length | config (UTF-8 `key = value` lines)
//! u32 tensor count | per tensor: u16 name length, name, u8 rank,
//!                    u32 extent × rank, f64 × product
//! ```
//!
//! Adam moments are stored as tensors named `adam.m.<param>` and
//! `adam.v.<param>`; the step counter and coefficients live in the config
//! block under `optimizer.*`.

use std::fs;
use std::path::Path;

use nwcrf_core::optim::OptimizerState;
use nwcrf_core::{Model, ModelConfig, Tensor};

use crate::config::{model_pairs, parse_pairs, set_model_key};

pub const MAGIC: &[u8; 4] = b"NWCF";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match its configuration: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &e in t.extents() {
        put_u32(out, e as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut config = String::new();
    for (k, v) in model_pairs(ck.model.config()) {
        config.push_str(&format!("{k} = {v}\n"));
    }
    if let Some(opt) = &ck.optimizer {
        config.push_str(&format!(
            "optimizer.step = {}\noptimizer.beta1 = {}\noptimizer.beta2 = {}\noptimizer.epsilon = {}\n",
            opt.step, opt.beta1, opt.beta2, opt.epsilon
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(config.as_bytes());
    let params = &ck.model.params;
    let moments = if ck.optimizer.is_some() { 2 } else { 0 };
    put_u32(&mut out, (params.len() * (1 + moments)) as u32);
    for (name, t) in params.iter() {
        put_tensor(&mut out, name, t);
    }
    if let Some(opt) = &ck.optimizer {
        for (prefix, moment) in [("adam.m.", &opt.first_moment), ("adam.v.", &opt.second_moment)] {
            for ((name, _), t) in params.iter().zip(moment) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let len = u16::from_le_bytes(self.take(2, "tensor name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.take(1, "tensor rank")?[0] as usize;
        let extents = (0..rank).map(|_| self.u32("tensor extents").map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        let count = extents.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let count = count.filter(|&c| c <= self.bytes.len() / 8).ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{name}` is too large")))?;
        let raw = self.take(count * 8, "tensor payload")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&extents, data).map_err(|e| CheckpointError::Corrupt(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CheckpointError> {
    v.parse().map_err(|_| CheckpointError::Corrupt(format!("bad value `{v}` for `{key}`")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::Format("missing NWCF magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config block")?).map_err(|_| CheckpointError::Corrupt("config block is not UTF-8".into()))?;
    let pairs = parse_pairs(text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let mut config = ModelConfig::default();
    let mut opt_fields: Vec<(String, String)> = Vec::new();
    for (k, v) in pairs {
        if k.starts_with("optimizer.") {
            opt_fields.push((k, v));
        } else if !set_model_key(&mut config, &k, &v).map_err(|e| CheckpointError::Corrupt(e.to_string()))? {
            return Err(CheckpointError::Corrupt(format!("unknown config key `{k}`")));
        }
    }
    let mut model = Model::new(config).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let n = model.params.len();
    let expected = if opt_fields.is_empty() { n } else { 3 * n };
    if tensors.len() != expected {
        return Err(CheckpointError::Mismatch(format!("expected {expected} tensors, found {}", tensors.len())));
    }
    let moments = tensors.split_off(n);
    model.params.assign(&tensors).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;

    let optimizer = if opt_fields.is_empty() {
        None
    } else {
        let mut opt = OptimizerState::new(model.params.tensors());
        for (k, v) in &opt_fields {
            match k.as_str() {
                "optimizer.step" => opt.step = parse_value(k, v)?,
                "optimizer.beta1" => opt.beta1 = parse_value(k, v)?,
                "optimizer.beta2" => opt.beta2 = parse_value(k, v)?,
                "optimizer.epsilon" => opt.epsilon = parse_value(k, v)?,
                _ => return Err(CheckpointError::Corrupt(format!("unknown config key `{k}`"))),
            }
        }
        let (m, v) = moments.split_at(n);
        for (i, (name, p)) in model.params.iter().enumerate() {
            for ((label, slot), (got_name, t)) in [("adam.m.", &mut opt.first_moment[i]), ("adam.v.", &mut opt.second_moment[i])].into_iter().zip([&m[i], &v[i]]) {
                if *got_name != format!("{label}{name}") || t.extents() != p.extents() {
                    return Err(CheckpointError::Mismatch(format!("optimizer tensor `{got_name}` does not match parameter `{name}`")));
                }
                *slot = t.clone();
            }
        }
        Some(opt)
    };
    Ok(Checkpoint { model, optimizer })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, encode(ck)).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}
