//! Checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic "GRANCKPT" | version u32
//! config text (u32 length + UTF-8 key=value lines) | SHA-256 of that text
//! flags u32 (bit 0: granularity outputs trained)
//! epoch u64 | step u64
//! parameter count u32
//! per parameter: name (u32 length + UTF-8), ndim u32, dims u32 × ndim, f32 values
//! adam step u64 | per parameter: first moment f32 values, second moment f32 values
//! ```
//!
//! Values are stored as f32, so saving a loaded checkpoint reproduces the
//! file byte for byte.

use std::path::Path;

use granedge_core::train::{AdamState, TrainConfig, Trainer};
use granedge_core::Tensor;
use sha2::{Digest, Sha256};

use crate::config::{apply_pairs, parse_pairs, render_config};
use crate::error::{io_err, load_err, Result};
use crate::features::{write_atomic, Reader, Writer};

pub const MAGIC: &[u8; 8] = b"GRANCKPT";
pub const VERSION: u32 = 1;
const FLAG_MULTI: usize = 1;

/// SHA-256 of the rendered configuration.
pub fn config_hash(cfg: &TrainConfig) -> [u8; 32] {
    Sha256::digest(render_config(cfg).as_bytes()).into()
}

pub fn encode(t: &Trainer) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    let text = render_config(&t.config);
    w.bytes(text.as_bytes());
    w.0.extend_from_slice(&Sha256::digest(text.as_bytes()));
    w.u32(if t.multi_granularity() { FLAG_MULTI } else { 0 });
    w.u64(t.epoch);
    w.u64(t.step);
    let params = t.stn.params();
    w.u32(params.len());
    for (_, name, tensor) in params.iter() {
        w.bytes(name.as_bytes());
        w.tensor(tensor);
    }
    w.u64(t.adam.step);
    for (m, v) in t.adam.m.iter().zip(&t.adam.v) {
        w.f32s(m.data());
        w.f32s(v.data());
    }
    w.0
}

pub fn decode(buf: &[u8]) -> Result<Trainer> {
    let mut r = Reader::new(buf);
    if r.take(8)? != MAGIC {
        return Err(load_err!("not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(load_err!("checkpoint version {version}, expected {VERSION}"));
    }
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| load_err!("config text is not UTF-8"))?;
    let hash = r.take(32)?;
    if hash != Sha256::digest(text.as_bytes()).as_slice() {
        return Err(load_err!("config hash mismatch"));
    }
    let mut config = TrainConfig::default();
    apply_pairs(&mut config, &parse_pairs(text)?)?;
    let flags = r.u32()?;
    let mut t = Trainer::new(config)?;
    if (flags & FLAG_MULTI != 0) != t.multi_granularity() {
        return Err(load_err!("granularity flag disagrees with the stored configuration"));
    }
    t.epoch = r.u64()?;
    t.step = r.u64()?;
    let n = r.u32()?;
    let ids: Vec<_> = t.stn.params().ids().collect();
    if n != ids.len() {
        return Err(load_err!("checkpoint has {n} parameters, the configured network has {}", ids.len()));
    }
    for &id in &ids {
        let name = std::str::from_utf8(r.bytes()?).map_err(|_| load_err!("parameter name is not UTF-8"))?;
        let tensor = r.tensor()?;
        let ps = t.stn.params_mut();
        let expected = ps.name(id);
        if name != expected {
            return Err(load_err!("parameter `{name}` found where `{expected}` was expected"));
        }
        if tensor.shape() != ps.get(id).shape() {
            return Err(load_err!("parameter `{name}` has shape {:?}, expected {:?}", tensor.shape(), ps.get(id).shape()));
        }
        ps.set(id, tensor)?;
    }
    let mut adam = AdamState::new(t.stn.params());
    adam.step = r.u64()?;
    for i in 0..ids.len() {
        let shape = adam.m[i].shape().to_vec();
        let n = adam.m[i].len();
        adam.m[i] = Tensor::from_vec(&shape, r.f32s(n)?)?;
        adam.v[i] = Tensor::from_vec(&shape, r.f32s(n)?)?;
    }
    r.finish()?;
    t.adam = adam;
    Ok(t)
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let buf = std::fs::read(path).map_err(io_err(path))?;
    decode(&buf).map_err(|e| load_err!("{}: {e}", path.display()))
}
