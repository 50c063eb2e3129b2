//! Checkpoint persistence.
//!
//! Layout, in order:
//!
//! ```text
//! bytes 0..8    magic "MIXFILL\0"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..16  header length N, u32 little-endian
//! bytes 16..16+N  JSON header: config, dims, step, PRNG state, Adam step
//!                 counts, tensor table (name, shape, element offset/count)
//! payload       all tensors as f32 little-endian, in table order
//! trailing 8    FNV-1a 64 digest of every preceding byte
//! ```
//!
//! Training math is f64; payloads are stored as f32 (the training loop
//! rounds its live state through f32 at every save, so resuming reproduces
//! the uninterrupted run bit-exactly).

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, ParamGroup};
use crate::prng::Prng;
use crate::tensor::Tensor;
use crate::train::{Optimizer, Trainer};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MIXFILL\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    dims: ModelDims,
    step: usize,
    prng_state: u64,
    adam_t_gen: u64,
    adam_t_disc: u64,
    tensors: Vec<TensorEntry>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Tensors in payload order: generator params, discriminator params, then
/// Adam first/second moments for each group.
fn tensor_table(params: &ModelParams, opt: &Optimizer) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for group in [ParamGroup::Generator, ParamGroup::Discriminator] {
        for (name, t) in params.named(group) {
            out.push((name, t.clone()));
        }
    }
    for (prefix, state) in [("adam.gen", &opt.gen), ("adam.disc", &opt.disc)] {
        let names: Vec<String> = params
            .named(match prefix {
                "adam.gen" => ParamGroup::Generator,
                _ => ParamGroup::Discriminator,
            })
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for (kind, tensors) in [("m", &state.m), ("v", &state.v)] {
            for (name, t) in names.iter().zip(tensors.iter()) {
                out.push((format!("{prefix}.{kind}.{name}"), t.clone()));
            }
        }
    }
    out
}

/// Serialize trainer state to `path`. The caller is responsible for having
/// quantized the live state first (see `Trainer::save`).
pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let table = tensor_table(&trainer.params, &trainer.opt);
    let mut entries = Vec::with_capacity(table.len());
    let mut offset = 0usize;
    for (name, t) in &table {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let header = Header {
        config: trainer.cfg.clone(),
        dims: trainer.dims,
        step: trainer.step,
        prng_state: trainer.rng.state(),
        adam_t_gen: trainer.opt.gen.t,
        adam_t_disc: trainer.opt.disc.t,
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + offset * 4 + 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, t) in &table {
        for &v in &t.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = fnv1a64(&bytes);
    bytes.extend_from_slice(&digest.to_le_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load trainer state, verifying magic, version, digest, and every tensor
/// shape against the architecture implied by the stored config.
pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 24 || &bytes[0..8] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let stored_digest = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if fnv1a64(&bytes[..bytes.len() - 8]) != stored_digest {
        return Err(Error::CheckpointDigest);
    }

    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() - 8 {
        return Err(Error::CheckpointDigest);
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    header.config.validate()?;
    header.dims.validate()?;

    let payload = &bytes[16 + header_len..bytes.len() - 8];
    let read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > payload.len() || entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::CheckpointDigest);
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Tensor::from_vec(&entry.shape, data))
    };

    // materialize the architecture, then fill every tensor by name
    let mut params = ModelParams::init(header.dims, &mut Prng::seed(0))?;
    let mut opt = Optimizer::new(&params, header.config.learning_rate);
    opt.gen.t = header.adam_t_gen;
    opt.disc.t = header.adam_t_disc;

    let mut by_name: std::collections::HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut fill = |name: String, dst: &mut Tensor| -> Result<()> {
        let entry = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::CheckpointShape {
                tensor: name.clone(),
                stored: vec![],
                expected: dst.shape.clone(),
            }
        })?;
        if entry.shape != dst.shape {
            return Err(Error::CheckpointShape {
                tensor: name,
                stored: entry.shape.clone(),
                expected: dst.shape.clone(),
            });
        }
        *dst = read_tensor(entry)?;
        Ok(())
    };

    for group in [ParamGroup::Generator, ParamGroup::Discriminator] {
        let names: Vec<String> = params.named(group).into_iter().map(|(n, _)| n).collect();
        for (i, (name, t)) in params.named_mut(group).into_iter().enumerate() {
            debug_assert_eq!(names[i], name);
            fill(name, t)?;
        }
        let prefix = match group {
            ParamGroup::Generator => "adam.gen",
            ParamGroup::Discriminator => "adam.disc",
        };
        let state = match group {
            ParamGroup::Generator => &mut opt.gen,
            ParamGroup::Discriminator => &mut opt.disc,
        };
        for (kind, tensors) in [("m", &mut state.m), ("v", &mut state.v)] {
            for (name, t) in names.iter().zip(tensors.iter_mut()) {
                fill(format!("{prefix}.{kind}.{name}"), t)?;
            }
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::CheckpointShape {
            tensor: extra.to_string(),
            stored: vec![],
            expected: vec![],
        });
    }

    Ok(Trainer {
        cfg: header.config,
        dims: header.dims,
        params,
        opt,
        rng: Prng::from_state(header.prng_state),
        step: header.step,
    })
}
