//! Checkpoint serialization: magic `VFVC`, a length-prefixed `key=value`
//! config block, named tensors (name, rank, dims, little-endian float32
//! data) in sorted order, and a trailing CRC32 over everything before it.
//! Special tokens, optimizer moments, and corpus statistics ride along as
//! ordinary named tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::scalar::Real;
use crate::seq::SpecialTokens;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VFVC";
const VERSION: u32 = 1;

const MOMENT_M_PREFIX: &str = "adam.m.";
const MOMENT_V_PREFIX: &str = "adam.v.";
const TOKEN_SOS: &str = "token.sos";
const TOKEN_EOS: &str = "token.eos";
const MEAN_FRAME: &str = "stats.mean_frame";

fn config_block<T: Real>(state: &ModelState<T>) -> String {
    let c = &state.config;
    format!(
        "version=1\nd_model={}\nn_layers_enc={}\nn_layers_dec={}\nn_heads={}\nd_ff={}\ndropout={}\nmax_decode_len={}\ntoken_seed={}\nstep={}\n",
        c.d_model,
        c.n_layers_enc,
        c.n_layers_dec,
        c.n_heads,
        c.d_ff,
        c.dropout,
        c.max_decode_len,
        state.tokens.rng_seed,
        state.step,
    )
}

fn push_tensor<T: Real>(buf: &mut Vec<u8>, name: &str, tensor: &Tensor<T>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_f32_c().to_le_bytes());
    }
}

/// Serializes a state to bytes (the file image, CRC included).
pub fn encode<T: Real>(state: &ModelState<T>) -> Vec<u8> {
    let mut named: BTreeMap<String, &Tensor<T>> = BTreeMap::new();
    for (k, v) in &state.params {
        named.insert(k.clone(), v);
    }
    for (k, v) in &state.opt_m {
        named.insert(format!("{MOMENT_M_PREFIX}{k}"), v);
    }
    for (k, v) in &state.opt_v {
        named.insert(format!("{MOMENT_V_PREFIX}{k}"), v);
    }
    named.insert(TOKEN_SOS.into(), &state.tokens.sos);
    named.insert(TOKEN_EOS.into(), &state.tokens.eos);
    named.insert(MEAN_FRAME.into(), &state.mean_frame);

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config = config_block(state);
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in &named {
        push_tensor(&mut buf, name, tensor);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save<T: Real>(state: &ModelState<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                path: self.path.into(),
                detail: "truncated".into(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.into(),
        detail: detail.into(),
    }
}

fn parse_config(path: &Path, text: &str) -> Result<(ModelConfig, u64, u64)> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| bad(path, format!("config key {k} missing")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| bad(path, format!("config key {k} not an integer")))
    };
    let parse_u64 = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| bad(path, format!("config key {k} not an integer")))
    };
    let dropout: f64 = get("dropout")?
        .parse()
        .map_err(|_| bad(path, "config key dropout not a number"))?;
    let config = ModelConfig {
        d_model: parse_usize("d_model")?,
        n_layers_enc: parse_usize("n_layers_enc")?,
        n_layers_dec: parse_usize("n_layers_dec")?,
        n_heads: parse_usize("n_heads")?,
        d_ff: parse_usize("d_ff")?,
        dropout,
        max_decode_len: parse_usize("max_decode_len")?,
    };
    Ok((config, parse_u64("token_seed")?, parse_u64("step")?))
}

pub fn load<T: Real>(path: &Path) -> Result<ModelState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(bad(path, "file too small"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(bad(path, "crc mismatch"));
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 0,
        path,
    };
    if cur.take(4)? != MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let config_len = cur.u32()? as usize;
    let config_text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| bad(path, "config block not utf-8"))?;
    let (config, token_seed, step) = parse_config(path, config_text)?;

    let n_tensors = cur.u32()? as usize;
    let mut named: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| bad(path, "tensor name not utf-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(path, e.to_string()))?;
        if named.insert(name.clone(), tensor).is_some() {
            return Err(bad(path, format!("duplicate tensor {name}")));
        }
    }
    if cur.pos != body.len() {
        return Err(bad(path, "trailing bytes"));
    }

    let sos = named
        .remove(TOKEN_SOS)
        .ok_or_else(|| bad(path, "token.sos missing"))?;
    let eos = named
        .remove(TOKEN_EOS)
        .ok_or_else(|| bad(path, "token.eos missing"))?;
    let mean_frame = named
        .remove(MEAN_FRAME)
        .ok_or_else(|| bad(path, "stats.mean_frame missing"))?;

    let mut params = BTreeMap::new();
    let mut opt_m = BTreeMap::new();
    let mut opt_v = BTreeMap::new();
    for (name, tensor) in named {
        if let Some(stripped) = name.strip_prefix(MOMENT_M_PREFIX) {
            opt_m.insert(stripped.to_string(), tensor);
        } else if let Some(stripped) = name.strip_prefix(MOMENT_V_PREFIX) {
            opt_v.insert(stripped.to_string(), tensor);
        } else {
            params.insert(name, tensor);
        }
    }

    let state = ModelState {
        config,
        params,
        tokens: SpecialTokens {
            sos,
            eos,
            rng_seed: token_seed,
        },
        opt_m,
        opt_v,
        step,
        mean_frame,
    };
    state.config.validate()?;
    if state.tokens.sos.numel() != state.config.d_model {
        return Err(bad(path, "token width disagrees with d_model"));
    }
    Ok(state)
}
