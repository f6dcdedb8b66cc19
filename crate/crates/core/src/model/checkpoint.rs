//! Checkpoint format: a UTF-8 header (magic, config echo, geometry, step
//! count, parameter count), then one length-prefixed binary record per
//! named parameter tensor. Round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::layers::ParamGroup;
use crate::tensor::Tensor;

use super::{ModelConfig, ModelState};

pub const CHECKPOINT_MAGIC: &str = "STCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the model structure: {0}")]
    Structure(String),
    #[error(transparent)]
    Model(#[from] super::ModelError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn header_lines(state: &ModelState, steps: u64, n_params: usize) -> String {
    let c = &state.config;
    let g = &state.geometry;
    let caps = c
        .channel_capacities
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut s = String::new();
    s.push_str(CHECKPOINT_MAGIC);
    s.push('\n');
    s.push_str(&format!("channel_capacities={caps}\n"));
    s.push_str(&format!("latent_dim={}\n", c.latent_dim));
    s.push_str(&format!("knn_k={}\n", c.knn_k));
    s.push_str(&format!("bilstm_hidden={}\n", c.bilstm_hidden));
    s.push_str(&format!("n_clusters={}\n", c.n_clusters));
    s.push_str(&format!("alpha={}\n", c.alpha));
    s.push_str(&format!("window_length={}\n", c.window_length));
    s.push_str(&format!("attention_heads={}\n", c.attention_heads));
    s.push_str(&format!("attention_dim={}\n", c.attention_dim));
    s.push_str(&format!("in_h={}\n", g.in_h));
    s.push_str(&format!("in_w={}\n", g.in_w));
    s.push_str(&format!("n_vars={}\n", g.n_vars));
    s.push_str(&format!("steps={steps}\n"));
    s.push_str(&format!("params={n_params}\n"));
    s
}

pub fn save_checkpoint(state: &ModelState, steps: u64, path: &Path) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    state.visit("", &mut |name, t| named.push((name, t)));

    let mut out = Vec::new();
    out.extend_from_slice(header_lines(state, steps, named.len()).as_bytes());
    for (name, tensor) in named {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Malformed("truncated binary section".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, u64)> {
    let bytes = fs::read(path)?;

    // header: 15 newline-terminated lines
    let mut pos = 0;
    let mut lines = Vec::with_capacity(15);
    for _ in 0..15 {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Malformed("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
        lines.push(line.to_string());
        pos += nl + 1;
    }
    if lines[0] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Malformed(format!(
            "bad magic `{}`",
            lines[0]
        )));
    }
    let mut kv = std::collections::HashMap::new();
    for line in &lines[1..] {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Malformed(format!("bad header line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| CheckpointError::Malformed(format!("missing header key `{k}`")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| CheckpointError::Malformed(format!("bad integer for `{k}`")))
    };

    let caps_raw = get("channel_capacities")?;
    let caps: Vec<usize> = caps_raw
        .split(',')
        .map(|v| v.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CheckpointError::Malformed("bad channel_capacities".into()))?;
    if caps.len() != 4 {
        return Err(CheckpointError::Malformed(
            "channel_capacities must have 4 entries".into(),
        ));
    }
    let config = ModelConfig {
        channel_capacities: [caps[0], caps[1], caps[2], caps[3]],
        latent_dim: parse_usize("latent_dim")?,
        knn_k: parse_usize("knn_k")?,
        bilstm_hidden: parse_usize("bilstm_hidden")?,
        n_clusters: parse_usize("n_clusters")?,
        alpha: get("alpha")?
            .parse()
            .map_err(|_| CheckpointError::Malformed("bad alpha".into()))?,
        window_length: parse_usize("window_length")?,
        attention_heads: parse_usize("attention_heads")?,
        attention_dim: parse_usize("attention_dim")?,
    };
    let in_h = parse_usize("in_h")?;
    let in_w = parse_usize("in_w")?;
    let n_vars = parse_usize("n_vars")?;
    let steps: u64 = get("steps")?
        .parse()
        .map_err(|_| CheckpointError::Malformed("bad steps".into()))?;
    let n_params = parse_usize("params")?;

    let mut state = ModelState::init(config, in_h, in_w, n_vars, 0)?;
    let mut cursor = Cursor {
        bytes: &bytes,
        pos,
    };
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = cursor.u32()? as usize;
        let name = std::str::from_utf8(cursor.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cursor.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cursor.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        loaded.push((name, tensor));
    }
    if cursor.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }

    let mut idx = 0;
    let mut failure: Option<String> = None;
    state.visit_mut("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match loaded.get(idx) {
            Some((got_name, tensor)) if *got_name == name => {
                if tensor.shape() != slot.shape() {
                    failure = Some(format!(
                        "parameter `{name}`: shape {:?} in file, {:?} in model",
                        tensor.shape(),
                        slot.shape()
                    ));
                } else {
                    *slot = tensor.clone();
                }
            }
            Some((got_name, _)) => {
                failure = Some(format!("expected parameter `{name}`, found `{got_name}`"));
            }
            None => failure = Some(format!("missing parameter `{name}`")),
        }
        idx += 1;
    });
    if let Some(reason) = failure {
        return Err(CheckpointError::Structure(reason));
    }
    if idx != loaded.len() {
        return Err(CheckpointError::Structure(format!(
            "{} parameters in file, {} in model",
            loaded.len(),
            idx
        )));
    }
    Ok((state, steps))
}
