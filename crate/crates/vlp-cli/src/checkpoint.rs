//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  b"VLPCKPT\0"
//! version    u32
//! conf_len   u64      length of the config text block
//! conf       conf_len UTF-8 bytes of `key = value` lines
//! count      u64      number of tensors
//! per tensor:
//!   name_len u64
//!   name     name_len UTF-8 bytes
//!   dtype    u8       0 = f32
//!   rank     u8
//!   dims     rank × u64
//!   payload  product(dims) × f32
//! ```
//!
//! The config block embeds the run configuration plus the bookkeeping
//! keys `step` and `rng_state` (four hex words), so a checkpoint is fully
//! self-describing. Optimizer moments, when saved, ride along as extra
//! tensors named `opt.m.<param>` / `opt.v.<param>`. Serialization is
//! canonical: saving a just-loaded checkpoint reproduces the file byte
//! for byte.

use std::path::Path;

use vlp_core::optim::{AdamConfig, AdamW};
use vlp_core::params::Params;
use vlp_core::{Rng, Tensor};

use crate::configfile::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: [u8; 8] = *b"VLPCKPT\0";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub rng_state: [u64; 4],
    /// Model parameters and (optionally) optimizer moments, in file order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(path: &Path, what: &str) -> CliError {
    CliError::Validation(format!("{}: {what}", path.display()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, path: &Path) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(path, "truncated checkpoint file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, path: &Path) -> Result<u8> {
        Ok(self.take(1, path)?[0])
    }

    fn u32(&mut self, path: &Path) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, path)?.try_into().unwrap()))
    }

    fn u64(&mut self, path: &Path) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, path)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Snapshot of a training state. `optimizer: None` omits the moment
    /// tensors (fine for inference-only artifacts).
    pub fn capture(
        config: &RunConfig,
        params: &Params<f32>,
        optimizer: Option<&AdamW<f32>>,
        rng: &Rng,
        step: u64,
    ) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = params
            .names
            .iter()
            .cloned()
            .zip(params.tensors.iter().cloned())
            .collect();
        if let Some(opt) = optimizer {
            for (name, t) in params.names.iter().zip(opt.m.iter()) {
                tensors.push((format!("opt.m.{name}"), t.clone()));
            }
            for (name, t) in params.names.iter().zip(opt.v.iter()) {
                tensors.push((format!("opt.v.{name}"), t.clone()));
            }
        }
        Checkpoint {
            config: config.clone(),
            step,
            rng_state: rng.state(),
            tensors,
        }
    }

    /// Rebuild model parameters. Tensor names must exactly match the
    /// architecture derived from the stored config; unknown names and
    /// shape mismatches are rejected.
    pub fn to_params(&self, vocab: usize) -> Result<Params<f32>> {
        let enc = self.config.encoder_config(vocab);
        let mut params: Params<f32> = Params::init(&enc, 0)?;
        let by_name = params.by_name();
        let mut seen = vec![false; params.tensors.len()];
        let mut indexed = Vec::new();
        for (name, t) in &self.tensors {
            if name.starts_with("opt.m.") || name.starts_with("opt.v.") {
                continue;
            }
            let &idx = by_name
                .get(name.as_str())
                .ok_or_else(|| CliError::Validation(format!("unknown tensor name {name:?}")))?;
            indexed.push((idx, name, t));
        }
        drop(by_name);
        for (idx, name, t) in indexed {
            if t.shape != params.tensors[idx].shape {
                return Err(CliError::Validation(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape, params.tensors[idx].shape
                )));
            }
            if seen[idx] {
                return Err(CliError::Validation(format!("duplicate tensor {name:?}")));
            }
            seen[idx] = true;
            params.tensors[idx] = t.clone();
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CliError::Validation(format!(
                "checkpoint is missing tensor {:?}",
                params.names[i]
            )));
        }
        Ok(params)
    }

    /// Rebuild the optimizer, or a fresh one when the checkpoint carries
    /// no moment tensors.
    pub fn to_optimizer(&self, params: &Params<f32>) -> Result<AdamW<f32>> {
        let mut opt = AdamW::new(self.config.adam_config(), params);
        opt.step = self.step;
        let has_moments = self.tensors.iter().any(|(n, _)| n.starts_with("opt.m."));
        if !has_moments {
            return Ok(opt);
        }
        for (name, t) in &self.tensors {
            let (table, param_name): (&mut Vec<Tensor<f32>>, &str) =
                if let Some(rest) = name.strip_prefix("opt.m.") {
                    (&mut opt.m, rest)
                } else if let Some(rest) = name.strip_prefix("opt.v.") {
                    (&mut opt.v, rest)
                } else {
                    continue;
                };
            let idx = params
                .index_of(param_name)
                .ok_or_else(|| CliError::Validation(format!("unknown tensor name {name:?}")))?;
            if t.shape != params.tensors[idx].shape {
                return Err(CliError::Validation(format!(
                    "moment {name:?} has shape {:?}, expected {:?}",
                    t.shape, params.tensors[idx].shape
                )));
            }
            table[idx] = t.clone();
        }
        Ok(opt)
    }

    pub fn rng(&self) -> Rng {
        Rng::from_state(self.rng_state)
    }

    pub fn optimizer_config(&self) -> AdamConfig {
        self.config.adam_config()
    }

    /// Canonical byte serialization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let conf = format!(
            "{}step = {}\nrng_state = {:016x},{:016x},{:016x},{:016x}\n",
            self.config.to_text(),
            self.step,
            self.rng_state[0],
            self.rng_state[1],
            self.rng_state[2],
            self.rng_state[3]
        );
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(conf.len() as u64).to_le_bytes());
        out.extend_from_slice(conf.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), path).map_err(|_| bad(path, "bad magic bytes"))? != MAGIC {
            return Err(bad(path, "bad magic bytes"));
        }
        let version = r.u32(path)?;
        if version != VERSION {
            return Err(bad(
                path,
                &format!("unsupported checkpoint version {version} (expected {VERSION})"),
            ));
        }
        let conf_len = r.u64(path)? as usize;
        let conf = std::str::from_utf8(r.take(conf_len, path)?)
            .map_err(|_| bad(path, "config block is not UTF-8"))?;

        let mut step = None;
        let mut rng_state = None;
        let mut config_lines = String::new();
        for line in conf.lines() {
            if let Some(v) = line.strip_prefix("step = ") {
                step = v.trim().parse::<u64>().ok();
            } else if let Some(v) = line.strip_prefix("rng_state = ") {
                let words: Vec<u64> = v
                    .trim()
                    .split(',')
                    .filter_map(|w| u64::from_str_radix(w, 16).ok())
                    .collect();
                if words.len() == 4 {
                    rng_state = Some([words[0], words[1], words[2], words[3]]);
                }
            } else {
                config_lines.push_str(line);
                config_lines.push('\n');
            }
        }
        let step = step.ok_or_else(|| bad(path, "config block is missing `step`"))?;
        let rng_state = rng_state.ok_or_else(|| bad(path, "config block is missing `rng_state`"))?;
        let config = RunConfig::from_text(&config_lines)?;

        let count = r.u64(path)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u64(path)? as usize;
            let name = std::str::from_utf8(r.take(name_len, path)?)
                .map_err(|_| bad(path, "tensor name is not UTF-8"))?
                .to_string();
            let dtype = r.u8(path)?;
            if dtype != DTYPE_F32 {
                return Err(bad(path, &format!("tensor {name:?}: unknown dtype {dtype}")));
            }
            let rank = r.u8(path)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(path)? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, path).map_err(|_| {
                bad(
                    path,
                    &format!("tensor {name:?}: payload shorter than its declared shape"),
                )
            })?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| bad(path, &format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(bad(path, "trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            config,
            step,
            rng_state,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::from_bytes(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_checkpoint() -> Checkpoint {
        let mut config = RunConfig::default();
        config.hidden = 16;
        config.n_heads = 2;
        config.layers_visual = 1;
        config.layers_text = 1;
        config.layers_mm = 1;
        config.max_len = 12;
        config.contrastive_dim = 8;
        let enc = config.encoder_config(41);
        let params: Params<f32> = Params::init(&enc, 7).unwrap();
        let opt = AdamW::new(config.adam_config(), &params);
        Checkpoint::capture(&config, &params, Some(&opt), &Rng::new(3), 5)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = tiny_checkpoint();
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded, ckpt);
    }

    #[test]
    fn round_trip_restores_params_optimizer_and_rng() {
        let ckpt = tiny_checkpoint();
        let params = ckpt.to_params(41).unwrap();
        let opt = ckpt.to_optimizer(&params).unwrap();
        assert_eq!(opt.step, 5);
        assert_eq!(opt.m.len(), params.tensors.len());
        assert_eq!(ckpt.rng().state(), Rng::new(3).state());
    }

    #[test]
    fn empty_file_is_a_bad_magic_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.ckpt");
        std::fs::write(&p, b"").unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn wrong_magic_version_and_truncation_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = tiny_checkpoint();
        let bytes = ckpt.to_bytes();

        let p = dir.path().join("magic.ckpt");
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        std::fs::write(&p, &bad_magic).unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("bad magic"));

        let p = dir.path().join("version.ckpt");
        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        std::fs::write(&p, &bad_version).unwrap();
        assert!(load_checkpoint(&p)
            .unwrap_err()
            .to_string()
            .contains("unsupported checkpoint version"));

        let p = dir.path().join("trunc.ckpt");
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let msg = load_checkpoint(&p).unwrap_err().to_string();
        assert!(
            msg.contains("payload shorter") || msg.contains("truncated"),
            "{msg}"
        );
    }

    #[test]
    fn payload_shape_mismatch_is_rejected() {
        let mut ckpt = tiny_checkpoint();
        // Declare one more row than the payload provides.
        let (_, t) = &mut ckpt.tensors[0];
        t.shape[0] += 1;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("shape.ckpt");
        // to_bytes writes the (now wrong) declared dims with the original
        // payload length, so the reader must notice.
        std::fs::write(&p, ckpt.to_bytes()).unwrap();
        let msg = load_checkpoint(&p).unwrap_err().to_string();
        assert!(
            msg.contains("payload shorter")
                || msg.contains("truncated")
                || msg.contains("shape"),
            "{msg}"
        );
    }

    #[test]
    fn unknown_tensor_names_are_rejected() {
        let mut ckpt = tiny_checkpoint();
        ckpt.tensors[0].0 = "no.such.tensor".to_string();
        let err = ckpt.to_params(41).unwrap_err();
        assert!(err.to_string().contains("unknown tensor name"), "{err}");
    }
}
