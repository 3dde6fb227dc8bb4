//! Training checkpoints: named weights, AdamW moments, the step counter,
//! the training generator position and the digest of the run config.
//!
//! Layout matches the other data files: `key: json` header lines, `---`,
//! then little-endian tensors in header order (weights, then `m`, then `v`).

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{FlagError, Result};
use crate::io::{decode, write_atomic, Header, SEPARATOR};
use crate::nn::AdamWConfig;
use crate::tensor::Tensor;
use crate::training::Trainer;

pub const CHECKPOINT_FORMAT: &str = "flag-checkpoint/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is 68 bits wide).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex_encode(&rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed = hex_decode(&self.seed).ok_or_else(|| FlagError::parse("rng", "seed is not 64 hex digits"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| FlagError::parse("rng", "bad word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub dtype: Dtype,
    pub params: Vec<(String, Tensor)>,
    /// Adam first and second moments, parallel to `params`.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub optimizer: AdamWConfig,
    pub rng: RngState,
    /// Free-form metadata for the caller (model kind, gene names, ...).
    pub meta: Value,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config_hash: &str, dtype: Dtype, meta: Value) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            step: trainer.opt.step,
            dtype,
            params: trainer.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            m: trainer.opt.m.clone(),
            v: trainer.opt.v.clone(),
            optimizer: trainer.opt.config.clone(),
            rng: RngState::capture(&trainer.rng),
            meta,
        }
    }

    /// Loads weights, moments, step and generator into `trainer`, whose
    /// store must hold exactly the checkpoint's parameter names and shapes.
    pub fn restore_into(&self, trainer: &mut Trainer) -> Result<()> {
        trainer.store.load_from(&self.params)?;
        let order: Vec<usize> = trainer
            .store
            .iter()
            .map(|(_, name, _)| self.params.iter().position(|(n, _)| n == name).expect("names checked by load_from"))
            .collect();
        trainer.opt.m = order.iter().map(|&i| self.m[i].clone()).collect();
        trainer.opt.v = order.iter().map(|&i| self.v[i].clone()).collect();
        trainer.opt.step = self.step;
        trainer.rng = self.rng.restore()?;
        Ok(())
    }

    /// Refuses a checkpoint written under a different config unless forced.
    pub fn check_config(&self, config_hash: &str, force: bool) -> Result<()> {
        if self.config_hash != config_hash && !force {
            return Err(FlagError::Config(format!(
                "checkpoint was written with config {} but the current config is {}; pass --force to resume anyway",
                self.config_hash, config_hash
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut h = Header::default();
        h.set("format", CHECKPOINT_FORMAT);
        h.set("config_hash", &self.config_hash);
        h.set("step", self.step);
        h.set("dtype", self.dtype);
        h.set("tensors", self.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>());
        h.set("optimizer", &self.optimizer);
        h.set("rng", &self.rng);
        h.set("meta", &self.meta);
        let mut out = h.render().into_bytes();
        out.extend_from_slice(SEPARATOR);
        let all = self.params.iter().map(|(_, t)| t).chain(&self.m).chain(&self.v);
        for t in all {
            for &x in t.data() {
                match self.dtype {
                    Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, mut payload) = decode(bytes)?;
        let format: String = h.get("format")?;
        if format != CHECKPOINT_FORMAT {
            return Err(FlagError::parse("format", format!("expected `{CHECKPOINT_FORMAT}`, got `{format}`")));
        }
        let dtype: Dtype = h.get("dtype")?;
        let shapes: Vec<(String, Vec<usize>)> = h.get("tensors")?;
        let mut read = |label: &str, shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let need = n * dtype.width();
            if payload.len() < need {
                return Err(FlagError::parse(label, "truncated payload"));
            }
            let data = match dtype {
                Dtype::F32 => payload[..need].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect(),
                Dtype::F64 => payload[..need].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            payload = &payload[need..];
            Tensor::new(shape.to_vec(), data)
        };
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            params.push((name.clone(), read(name, shape)?));
        }
        let m = shapes.iter().map(|(n, s)| read(&format!("m.{n}"), s)).collect::<Result<Vec<_>>>()?;
        let v = shapes.iter().map(|(n, s)| read(&format!("v.{n}"), s)).collect::<Result<Vec<_>>>()?;
        if !payload.is_empty() {
            return Err(FlagError::parse("payload", format!("{} trailing bytes", payload.len())));
        }
        Ok(Self {
            config_hash: h.get("config_hash")?,
            step: h.get("step")?,
            dtype,
            params,
            m,
            v,
            optimizer: h.get("optimizer")?,
            rng: h.get("rng")?,
            meta: h.get("meta")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
