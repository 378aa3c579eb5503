//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "MOJICKPT"
//! version   u32 LE
//! header    u32 LE byte length, then UTF-8 `key=value` lines
//! tensors   u32 LE count, then per tensor:
//!             u32 LE name length, UTF-8 name,
//!             u32 LE rank, rank × u32 LE dims,
//!             f32 LE values, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use super::params::{Param, ParamSet};
use super::{LayerGroup, Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"MOJICKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: {detail}")]
    Tensor { name: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub init_recipe: String,
    pub vocab_hash: String,
    pub seed: u64,
    /// Hash of the settings that produced the weights; empty if unknown.
    pub config_hash: String,
}

impl LayerGroup {
    /// Group implied by a tensor name.
    pub fn for_tensor(name: &str) -> Option<LayerGroup> {
        let head = name.split('.').next()?;
        Some(match head {
            "embedding" => LayerGroup::Embedding,
            "rec1" => LayerGroup::Recurrent1,
            "rec2" => LayerGroup::Recurrent2,
            "attention" => LayerGroup::Attention,
            "softmax" => LayerGroup::Softmax,
            _ => return None,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.model.config;
        let header = format!(
            "architecture={}\nvocab_size={}\nembed_dim={}\nunits={}\nclasses={}\nmax_len={}\ninit={}\nvocab_hash={}\nseed={}\nconfig_hash={}\n",
            c.architecture,
            c.vocab_size,
            c.embed_dim,
            c.units,
            c.classes,
            c.max_len,
            self.init_recipe,
            self.vocab_hash,
            self.seed,
            self.config_hash
        );
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.model.params.len());
        for p in self.model.params.iter() {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.ndim());
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
            // Standard layout iteration is row-major.
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = r.u32()? as usize;
        let header =
            std::str::from_utf8(r.take(header_len)?).map_err(|_| CheckpointError::Header("not UTF-8".into()))?;
        let fields: BTreeMap<&str, &str> = header.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| CheckpointError::Header(format!("missing {k}")));
        let num = |k: &str| -> Result<usize, CheckpointError> {
            get(k)?.parse().map_err(|_| CheckpointError::Header(format!("bad {k}")))
        };
        let config = ModelConfig {
            architecture: get("architecture")?.to_string(),
            vocab_size: num("vocab_size")?,
            embed_dim: num("embed_dim")?,
            units: num("units")?,
            classes: num("classes")?,
            max_len: num("max_len")?,
        };
        config.validate()?;
        let init_recipe = get("init")?.to_string();
        let vocab_hash = get("vocab_hash")?.to_string();
        let seed = get("seed")?.parse().map_err(|_| CheckpointError::Header("bad seed".into()))?;
        let config_hash = fields.get("config_hash").copied().unwrap_or_default().to_string();

        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Header("tensor name not UTF-8".into()))?;
            let group = LayerGroup::for_tensor(&name)
                .ok_or_else(|| CheckpointError::Tensor { name: name.clone(), detail: "unknown layer".into() })?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| CheckpointError::Tensor { name: name.clone(), detail: e.to_string() })?;
            params.push(Param { name, group, value });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Header("trailing bytes".into()));
        }
        let model = Model { config, params: ParamSet::new(params) };
        check_layout(&model)?;
        Ok(Self { model, init_recipe, vocab_hash, seed, config_hash })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Tensor names and shapes must match what the architecture would create.
fn check_layout(model: &Model<f32>) -> Result<(), CheckpointError> {
    let arch = super::lookup::<f32>(&model.config.architecture)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let expected = arch.init(&model.config, &mut rng);
    if expected.len() != model.params.len() {
        return Err(CheckpointError::Header(format!(
            "expected {} tensors, found {}",
            expected.len(),
            model.params.len()
        )));
    }
    for (e, p) in expected.iter().zip(model.params.iter()) {
        if e.name != p.name || e.value.shape() != p.value.shape() {
            return Err(CheckpointError::Tensor {
                name: p.name.clone(),
                detail: format!("expected {} {:?}, found {:?}", e.name, e.value.shape(), p.value.shape()),
            });
        }
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ARCHITECTURES, INIT_RECIPE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(arch: &str) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig::deepmoji(20, 6, 5, 3).with_architecture(arch);
        Checkpoint {
            model: Model::init(cfg, &mut rng).unwrap(),
            init_recipe: INIT_RECIPE.into(),
            vocab_hash: "abc123".into(),
            seed: 77,
            config_hash: "feed".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for arch in ARCHITECTURES {
            let ck = sample(arch);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample("deepmoji").to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes;
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(9))));
    }
}
