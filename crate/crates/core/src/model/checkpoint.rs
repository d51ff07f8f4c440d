//! Checkpoint format (version 1), all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "AVCKPT01"
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON: {variant, config, weights, step}
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32, name (UTF-8)
//!   rank       u32, dims (u64 each)
//!   data       product(dims) f64, row-major
//! ```
//!
//! Tensors are the model parameters by name plus `bank.centroids` when the
//! model has a unit bank.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LossWeights, Model, ModelConfig};
use crate::binio;
use crate::error::{Error, IoContext, Result};
use crate::quantizer::AudioUnitBank;
use crate::tensor::Tensor;
use crate::train::Variant;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AVCKPT01";
const CENTROIDS: &str = "bank.centroids";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: Variant,
    pub config: ModelConfig,
    pub weights: LossWeights,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut tensors: Vec<(&str, &Tensor)> = self.model.params().iter().collect();
        if let Some(c) = self.model.centroids() {
            tensors.push((CENTROIDS, c));
        }
        let file = File::create(path).at(path)?;
        let mut w = BufWriter::new(file);
        (|| {
            w.write_all(MAGIC)?;
            binio::write_u32(&mut w, CHECKPOINT_VERSION)?;
            binio::write_u32(&mut w, header.len() as u32)?;
            w.write_all(&header)?;
            binio::write_u32(&mut w, tensors.len() as u32)?;
            for (name, t) in &tensors {
                binio::write_u32(&mut w, name.len() as u32)?;
                w.write_all(name.as_bytes())?;
                binio::write_u32(&mut w, t.rank() as u32)?;
                for &d in t.shape() {
                    binio::write_u64(&mut w, d as u64)?;
                }
                binio::write_f64s(&mut w, t.data())?;
            }
            w.flush()
        })()
        .at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).at(path)?;
        let mut r = BufReader::new(file);
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let truncated = |_| bad("truncated checkpoint".into());
        if &binio::read_magic(&mut r).at(path)? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = binio::read_u32(&mut r).map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = binio::read_u32(&mut r).map_err(truncated)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(truncated)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| bad(format!("bad header: {e}")))?;

        let count = binio::read_u32(&mut r).map_err(truncated)?;
        let mut tensors = HashMap::new();
        for _ in 0..count {
            let len = binio::read_u32(&mut r).map_err(truncated)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let rank = binio::read_u32(&mut r).map_err(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(binio::read_u64(&mut r).map_err(truncated)? as usize);
            }
            let n = shape.iter().product();
            let data = binio::read_f64s(&mut r, n).map_err(truncated)?;
            tensors.insert(name, Tensor::new(shape, data)?);
        }

        let bank = match tensors.remove(CENTROIDS) {
            Some(centroids) => {
                let key = tensors.get("bank.key").ok_or_else(|| bad("missing bank.key".into()))?;
                let value = tensors.get("bank.value").ok_or_else(|| bad("missing bank.value".into()))?;
                Some(AudioUnitBank {
                    centroids,
                    key_embed: key.clone(),
                    value_embed: value.clone(),
                    seed: 0,
                })
            }
            None => None,
        };
        let mut model = Model::new(header.config.clone(), bank.as_ref())?;
        let names: Vec<String> = model.params().names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let t = tensors
                .remove(name)
                .ok_or_else(|| bad(format!("missing parameter {name}")))?;
            let slot = &mut model.params_mut().tensors_mut()[i];
            if slot.shape() != t.shape() {
                return Err(bad(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(Self { header, model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::init_unit_bank;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_with_and_without_bank() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig {
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ff_width: 8,
            d_video: 3,
            vocab_size: 5,
            seed: 1,
        };
        let centroids = Tensor::randn(&[4, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let bank = init_unit_bank(&centroids, 8, 0).unwrap();
        for (variant, bank) in [(Variant::S1, None), (Variant::S3, Some(&bank))] {
            let model = Model::new(config.clone(), bank).unwrap();
            let ckpt = Checkpoint {
                header: CheckpointHeader {
                    variant,
                    config: config.clone(),
                    weights: LossWeights::LRS2,
                    step: 42,
                },
                model,
            };
            let path = dir.path().join("m.ckpt");
            ckpt.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back.header, ckpt.header);
            assert_eq!(back.model.params().tensors(), ckpt.model.params().tensors());
            assert_eq!(back.model.bank(), ckpt.model.bank());
        }
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"AVCKPT01\x01\x00").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"whatever").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
