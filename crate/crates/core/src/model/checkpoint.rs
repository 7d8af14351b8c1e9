//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `SPCLCKPT`                          |
//! | 8      | 4    | format version (`u32`, currently 1)       |
//! | 12     | 8    | header length `H` (`u64`)                 |
//! | 20     | H    | UTF-8 JSON header                         |
//! | 20 + H | ...  | tensors in declared order, row-major `f64`|
//!
//! The header echoes the model config, seed, epoch count, vocabulary, label
//! set, and the name and shape of every tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Matrix, ModelConfig, SpanClassifierParams, Vocab};
use crate::corpus::LabelSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPCLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub vocab: Vocab,
    pub labels: LabelSet,
    pub tensors: Vec<TensorShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: SpanClassifierParams,
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        seed: u64,
        epoch: usize,
        vocab: Vocab,
        labels: LabelSet,
        params: SpanClassifierParams,
    ) -> Self {
        let tensors = params
            .tensor_names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorShape {
                name,
                rows: t.rows,
                cols: t.cols,
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                config,
                seed,
                epoch,
                vocab,
                labels,
                tensors,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        header.config.validate()?;
        let mut params = SpanClassifierParams::zeros(&header.config);
        let names = params.tensor_names();
        if header.tensors.len() != names.len() {
            return Err(bad("tensor count does not match config"));
        }
        let mut offset = 20 + hlen;
        for ((t, shape), name) in params.tensors_mut().into_iter().zip(&header.tensors).zip(names) {
            if shape.name != name || shape.rows != t.rows || shape.cols != t.cols {
                return Err(bad(&format!("tensor {} does not match config", shape.name)));
            }
            read_tensor(bytes, &mut offset, t).ok_or_else(|| bad("truncated tensor data"))?;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { header, params })
    }
}

fn read_tensor(bytes: &[u8], offset: &mut usize, t: &mut Matrix) -> Option<()> {
    for v in t.data.iter_mut() {
        let chunk = bytes.get(*offset..*offset + 8)?;
        *v = f64::from_le_bytes(chunk.try_into().ok()?);
        *offset += 8;
    }
    Some(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderVariant;
    use crate::rng::seeded;

    #[test]
    fn bytes_round_trip_exactly() {
        let cfg = ModelConfig {
            vocab_size: 7,
            embed_dim: 3,
            encoder: EncoderVariant::Window,
            window_radius: 1,
            hidden_dim: 4,
            num_layers: 2,
            width_embed_dim: 2,
            max_width: 3,
            num_classes: 3,
            dropout: 0.2,
        };
        let params = SpanClassifierParams::init(&cfg, &mut seeded(9)).unwrap();
        let vocab = Vocab::from_tokens(
            ["<pad>", "<unk>", "a", "b", "c", "d", "e"].map(String::from).to_vec(),
            false,
        );
        let labels = LabelSet::new(["LOC", "PER"]).unwrap();
        let ck = Checkpoint::new(cfg, 42, 5, vocab, labels, params);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"SPCLCKPT");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.header.vocab.id("c"), 4);

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
