//! Binary checkpoint format.
//!
//! ```text
//! "AMPC" | format_version: u32 LE | header_len: u64 LE | header (UTF-8 JSON) | payload
//! ```
//!
//! The header is `{"config": ModelConfig, "tensors": [{name, shape, byte_offset}]}`.
//! The payload is every tensor's row-major little-endian `f32` data,
//! concatenated in manifest order. Offsets are relative to the payload start
//! and must be gap-free.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, TransformerWeights};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"AMPC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"AMPC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {tensor}: byte_offset {found}, expected {expected}")]
    OffsetMismatch {
        tensor: String,
        expected: u64,
        found: u64,
    },
    #[error("tensor {0} appears more than once")]
    DuplicateTensor(String),
    #[error("tensor {0} missing from manifest")]
    MissingTensor(String),
    #[error("unexpected tensor {0} in manifest")]
    UnexpectedTensor(String),
    #[error("tensor {tensor}: shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

/// Canonical byte stream of a model.
pub fn to_bytes(w: &TransformerWeights) -> Result<Vec<u8>> {
    w.validate()?;
    let named = w.named_tensors();
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let entry = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
            };
            offset += 4 * t.numel() as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: w.config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TransformerWeights, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(r.take(4, "format_version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(r.take(8, "header_len")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len)
        .map_err(|_| CheckpointError::Header("header_len overflows".into()))?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let payload_start = r.pos;
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let expected = (r.pos - payload_start) as u64;
        if entry.byte_offset != expected {
            return Err(CheckpointError::OffsetMismatch {
                tensor: entry.name.clone(),
                expected,
                found: entry.byte_offset,
            });
        }
        let numel: usize = entry.shape.iter().product();
        let raw = r.take(4 * numel, &entry.name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|_| CheckpointError::ShapeMismatch {
            tensor: entry.name.clone(),
            expected: vec![],
            found: entry.shape.clone(),
        })?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(CheckpointError::DuplicateTensor(entry.name.clone()));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    assemble(header.config, tensors)
}

fn take_tensor(
    tensors: &mut BTreeMap<String, Tensor>,
    name: &str,
    expected: &[usize],
) -> Result<Tensor, CheckpointError> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
    if t.shape() != expected {
        return Err(CheckpointError::ShapeMismatch {
            tensor: name.to_string(),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}

/// Per-layer widths are read off the `Wq` and `Wgate` shapes.
fn layer_dims(
    tensors: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    i: usize,
) -> Result<(usize, usize), CheckpointError> {
    let get = |n: &str| {
        let name = format!("layers.{i}.{n}");
        tensors
            .get(&name)
            .ok_or(CheckpointError::MissingTensor(name))
    };
    let wq = get("Wq")?;
    let gate = get("Wgate")?;
    let bad = |name: &str, t: &Tensor| CheckpointError::ShapeMismatch {
        tensor: format!("layers.{i}.{name}"),
        expected: vec![cfg.d_model, 0],
        found: t.shape().to_vec(),
    };
    if wq.shape().len() != 2 || wq.cols() % cfg.d_head != 0 || wq.cols() == 0 {
        return Err(bad("Wq", wq));
    }
    if gate.shape().len() != 2 {
        return Err(bad("Wgate", gate));
    }
    Ok((wq.cols() / cfg.d_head, gate.cols()))
}

fn assemble(
    config: ModelConfig,
    mut tensors: BTreeMap<String, Tensor>,
) -> Result<TransformerWeights, CheckpointError> {
    let (v, d) = (config.vocab_size, config.d_model);
    let token_embedding = take_tensor(&mut tensors, "token_embedding", &[v, d])?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let (n_heads, d_i) = layer_dims(&tensors, &config, i)?;
        let shapes = LayerWeights::expected_shapes(&config, n_heads, d_i);
        let mut parts = shapes
            .iter()
            .map(|(name, shape)| take_tensor(&mut tensors, &format!("layers.{i}.{name}"), shape))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter();
        let mut next = || parts.next().expect("nine tensors");
        layers.push(LayerWeights {
            attn_norm: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            mlp_norm: next(),
            w_gate: next(),
            w_up: next(),
            w_down: next(),
            n_heads,
            d_intermediate: d_i,
        });
    }
    let final_norm = take_tensor(&mut tensors, "final_norm", &[d])?;
    let lm_head = take_tensor(&mut tensors, "lm_head", &[d, v])?;
    if let Some(name) = tensors.into_keys().next() {
        return Err(CheckpointError::UnexpectedTensor(name));
    }
    Ok(TransformerWeights {
        config,
        token_embedding,
        layers,
        final_norm,
        lm_head,
    })
}

pub fn save_checkpoint(w: &TransformerWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(w)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TransformerWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes)?)
}

/// SHA-256 (hex) of the canonical checkpoint bytes.
pub fn fingerprint(w: &TransformerWeights) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_bytes(w)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::*;

    fn sample() -> TransformerWeights {
        random_weights(&tiny_config(2, 4, 8, 2), 17)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let w = sample();
        let bytes = to_bytes(&w).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert_eq!(&bytes[..4], b"AMPC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn heterogeneous_layers_round_trip() {
        let cfg = tiny_config(2, 4, 8, 2);
        let mut w = sample();
        w.layers[1] = LayerWeights::zeros(&cfg, 1, 5);
        let back = from_bytes(&to_bytes(&w).unwrap()).unwrap();
        assert_eq!(back.layers[1].n_heads, 1);
        assert_eq!(back.layers[1].d_intermediate, 5);
        assert_eq!(back, w);
    }

    #[test]
    fn truncation_names_tensor() {
        let bytes = to_bytes(&sample()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            CheckpointError::Truncated(name) => assert_eq!(name, "lm_head"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(from_bytes(&bytes[..2]), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn rejects_magic_version_and_trailing() {
        let mut bytes = to_bytes(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        // Rewrite the header so Wdown of layer 0 claims a transposed shape.
        let bytes = to_bytes(&sample()).unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        let e = header
            .tensors
            .iter_mut()
            .find(|e| e.name == "layers.0.Wdown")
            .unwrap();
        e.shape = vec![4, 16];
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[16 + hlen..]);
        match from_bytes(&out).unwrap_err() {
            CheckpointError::ShapeMismatch { tensor, .. } => assert_eq!(tensor, "layers.0.Wdown"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let w = sample();
        let a = fingerprint(&w).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, fingerprint(&w.clone()).unwrap());
        let mut w2 = w;
        w2.lm_head.data_mut()[0] += 1.0;
        assert_ne!(a, fingerprint(&w2).unwrap());
    }
}
