//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes   "L3PRUNE1"
//! config_len   u32 LE
//! config       UTF-8 key=value lines
//! tensors      repeated until the trailer:
//!   name_len   u32 LE
//!   name       UTF-8
//!   rank       u32 LE
//!   dims       rank × u64 LE
//!   payload    product(dims) × f64 LE
//! crc32        u32 LE, IEEE CRC32 of every preceding byte
//! ```

use std::path::Path;

use super::{Block, ModelConfig, Transformer};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 8] = b"L3PRUNE1";

pub fn write_checkpoint(model: &Transformer) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + model.count_params() * 8);
    buf.extend_from_slice(MAGIC);
    let config = model.config.to_text();
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    for (name, t) in model.named_tensors() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return Err(Error::Truncated(format!("ran out of bytes reading {what} at offset {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Transformer> {
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != &MAGIC[..head.len()] {
        return Err(Error::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(Error::Truncated(format!("file is only {} bytes", bytes.len())));
    }
    let body_end = bytes.len() - 4;
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
        end: body_end,
    };
    let config_len = cur.u32("config length")? as usize;
    let config_text = cur.utf8(config_len, "config")?;
    let mut raw = Vec::new();
    while cur.pos < body_end {
        let name_len = cur.u32("tensor name length")? as usize;
        let name = cur.utf8(name_len, "tensor name")?.to_string();
        let rank = cur.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64("tensor dims")? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let nbytes = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let payload = cur.take(nbytes, &name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        raw.push((name, dims, data));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let config = ModelConfig::from_text(config_text)?;
    let mut tensors = raw.into_iter();
    let mut next = |expected: &str, shape: &[usize]| -> Result<Tensor> {
        let (name, dims, data) = tensors
            .next()
            .ok_or_else(|| Error::Format(format!("missing tensor {expected}")))?;
        if name != expected {
            return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
        }
        if dims != shape {
            return Err(Error::Format(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        Tensor::new(&dims, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))
    };
    let (d, f) = (config.d_model, config.d_ff);
    let token_embedding = next("token_embedding", &[config.vocab_size, d])?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        layers.push(Block {
            attn_norm: next(&p("attn_norm"), &[d])?,
            wq: next(&p("wq"), &[d, d])?,
            wk: next(&p("wk"), &[d, d])?,
            wv: next(&p("wv"), &[d, d])?,
            wo: next(&p("wo"), &[d, d])?,
            mlp_norm: next(&p("mlp_norm"), &[d])?,
            w_gate: next(&p("w_gate"), &[f, d])?,
            w_up: next(&p("w_up"), &[f, d])?,
            w_down: next(&p("w_down"), &[d, f])?,
        });
    }
    let final_norm = next("final_norm", &[d])?;
    if let Some((name, _, _)) = tensors.next() {
        return Err(Error::Format(format!("unexpected extra tensor {name}")));
    }
    Ok(Transformer::from_parts(config, token_embedding, layers, final_norm))
}

pub fn save(model: &Transformer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Transformer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TokenBatch;

    fn model() -> Transformer {
        Transformer::init(ModelConfig {
            vocab_size: 30,
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 10,
            seed: 77,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = write_checkpoint(&m);
        assert_eq!(&bytes[..8], b"L3PRUNE1");
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in m.named_tensors().iter().zip(back.named_tensors()) {
            assert!(a.bit_eq(b));
        }
        let batch = TokenBatch::new(&[vec![1u32, 2, 3]]).unwrap();
        let (x, y) = (m.forward_all(&batch).unwrap(), back.forward_all(&batch).unwrap());
        for (a, b) in x.per_layer.iter().zip(&y.per_layer) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.l3p");
        let m = model();
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = write_checkpoint(&model());
        bytes[0] = b'X';
        let err = read_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic));
        assert_eq!(err.to_string(), "not an L3P checkpoint");
        assert!(matches!(read_checkpoint(b"PK\x03\x04"), Err(Error::BadMagic)));
    }

    #[test]
    fn flipped_payload_bit_fails_crc() {
        let mut bytes = write_checkpoint(&model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checksum { .. })));
        let mut bytes = write_checkpoint(&model());
        let last = bytes.len() - 1;
        bytes[last] ^= 0x80;
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = write_checkpoint(&model());
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 100]), Err(Error::Truncated(_))));
        assert!(matches!(read_checkpoint(&bytes[..10]), Err(Error::Truncated(_))));
        assert!(matches!(read_checkpoint(&bytes[..5]), Err(Error::Truncated(_))));
    }
}
