//! Binary checkpoint format.
//!
//! ```text
//! "RGVP"            magic
//! u32               format version
//! u32, bytes        length-prefixed JSON header (model config, step,
//!                   tokenizer tokens, relation vocabulary)
//! u32               tensor count
//! per tensor:
//!   u32, bytes      name
//!   u32             rank
//!   u32 × rank      dims
//!   f32 × ∏dims     row-major values
//! ```
//!
//! All integers and floats are little-endian. Files are written atomically.

use std::path::Path;

use rgvp_core::model::{ModelConfig, ModelState, Param};
use rgvp_core::scene::RelationVocab;
use rgvp_core::tokenizer::Tokenizer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"RGVP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub step: usize,
    pub tokens: Vec<String>,
    pub relations: Vec<String>,
}

/// Weights plus everything needed to tokenize and classify at eval time.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub state: ModelState<f32>,
    pub tokenizer: Tokenizer,
    pub vocab: RelationVocab,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn encode(state: &ModelState<f32>, step: usize, tokenizer: &Tokenizer, vocab: &RelationVocab) -> Vec<u8> {
    let header = Header {
        model: state.config.clone(),
        step,
        tokens: tokenizer.tokens().to_vec(),
        relations: vocab.entries().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * state.param_count() + 64 * state.params.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u32(&mut out, state.params.len());
    for p in &state.params {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape.len());
        for d in &p.shape {
            put_u32(&mut out, *d);
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not an RGVP checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Json { path: path.into(), line: e.line(), source: e })?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::format(path, "tensor size overflow"))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format(path, "tensor size overflow"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.push(Param { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let state = ModelState::from_params(header.model, params)?;
    Ok(Checkpoint {
        step: header.step,
        state,
        tokenizer: Tokenizer::from_tokens(header.tokens)?,
        vocab: RelationVocab::from_entries(header.relations),
    })
}

pub fn save(
    path: &Path,
    state: &ModelState<f32>,
    step: usize,
    tokenizer: &Tokenizer,
    vocab: &RelationVocab,
) -> Result<()> {
    write_atomic(path, &encode(state, step, tokenizer, vocab))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (ModelState<f32>, Tokenizer, RelationVocab) {
        let tok = Tokenizer::build(["the red circle left of the blue square"]);
        let vocab = RelationVocab::from_entries(vec!["left of".into(), "above".into()]);
        let mut cfg = ModelConfig::toy(tok.vocab_size(), vocab.len());
        cfg.d_model = 16;
        cfg.proj_dim = 8;
        cfg.mrc_hidden = 8;
        (ModelState::init(cfg, 4).unwrap(), tok, vocab)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (s, tok, vocab) = fixture();
        let bytes = encode(&s, 7, &tok, &vocab);
        let c = decode(Path::new("m"), &bytes).unwrap();
        assert_eq!(c.step, 7);
        assert_eq!(c.tokenizer, tok);
        assert_eq!(c.vocab, vocab);
        for (a, b) in s.params.iter().zip(&c.state.params) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode(&c.state, 7, &c.tokenizer, &c.vocab), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let (s, tok, vocab) = fixture();
        let bytes = encode(&s, 0, &tok, &vocab);
        let p = Path::new("m");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(p, &bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(p, &bad).unwrap_err().to_string().contains("version 9"));
        assert!(decode(p, &bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(decode(p, &bad).is_err());
    }
}
