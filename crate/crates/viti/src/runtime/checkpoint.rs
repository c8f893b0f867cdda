//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        b"VITI"
//! version      u16 (currently 1)
//! config       layers, heads, head_dim, ffn_mult, vocab_size, max_seq  (6 x u32)
//! weights      f32 arrays in this order:
//!   tok_emb [vocab x hidden]
//!   pos_emb [max_seq x hidden]
//!   per layer:
//!     ln1_gain [hidden], ln1_bias [hidden]
//!     w_q for each head [hidden x D], then w_k for each head, then w_v
//!     w_o [hidden x hidden]
//!     ln2_gain [hidden], ln2_bias [hidden]
//!     w1 [hidden x inner], w2 [hidden x inner]
//!   final_gain [hidden], final_bias [hidden]
//!   w_out [hidden x vocab]
//! ```

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::artifact::atomic_write;
use crate::error::{Result, VitiError};
use crate::linalg::Matrix;

use super::{LayerWeights, Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VITI";
pub const CHECKPOINT_VERSION: u16 = 1;

/// SHA-256 of the serialized config fields; embedded in dependent artifacts
/// so loaders can reject mismatched model/probe/dataset combinations.
pub fn config_hash(config: &ModelConfig) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for v in [
        config.layers,
        config.heads,
        config.head_dim,
        config.ffn_mult,
        config.vocab_size,
        config.max_seq,
    ] {
        hasher.update((v as u32).to_le_bytes());
    }
    hasher.finalize().into()
}

fn write_config(w: &mut impl Write, config: &ModelConfig) -> Result<()> {
    for v in [
        config.layers,
        config.heads,
        config.head_dim,
        config.ffn_mult,
        config.vocab_size,
        config.max_seq,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, read_f32s(r, rows * cols)?)
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_config(w, &model.config)?;
        write_f32s(w, model.tok_emb.data())?;
        write_f32s(w, model.pos_emb.data())?;
        for lw in &model.layers {
            write_f32s(w, &lw.ln1_gain)?;
            write_f32s(w, &lw.ln1_bias)?;
            for m in &lw.w_q {
                write_f32s(w, m.data())?;
            }
            for m in &lw.w_k {
                write_f32s(w, m.data())?;
            }
            for m in &lw.w_v {
                write_f32s(w, m.data())?;
            }
            write_f32s(w, lw.w_o.data())?;
            write_f32s(w, &lw.ln2_gain)?;
            write_f32s(w, &lw.ln2_bias)?;
            write_f32s(w, lw.w1.data())?;
            write_f32s(w, lw.w2.data())?;
        }
        write_f32s(w, &model.final_gain)?;
        write_f32s(w, &model.final_bias)?;
        write_f32s(w, model.w_out.data())?;
        Ok(())
    })
}

/// Load a checkpoint, rejecting bad magic or version.
pub fn load_model(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(VitiError::Version(format!(
            "bad checkpoint magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let ver = u16::from_le_bytes(ver);
    if ver != CHECKPOINT_VERSION {
        return Err(VitiError::Version(format!(
            "unsupported checkpoint version {ver}"
        )));
    }
    let config = ModelConfig {
        layers: read_u32(&mut r)? as usize,
        heads: read_u32(&mut r)? as usize,
        head_dim: read_u32(&mut r)? as usize,
        ffn_mult: read_u32(&mut r)? as usize,
        vocab_size: read_u32(&mut r)? as usize,
        max_seq: read_u32(&mut r)? as usize,
    };
    config.validate()?;
    let hd = config.hidden();
    let inner = config.ffn_inner();
    let tok_emb = read_matrix(&mut r, config.vocab_size, hd)?;
    let pos_emb = read_matrix(&mut r, config.max_seq, hd)?;
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let ln1_gain = read_f32s(&mut r, hd)?;
        let ln1_bias = read_f32s(&mut r, hd)?;
        let mut w_q = Vec::with_capacity(config.heads);
        for _ in 0..config.heads {
            w_q.push(read_matrix(&mut r, hd, config.head_dim)?);
        }
        let mut w_k = Vec::with_capacity(config.heads);
        for _ in 0..config.heads {
            w_k.push(read_matrix(&mut r, hd, config.head_dim)?);
        }
        let mut w_v = Vec::with_capacity(config.heads);
        for _ in 0..config.heads {
            w_v.push(read_matrix(&mut r, hd, config.head_dim)?);
        }
        let w_o = read_matrix(&mut r, hd, hd)?;
        let ln2_gain = read_f32s(&mut r, hd)?;
        let ln2_bias = read_f32s(&mut r, hd)?;
        let w1 = read_matrix(&mut r, hd, inner)?;
        let w2 = read_matrix(&mut r, hd, inner)?;
        layers.push(LayerWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            w1,
            w2,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
        });
    }
    let final_gain = read_f32s(&mut r, hd)?;
    let final_bias = read_f32s(&mut r, hd)?;
    let w_out = read_matrix(&mut r, hd, config.vocab_size)?;
    // trailing bytes mean a corrupt or mismatched file
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(VitiError::Version(format!(
            "trailing bytes in checkpoint {}",
            path.display()
        )));
    }
    Ok(Model {
        config,
        tok_emb,
        pos_emb,
        layers,
        final_gain,
        final_bias,
        w_out,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 3,
            ffn_mult: 2,
            vocab_size: 11,
            max_seq: 8,
        }
    }

    #[test]
    fn roundtrip_bytes_exact() {
        let mut rng = Rng::new(7);
        let model = Model::init(tiny_config(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.viti");
        let p2 = dir.path().join("b.viti");
        save_model(&model, &p1).unwrap();
        let loaded = load_model(&p1).unwrap();
        save_model(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.tok_emb.data(), model.tok_emb.data());
        assert_eq!(loaded.layers[1].w_v[1].data(), model.layers[1].w_v[1].data());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.viti");
        std::fs::write(&p, b"NOPE\x01\x00rest").unwrap();
        assert!(matches!(load_model(&p), Err(VitiError::Version(_))));
    }

    #[test]
    fn rejects_bad_version() {
        let mut rng = Rng::new(7);
        let model = Model::init(tiny_config(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v9.viti");
        save_model(&model, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 9; // version low byte
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_model(&p), Err(VitiError::Version(_))));
    }

    #[test]
    fn config_hash_changes_with_config() {
        let c1 = tiny_config();
        let mut c2 = c1;
        c2.heads = 3;
        assert_ne!(config_hash(&c1), config_hash(&c2));
        assert_eq!(config_hash(&c1), config_hash(&tiny_config()));
    }
}
