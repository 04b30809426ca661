//! Binary model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"MFGOPNET"
//! 8       4     format version (u32, currently 1)
//! 12      1     mode (0 static, 1 dynamic)
//! 13      4     problem dimension (u32)
//! 17      4     embed width (u32)
//! 21      4     mlp hidden width (u32)
//! 25      4     attention blocks (u32)
//! 29      4     heads per block (u32)
//! 33      8     dropout probability (f64)
//! 41      8     parameter count (u64)
//! 49      8*P   flat parameter array (f64, canonical order)
//! 49+8*P  32    sha-256 over bytes [0, 49+8*P)
//! ```
//!
//! Save followed by load reproduces weights bit-exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelHyper, ModelWeights};

const MAGIC: &[u8; 8] = b"MFGOPNET";
const VERSION: u32 = 1;

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let flat = model.weights.flatten();
    let h = &model.hyper;
    let mut bytes = Vec::with_capacity(49 + 8 * flat.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.push(match h.mode {
        Mode::Static => 0,
        Mode::Dynamic => 1,
    });
    for v in [h.dim, h.embed_width, h.mlp_hidden, h.blocks, h.heads] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&h.dropout.to_le_bytes());
    bytes.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    if bytes.len() < 49 + 32 {
        return Err(Error::Integrity(format!("checkpoint too short: {} bytes", bytes.len())));
    }
    if &bytes[0..8] != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }

    let body_len = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..body_len]);
    if digest.as_slice() != &bytes[body_len..] {
        return Err(Error::Integrity("checksum mismatch".into()));
    }

    let mode = match bytes[12] {
        0 => Mode::Static,
        1 => Mode::Dynamic,
        m => return Err(Error::Integrity(format!("unknown mode byte {m}"))),
    };
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let hyper = ModelHyper {
        mode,
        dim: u32_at(13),
        embed_width: u32_at(17),
        mlp_hidden: u32_at(21),
        blocks: u32_at(25),
        heads: u32_at(29),
        dropout: f64::from_le_bytes(bytes[33..41].try_into().unwrap()),
    };
    let count = u64::from_le_bytes(bytes[41..49].try_into().unwrap()) as usize;
    if body_len != 49 + 8 * count {
        return Err(Error::Integrity(format!(
            "parameter block length mismatch: header says {count} params, body holds {} bytes",
            body_len - 49
        )));
    }
    let mut flat = Vec::with_capacity(count);
    for i in 0..count {
        let off = 49 + 8 * i;
        flat.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    let weights = ModelWeights::from_flat(&hyper, &flat)
        .map_err(|e| Error::Integrity(format!("parameter count does not match hyperparameters: {e}")))?;
    Ok(Model { hyper, weights })
}
