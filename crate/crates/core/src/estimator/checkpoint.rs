//! `.aqck` checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! "AQCK" | u32 version
//! u32 num_enc_blocks | u32 num_dec_blocks | u32 base_channels | u32 max_channels
//! u32 use_skip | u32 use_shortcut | u32 patch_size | u64 init seed
//! f32 * len(θ_J) | f32 * len(θ_B) | f32 * len(θ_T)
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Vector lengths follow from the architecture fields.

use std::fs;
use std::path::Path;

use super::network::HeadLayout;
use super::{ArchConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AQCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 7 * 4 + 8;

pub(crate) fn encode(params: &ModelParams) -> Vec<u8> {
    let a = &params.arch;
    let mut out = Vec::with_capacity(HEADER_LEN + params.len() * 4 + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        a.num_enc_blocks,
        a.num_dec_blocks,
        a.base_channels,
        a.max_channels,
        a.use_skip as usize,
        a.use_shortcut as usize,
        a.patch_size,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.seed.to_le_bytes());
    for v in params.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let fail = |reason: String| Error::format(path, reason);
    if bytes.len() < HEADER_LEN + 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fail("missing AQCK header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(fail("CRC32 mismatch".into()));
    }
    let word = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let f: Vec<usize> = (0..7).map(|k| word(8 + 4 * k) as usize).collect();
    let flag = |v: usize, name: &str| match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(fail(format!("{name} flag is {v}"))),
    };
    let arch = ArchConfig {
        num_enc_blocks: f[0],
        num_dec_blocks: f[1],
        base_channels: f[2],
        max_channels: f[3],
        use_skip: flag(f[4], "use_skip")?,
        use_shortcut: flag(f[5], "use_shortcut")?,
        patch_size: f[6],
    };
    arch.validate().map_err(|e| fail(e.to_string()))?;
    let seed = u64::from_le_bytes(body[36..44].try_into().unwrap());
    let per_head = HeadLayout::new(&arch).len;
    let payload = &body[HEADER_LEN..];
    if payload.len() != 3 * per_head * 4 {
        return Err(fail(format!(
            "expected {} parameter bytes, found {}",
            3 * per_head * 4,
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(fail(format!("non-finite parameter at index {i}")));
    }
    let heads = [0, 1, 2].map(|h| values[h * per_head..(h + 1) * per_head].to_vec());
    Ok(ModelParams { arch, seed, heads })
}

/// Writes `params` with values narrowed to `f32`.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
