//! The `FNT1` binary tensor format.
//!
//! Layout: magic `FNT1`, `u8` rank, `rank × u32` little-endian extents, then
//! the payload as little-endian `f32` in row-major order. Several records may
//! be concatenated; parameter checkpoints store their tensors that way, in
//! the order given by a JSON manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FNT1";

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    encode_into(t, &mut out);
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *pos + n {
        return Err(Error::Format {
            offset: *pos,
            reason: format!(
                "truncated {what}: need {n} bytes, {} left",
                bytes.len() - *pos
            ),
        });
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

/// Decodes one record starting at `*pos`, advancing it past the record.
pub fn decode_at(bytes: &[u8], pos: &mut usize) -> Result<Tensor> {
    let start = *pos;
    if take(bytes, pos, 4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: start,
            reason: "bad magic (expected FNT1)".into(),
        });
    }
    let rank_at = *pos;
    let rank = take(bytes, pos, 1, "rank")?[0] as usize;
    if rank == 0 {
        return Err(Error::Format {
            offset: rank_at,
            reason: "rank must be positive".into(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = *pos;
        let b = take(bytes, pos, 4, "extent")?;
        let e = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        if e == 0 {
            return Err(Error::Format {
                offset: at,
                reason: "zero extent".into(),
            });
        }
        shape.push(e);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format {
            offset: rank_at,
            reason: "extent product overflows".into(),
        })?;
    let payload = take(bytes, pos, n * 4, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data)
}

/// Decodes a buffer holding exactly one record.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let t = decode_at(bytes, &mut pos)?;
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos,
            reason: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(t)
}

pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        out.push(decode_at(bytes, &mut pos)?);
    }
    Ok(out)
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
