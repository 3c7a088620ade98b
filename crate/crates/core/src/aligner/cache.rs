//! Alignment cache: per utterance `id, L, T, p_1..p_L`, all little-endian `u32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::masks::validate_positions;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheRecord {
    pub id: u32,
    pub t: usize,
    pub positions: Vec<usize>,
}

fn word(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::OutOfRange(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_cache(records: &[CacheRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        validate_positions(&r.positions, r.t)?;
        out.extend(r.id.to_le_bytes());
        out.extend(word(r.positions.len(), "length")?.to_le_bytes());
        out.extend(word(r.t, "frame count")?.to_le_bytes());
        for &p in &r.positions {
            out.extend(word(p, "position")?.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_cache(bytes: &[u8]) -> Result<Vec<CacheRecord>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "alignment cache length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    let words: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        if i + 3 > words.len() {
            return Err(Error::Format("truncated alignment cache header".into()));
        }
        let (id, l, t) = (words[i], words[i + 1] as usize, words[i + 2] as usize);
        i += 3;
        if i + l > words.len() {
            return Err(Error::Format(format!("utterance {id}: truncated positions")));
        }
        let positions: Vec<usize> = words[i..i + l].iter().map(|&p| p as usize).collect();
        i += l;
        validate_positions(&positions, t)?;
        out.push(CacheRecord { id, t, positions });
    }
    Ok(out)
}

pub fn write_cache(path: impl AsRef<Path>, records: &[CacheRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_cache(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Vec<CacheRecord>> {
    let path = path.as_ref();
    decode_cache(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
