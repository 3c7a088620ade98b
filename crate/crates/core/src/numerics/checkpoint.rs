//! Binary container for named `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TADA1"            magic
//! u32                 format version
//! u64                 array count
//! per array:
//!   u64 name length, name bytes (UTF-8)
//!   u64 rank, rank x u64 extents
//!   prod(extents) x f32 row-major values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"TADA1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an array, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        let name = name.into();
        match self.arrays.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.arrays.push((name, value)),
        }
    }

    /// Inserts every array of `other`, replacing arrays with the same name.
    pub fn merge(&mut self, other: Checkpoint) {
        for (name, value) in other.arrays {
            self.insert(name, value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.arrays.len() as u64).to_le_bytes())?;
        for (name, t) in &self.arrays {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Format("bad magic, expected TADA1".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let count = r.u64()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = r.u64()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rank = r.u64()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format("array too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            ckpt.arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[..5], b"TADA1");
        assert_eq!(u32::from_le_bytes(b[5..9].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[9..17].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[17..25].try_into().unwrap()), 1);
        assert_eq!(b[25], b'w');
        assert_eq!(u64::from_le_bytes(b[26..34].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[34..42].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[42..46].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 50);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_rejected() {
        let mut c = Checkpoint::new();
        c.insert("a", Tensor::new(vec![1, 3], vec![0.5; 3]).unwrap());
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
