//! Parameter checkpoint file.
//!
//! Little-endian binary: magic "SICW", version u16, array count u32, then per
//! array: name length u16, name bytes, rank u8, extents u32 each, raw 32-bit
//! values. Arrays are written in ascending name order so the same parameters
//! always produce the same bytes; save/load round trips bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use super::Tensor;
use crate::error::{Result, SicError};

const MAGIC: &[u8; 4] = b"SICW";
const VERSION: u16 = 1;

/// Named parameter arrays, kept name-sorted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) {
        self.arrays.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.arrays
            .get(name)
            .ok_or_else(|| SicError::data(format!("checkpoint: missing array '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.arrays.len())
            .map_err(|_| SicError::data("checkpoint: too many arrays"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.arrays {
            let nb = name.as_bytes();
            let nlen = u16::try_from(nb.len())
                .map_err(|_| SicError::data(format!("checkpoint: name too long: '{name}'")))?;
            out.extend_from_slice(&nlen.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| SicError::data("checkpoint: rank too large"))?;
            out.push(rank);
            for &e in t.shape() {
                let e32 = u32::try_from(e)
                    .map_err(|_| SicError::data("checkpoint: extent too large"))?;
                out.extend_from_slice(&e32.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(SicError::data("checkpoint: bad magic"));
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(SicError::data(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(nlen)?.to_vec())
                .map_err(|_| SicError::data("checkpoint: name is not UTF-8"))?;
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            if cur.remaining() < numel * 4 {
                return Err(SicError::data("checkpoint: truncated array data"));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
            }
            arrays.insert(name, Tensor::new(shape, data)?);
        }
        if cur.remaining() != 0 {
            return Err(SicError::data("checkpoint: trailing bytes"));
        }
        Ok(Checkpoint { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(SicError::data("checkpoint: unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert(
            "g_a.0.weight",
            Tensor::new(vec![2, 1, 1, 1], vec![0.5f32, -1.25]).unwrap(),
        );
        ck.insert("g_a.0.bias", Tensor::new(vec![2], vec![1.0f32, 3.5]).unwrap());
        ck.insert(
            "odd.values",
            Tensor::new(vec![3], vec![f32::MIN_POSITIVE, -0.0, 1e30]).unwrap(),
        );
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.arrays.len(), back.arrays.len());
        for (name, t) in &ck.arrays {
            let u = back.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            for (a, b) in t.data().iter().zip(u.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "array {name}");
            }
        }
        assert_eq!(bytes, back.to_bytes().unwrap());
    }

    #[test]
    fn serialization_is_name_sorted_and_stable() {
        let mut a = Checkpoint::new();
        a.insert("zz", Tensor::new(vec![1], vec![1.0f32]).unwrap());
        a.insert("aa", Tensor::new(vec![1], vec![2.0f32]).unwrap());
        let mut b = Checkpoint::new();
        b.insert("aa", Tensor::new(vec![1], vec![2.0f32]).unwrap());
        b.insert("zz", Tensor::new(vec![1], vec![1.0f32]).unwrap());
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn header_layout_matches_format() {
        let mut ck = Checkpoint::new();
        ck.insert("w", Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap());
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"SICW");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 1); // name len
        assert_eq!(bytes[12], b'w');
        assert_eq!(bytes[13], 2); // rank
    }

    #[test]
    fn corrupt_magic_is_data_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            SicError::Data(_)
        ));
    }

    #[test]
    fn truncated_file_is_data_error() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut).unwrap_err(),
            SicError::Data(_)
        ));
    }

    #[test]
    fn save_load_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sicw");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
