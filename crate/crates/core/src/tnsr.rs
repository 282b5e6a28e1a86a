//! `TNSR` raw tensor container.
//!
//! Layout (little-endian): magic `b"TNSR"`, format version `u16`, rank `u8`,
//! `rank` dimensions as `u32`, then `prod(dims)` `f32` values in row-major
//! order. Nothing may follow the payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u16 = 1;
/// Ranks above this are rejected when decoding.
pub const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tnsr {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tnsr {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(Error::contract(format!("TNSR dims {dims:?} need {expected} values, got {}", data.len())));
        }
        if dims.len() > MAX_RANK {
            return Err(Error::contract(format!("TNSR rank {} exceeds {MAX_RANK}", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::contract("TNSR dimension does not fit in u32"));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format("TNSR: bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(format!("TNSR: unsupported version {version}")));
        }
        let rank = r.u8()? as usize;
        if rank > MAX_RANK {
            return Err(Error::format(format!("TNSR: rank {rank} exceeds {MAX_RANK}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = element_count(&dims).map_err(|_| Error::format("TNSR: element count overflows"))?;
        if count.checked_mul(4) != Some(r.remaining()) {
            return Err(Error::format(format!(
                "TNSR: payload is {} bytes, dims {dims:?} need {}",
                r.remaining(),
                count.saturating_mul(4)
            )));
        }
        let data = r.f32s(count)?;
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::contract("element count overflows"))
}

/// Little-endian cursor with truncation errors instead of panics.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tnsr::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], 2);
        assert_eq!(bytes.len(), 7 + 8 + 8);
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
    }

    #[test]
    fn decode_errors() {
        let good = Tnsr::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Tnsr::decode(&bad).unwrap_err().to_string().contains("bad magic"));
        assert!(Tnsr::decode(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(Tnsr::decode(&extra).is_err());
        let mut version = good;
        version[4] = 9;
        assert!(Tnsr::decode(&version).is_err());
        // Huge claimed dims must not allocate.
        let mut huge = b"TNSR".to_vec();
        huge.extend_from_slice(&1u16.to_le_bytes());
        huge.push(3);
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(Tnsr::decode(&huge).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(0usize..4, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tnsr::new(dims, data).unwrap();
            prop_assert_eq!(Tnsr::decode(&t.encode()).unwrap(), t);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = Tnsr::decode(&bytes);
        }
    }
}
