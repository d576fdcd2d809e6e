//! Single-tensor files.
//!
//! ```text
//! magic  "XMT1"                      4 bytes
//! rank   u32 little-endian           4 bytes
//! dims   rank × u32 little-endian
//! data   product(dims) × f64 little-endian, row-major
//! ```
//!
//! Nothing may follow the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"XMT1";
pub const MAX_RANK: usize = 8;

/// Cursor over an in-memory file that reports offsets in its errors.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                self.buf.len() as u64,
                format!("truncated: {what} needs {n} bytes at offset {}, {remaining} available", self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes after payload", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }

    /// `rank | dims | payload`
    pub(crate) fn tensor_record(&mut self) -> Result<Tensor> {
        let at = self.offset();
        let rank = self.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(at, format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.offset();
            let d = self.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(at, "zero extent"));
            }
            dims.push(d);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::format(at, format!("extents {dims:?} overflow")))?;
        let bytes = self.take(numel * 8, "payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(dims, data).map_err(|e| Error::format(at, e.to_string()))
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::arg(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_tensor_record(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    if t.rank() > MAX_RANK {
        return Err(Error::arg(format!("rank {} exceeds {MAX_RANK}", t.rank())));
    }
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    out.reserve(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    put_tensor_record(&mut out, t)?;
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    let t = r.tensor_record()?;
    r.finish()?;
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_file_is_twenty_bytes() {
        let bytes = encode_tensor(&Tensor::scalar(1.5)).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"XMT1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_tensor(&Tensor::scalar(1.0)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_tensor(&Tensor::zeros(&[3, 2])).unwrap();
        for cut in [2, 6, 10, 20, bytes.len() - 1] {
            match decode_tensor(&bytes[..cut]) {
                Err(Error::Format { offset, message }) => {
                    assert_eq!(offset, cut as u64);
                    assert!(message.contains("truncated"), "{message}");
                }
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn rank_limits() {
        let mut bytes = b"XMT1".to_vec();
        bytes.extend_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format { offset: 4, .. })));
        let mut bytes = b"XMT1".to_vec();
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_tensor(&Tensor::scalar(1.0)).unwrap();
        bytes.push(0);
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format { offset: 20, .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(
            dims in prop::collection::vec(1usize..4, 1..=4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut state = seed;
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(state >> 2) // finite: top exponent bits cleared
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
