//! `.tns` binary tensor encoding.
//!
//! Layout: magic `TNS1`, u8 dtype code (1 = f32, 2 = f64), u32 rank,
//! `rank` u32 dimensions, then the raw elements. All integers and
//! elements are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNS1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Little-endian reader that reports absolute byte offsets in errors.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8], base: u64) -> Self {
        Cursor { bytes, pos: 0, base }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads one tensor, converting the element type if the stored dtype
/// differs from `T`.
pub fn read<T: Scalar>(cur: &mut Cursor) -> Result<Tensor<T>> {
    let start = cur.offset();
    if cur.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: start,
            msg: "bad tensor magic".into(),
        });
    }
    let code = cur.u8()?;
    let dtype = DType::from_code(code).ok_or_else(|| cur.error(format!("unknown dtype code {code}")))?;
    let rank = cur.u32()? as usize;
    if rank > 16 {
        return Err(cur.error(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = cur.u32()? as usize;
        if d == 0 {
            return Err(cur.error("zero-sized dimension"));
        }
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| cur.error("element count overflows"))?;
    let raw = cur.take(
        numel
            .checked_mul(dtype.size())
            .ok_or_else(|| cur.error("size overflows"))?,
    )?;
    let data: Vec<T> = if dtype == T::DTYPE {
        raw.chunks(dtype.size()).map(T::read_le).collect()
    } else {
        match dtype {
            DType::F32 => raw.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
        }
    };
    Tensor::new(&shape, data)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = Cursor::new(bytes, 0);
    let t = read(&mut cur)?;
    if cur.remaining() != 0 {
        return Err(cur.error("trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn save<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"TNS1");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..17], &1u32.to_le_bytes());
        assert_eq!(&b[17..21], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 25);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::<f64>::ones(&[3]);
        let b = encode(&t);
        match decode::<f64>(&b[..b.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode::<f64>(b"XXXX"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn scalar_round_trips() {
        let t = Tensor::scalar(std::f64::consts::PI);
        assert_eq!(decode::<f64>(&encode(&t)).unwrap(), t);
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let back = decode::<f32>(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn f64_round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let t = Tensor::new(&[values.len()], values).unwrap();
            let back = decode::<f64>(&encode(&t)).unwrap();
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
