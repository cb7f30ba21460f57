//! TVMT raw tensor files.
//!
//! Layout: magic `TVMT`, u8 version (1), u8 scalar kind (0 = f32, 1 = f64), u8 ndim,
//! `ndim` little-endian u32 extents, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Scalar, ScalarKind};
use crate::tensor::Tensor;

pub const TVMT_MAGIC: &[u8; 4] = b"TVMT";
pub const TVMT_VERSION: u8 = 1;

pub fn encode_tvmt<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "{} dims do not fit TVMT",
            t.ndim()
        )));
    }
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + t.numel() * T::KIND.size());
    out.extend_from_slice(TVMT_MAGIC);
    out.push(TVMT_VERSION);
    out.push(T::KIND as u8);
    out.push(t.ndim() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes a TVMT buffer, converting the payload to `T` if the stored kind differs.
pub fn decode_tvmt<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TVMT_MAGIC {
        return Err(Error::Format("bad magic, expected TVMT".into()));
    }
    let version = r.u8()?;
    if version != TVMT_VERSION {
        return Err(Error::Format(format!("unsupported TVMT version {version}")));
    }
    let kind = r.kind()?;
    let ndim = r.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    let data = r.payload(kind, dims.iter().product())?;
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Tensor::new(dims, data)
}

pub fn write_tvmt<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tvmt(t)?)?;
    Ok(())
}

pub fn read_tvmt<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tvmt(&fs::read(path)?)
}

/// Cursor over a byte slice that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn kind(&mut self) -> Result<ScalarKind> {
        let tag = self.u8()?;
        ScalarKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown scalar kind {tag}")))
    }

    pub(crate) fn payload<T: Scalar>(&mut self, kind: ScalarKind, numel: usize) -> Result<Vec<T>> {
        let width = kind.size();
        let len = numel
            .checked_mul(width)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| match kind {
                ScalarKind::F32 => T::lit(f32::read_le(c) as f64),
                ScalarKind::F64 => T::lit(f64::read_le(c)),
            })
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode_tvmt(&t).unwrap();
        assert_eq!(&b[..4], b"TVMT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &1u32.to_le_bytes());
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f64>::ones(vec![3]);
        let mut b = encode_tvmt(&t).unwrap();
        assert!(matches!(
            decode_tvmt::<f64>(&b[..b.len() - 1]),
            Err(Error::Format(_))
        ));
        b[0] = b'X';
        assert!(matches!(decode_tvmt::<f64>(&b), Err(Error::Format(_))));
    }

    #[test]
    fn f32_file_reads_as_f64() {
        let t = Tensor::<f32>::new(vec![2], vec![0.5, 0.25]).unwrap();
        let back: Tensor<f64> = decode_tvmt(&encode_tvmt(&t).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.5, 0.25]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::<f64>::randn(dims, &mut rng);
            let bytes = encode_tvmt(&t).unwrap();
            let back: Tensor<f64> = decode_tvmt(&bytes).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode_tvmt(&back).unwrap(), bytes);
        }
    }
}
