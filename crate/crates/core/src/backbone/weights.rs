//! TVMW weight files.
//!
//! Layout: magic `TVMW`, u8 version (1), u32 entry count; per entry a u16 name length, the UTF-8
//! name, u8 scalar kind, u8 ndim, `ndim` u32 extents and the little-endian payload. All
//! integers are little-endian. Entries follow the module visiting order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::Reader;
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TVMW_MAGIC: &[u8; 4] = b"TVMW";
pub const TVMW_VERSION: u8 = 1;

pub fn encode_weights<T: Scalar>(module: &impl Module<T>) -> Result<Vec<u8>> {
    let params = module.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(TVMW_MAGIC);
    out.push(TVMW_VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("entry name `{name}` too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::KIND as u8);
        out.push(p.value.ndim() as u8);
        for &d in p.value.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Parses a TVMW buffer into `(name, tensor)` entries in file order.
pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TVMW_MAGIC {
        return Err(Error::Format("bad magic, expected TVMW".into()));
    }
    let version = r.u8()?;
    if version != TVMW_VERSION {
        return Err(Error::Format(format!("unsupported TVMW version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let kind = r.kind()?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let data = r.payload(kind, dims.iter().product())?;
        entries.push((name, Tensor::new(dims, data)?));
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(entries)
}

/// Copies decoded entries into `module`. Every param must be present with matching dims and
/// the file may not carry extra entries; nothing is modified on error.
pub fn apply_weights<T: Scalar>(
    module: &mut impl Module<T>,
    entries: Vec<(String, Tensor<T>)>,
) -> Result<()> {
    let mut by_name: HashMap<String, Tensor<T>> = HashMap::with_capacity(entries.len());
    for (name, t) in entries {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
    }
    for (name, p) in module.named_params() {
        match by_name.get(&name) {
            None => return Err(Error::MissingEntry(name)),
            Some(t) if t.dims() != p.value.dims() => {
                return Err(Error::EntryShape {
                    name,
                    expected: p.value.dims().to_vec(),
                    found: t.dims().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    if by_name.len() != module.named_params().len() {
        let known: Vec<String> = module.named_params().into_iter().map(|(n, _)| n).collect();
        let extra = by_name
            .keys()
            .find(|k| !known.contains(k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::UnexpectedEntry(extra));
    }
    module.visit_mut("", &mut |name, p| {
        if let Some(t) = by_name.remove(name) {
            p.value = t;
        }
    });
    Ok(())
}

pub fn save_weights<T: Scalar>(module: &impl Module<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(module)?)?;
    Ok(())
}

pub fn load_weights<T: Scalar>(module: &mut impl Module<T>, path: impl AsRef<Path>) -> Result<()> {
    apply_weights(module, decode_weights(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_model, Variant};

    #[test]
    fn round_trip_is_byte_identical() {
        let model = build_model::<f32>(Variant::Toy, 10, 4).unwrap();
        let bytes = encode_weights(&model).unwrap();
        let mut other = build_model::<f32>(Variant::Toy, 10, 5).unwrap();
        apply_weights(&mut other, decode_weights(&bytes).unwrap()).unwrap();
        assert_eq!(encode_weights(&other).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let model = build_model::<f64>(Variant::Toy, 10, 4).unwrap();
        let bytes = encode_weights(&model).unwrap();
        assert_eq!(&bytes[..4], b"TVMW");
        assert_eq!(bytes[4], 1);
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(count, model.named_params().len());
        let name_len = u16::from_le_bytes(bytes[9..11].try_into().unwrap()) as usize;
        assert_eq!(&bytes[11..11 + name_len], b"stem.conv1.weight");
        assert_eq!(bytes[11 + name_len], 1);
    }

    #[test]
    fn rejects_corruption() {
        let model = build_model::<f32>(Variant::Toy, 10, 4).unwrap();
        let bytes = encode_weights(&model).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights::<f32>(&bad), Err(Error::Format(_))));
        assert!(matches!(
            decode_weights::<f32>(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_weights::<f32>(&bytes[..7]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wrong_variant_names_entry() {
        let toy = build_model::<f32>(Variant::Toy, 10, 4).unwrap();
        let mut other = build_model::<f32>(Variant::Toy, 7, 4).unwrap();
        let err = apply_weights(
            &mut other,
            decode_weights(&encode_weights(&toy).unwrap()).unwrap(),
        )
        .unwrap_err();
        match err {
            Error::EntryShape { name, .. } => assert_eq!(name, "head.weight"),
            e => panic!("unexpected error {e}"),
        }
    }
}
