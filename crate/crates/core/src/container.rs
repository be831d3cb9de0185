//! The single-file binary model container shared by every model kind:
//! magic bytes `KBL1`, a format version, a UTF-8 key-value config block
//! (first key: `kind`, naming the model family inside), then
//! length-prefixed named tensors — name, rank, dims, and 64-bit
//! little-endian values.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::linalg::{Matrix, Vector};

pub(crate) const MODEL_MAGIC: &[u8; 4] = b"KBL1";
pub(crate) const MODEL_VERSION: u32 = 1;
/// Separates list items inside one config value.
pub(crate) const LIST_SEP: char = '\u{1f}';
/// Separates records inside one config value.
pub(crate) const RECORD_SEP: char = '\u{1e}';

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Config(format!("model file is not UTF-8: {e}")))
}

fn write_tensor(w: &mut impl Write, name: &str, dims: &[u32], values: &[f64]) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, dims.len() as u32)?;
    for &d in dims {
        write_u32(w, d)?;
    }
    debug_assert_eq!(dims.iter().map(|&d| d as usize).product::<usize>(), values.len());
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Write one complete container. `kind` names the model family and is
/// checked on read; `kv` keys and values must not contain tabs or
/// newlines of their own (list values use [`LIST_SEP`]/[`RECORD_SEP`]).
pub(crate) fn write_container(
    mut w: impl Write,
    kind: &str,
    kv: &[(String, String)],
    tensors: &[(String, Vec<u32>, Vec<f64>)],
) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    write_u32(&mut w, MODEL_VERSION)?;
    let mut config = format!("kind\t{kind}\n");
    for (k, v) in kv {
        config.push_str(&format!("{k}\t{v}\n"));
    }
    write_u32(&mut w, config.len() as u32)?;
    w.write_all(config.as_bytes())?;
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, dims, values) in tensors {
        write_tensor(&mut w, name, dims, values)?;
    }
    Ok(())
}

#[derive(Debug)]
pub(crate) struct RawTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Read a container back, insisting on the magic, the version, and the
/// model `kind`.
pub(crate) fn read_container(
    mut r: impl Read,
    expected_kind: &str,
) -> Result<(BTreeMap<String, String>, BTreeMap<String, RawTensor>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Config(format!("not a model file (magic {magic:?})")));
    }
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(Error::Config(format!(
            "unsupported model version {version} (expected {MODEL_VERSION})"
        )));
    }
    let config_len = read_u32(&mut r)? as usize;
    let config_text = read_exact_string(&mut r, config_len)?;
    let mut kv = BTreeMap::new();
    for line in config_text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("bad config line {line:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    match kv.get("kind") {
        Some(k) if k == expected_kind => {}
        Some(k) => {
            return Err(Error::Config(format!(
                "model file holds a {k:?} model, expected {expected_kind:?}"
            )))
        }
        None => return Err(Error::Config("model config lacks \"kind\"".into())),
    }

    let count = read_u32(&mut r)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_exact_string(&mut r, name_len)?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
        }
        let total: usize = dims.iter().product();
        let mut values = Vec::with_capacity(total);
        let mut buf = [0u8; 8];
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        if tensors.insert(name.clone(), RawTensor { dims, values }).is_some() {
            return Err(Error::Config(format!("duplicate tensor {name:?} in model file")));
        }
    }
    Ok((kv, tensors))
}

pub(crate) fn take_matrix(
    tensors: &mut BTreeMap<String, RawTensor>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Matrix> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::Config(format!("model file lacks tensor {name:?}")))?;
    if t.dims != [rows, cols] {
        return Err(Error::Dimension(format!(
            "tensor {name:?} has dims {:?}, expected [{rows}, {cols}]",
            t.dims
        )));
    }
    Matrix::from_vec(rows, cols, t.values)
}

pub(crate) fn take_vector(
    tensors: &mut BTreeMap<String, RawTensor>,
    name: &str,
    dim: usize,
) -> Result<Vector> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::Config(format!("model file lacks tensor {name:?}")))?;
    if t.dims != [dim] {
        return Err(Error::Dimension(format!(
            "tensor {name:?} has dims {:?}, expected [{dim}]",
            t.dims
        )));
    }
    Ok(Vector::from_vec(t.values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_bytes() -> Vec<u8> {
        let kv = vec![("dim".to_string(), "3".to_string())];
        let tensors = vec![
            ("a".to_string(), vec![2u32, 3u32], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("b".to_string(), vec![2u32], vec![-1.0, 0.5]),
        ];
        let mut buf = Vec::new();
        write_container(&mut buf, "demo", &kv, &tensors).unwrap();
        buf
    }

    #[test]
    fn container_round_trips() {
        let bytes = sample_bytes();
        let (kv, mut tensors) = read_container(bytes.as_slice(), "demo").unwrap();
        assert_eq!(kv.get("dim").unwrap(), "3");
        assert_eq!(kv.get("kind").unwrap(), "demo");
        let a = take_matrix(&mut tensors, "a", 2, 3).unwrap();
        assert_eq!(a.row(1), &[4.0, 5.0, 6.0]);
        let b = take_vector(&mut tensors, "b", 2).unwrap();
        assert_eq!(b.as_slice(), &[-1.0, 0.5]);
        assert!(tensors.is_empty());
    }

    #[test]
    fn wrong_kind_magic_and_shapes_are_rejected() {
        let bytes = sample_bytes();
        let err = read_container(bytes.as_slice(), "other").unwrap_err();
        assert!(format!("{err}").contains("demo"), "{err}");

        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        assert!(read_container(corrupted.as_slice(), "demo").is_err());

        let (_, mut tensors) = read_container(bytes.as_slice(), "demo").unwrap();
        assert!(take_matrix(&mut tensors, "a", 3, 2).is_err());
        assert!(take_vector(&mut tensors, "missing", 1).is_err());
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut bytes = sample_bytes();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = read_container(bytes.as_slice(), "demo").unwrap_err();
        assert!(format!("{err}").contains("version 99"), "{err}");
    }
}
