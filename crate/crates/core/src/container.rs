//! Tensor container: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then one flat little-endian `f32` buffer.
//!
//! The header lists each tensor's name, shape and element offset, plus a
//! free-form `meta` object owned by the caller.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"FFTNSR01";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    total: usize,
}

/// A decoded container. Tensors keep their stored order.
#[derive(Debug, Clone)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn write<S: Scalar>(out: &mut impl Write, meta: &serde_json::Value, tensors: &[(&str, &Tensor<S>)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
        total: offset,
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(offset * 4);
    for (_, t) in tensors {
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read(input: &mut impl Read) -> Result<Container> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| Error::Format("truncated container".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a tensor container".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| Error::Format("truncated container".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 26 {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len];
    input.read_exact(&mut header).map_err(|_| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header)?;

    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != header.total * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header promises {}",
            body.len(),
            header.total * 4
        )));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n > values.len() {
            return Err(Error::Format(format!("tensor {} has a bad offset", e.name)));
        }
        let t = Tensor::new(&e.shape, values[e.offset..e.offset + n].to_vec())
            .map_err(|_| Error::Format(format!("tensor {} has a bad shape", e.name)))?;
        expected += n;
        tensors.push((e.name, t));
    }
    if expected != header.total {
        return Err(Error::Format("tensor table does not cover the payload".into()));
    }
    Ok(Container {
        meta: header.meta,
        tensors,
    })
}

pub fn write_file<S: Scalar>(path: &Path, meta: &serde_json::Value, tensors: &[(&str, &Tensor<S>)]) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, meta, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path)?;
    read(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.5);
        let b = Tensor::<f64>::from_fn(&[4], |i| -(i as f64));
        let meta = serde_json::json!({"k": 1});
        let mut buf = Vec::new();
        write(&mut buf, &meta, &[("a", &a), ("b", &b)]).unwrap();
        let c = read(&mut buf.as_slice()).unwrap();
        assert_eq!(c.meta, meta);
        assert_eq!(c.tensors[0].0, "a");
        assert_eq!(c.tensors[0].1.cast::<f64>(), a);
        assert_eq!(c.tensors[1].1.cast::<f64>(), b);

        buf.pop();
        assert!(matches!(read(&mut buf.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read(&mut &b"garbage!"[..]), Err(Error::Format(_))));
    }
}
