//! Named-tensor files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic  b"HLCK"
//! u32    format version (1)
//! u32    tensor count
//! per tensor:
//!   u32  name length, then UTF-8 name bytes
//!   u32  rank, then rank × u64 dims
//!   f64  data, row-major
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"HLCK";
const VERSION: u32 = 1;

/// A named, row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    pub fn from_vector(name: impl Into<String>, v: &Array1<f64>) -> Self {
        Self { name: name.into(), shape: vec![v.len()], data: v.to_vec() }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match self.shape[..] {
            [r, c] => Array2::from_shape_vec((r, c), self.data.clone())
                .map_err(|e| Error::Schema(format!("{}: {e}", self.name))),
            _ => Err(Error::Schema(format!("{} has shape {:?}, expected a matrix", self.name, self.shape))),
        }
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        match self.shape[..] {
            [n] if n == self.data.len() => Ok(Array1::from_vec(self.data.clone())),
            _ => Err(Error::Schema(format!("{} has shape {:?}, expected a vector", self.name, self.shape))),
        }
    }
}

pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Schema(format!("{}: truncated tensor file", self.source)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(buf: &[u8], source: &str) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf, pos: 0, source };
    if r.take(4)? != MAGIC {
        return Err(Error::Schema(format!("{source}: not a tensor file")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Schema(format!("{source}: unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Schema(format!("{source}: tensor name is not UTF-8")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::Schema(format!("{source}: {name} is too large")))?;
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Schema(format!("{source}: {name} is too large")))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Tensor { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Schema(format!("{source}: trailing bytes after last tensor")));
    }
    Ok(out)
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensors(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let buf = crate::audit::read_bytes(path)?;
    decode_tensors(&buf, &path.display().to_string())
}

/// Looks up a tensor by name.
pub(crate) fn find<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Schema(format!("missing tensor {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_is_exact() {
        let ts = vec![
            Tensor::from_matrix("a/w", &array![[1.0, -0.0], [f64::MIN_POSITIVE, 3.5e300]]),
            Tensor::from_vector("a/b", &array![0.1, 0.2, 0.3]),
        ];
        let bytes = encode_tensors(&ts);
        assert_eq!(&bytes[..4], b"HLCK");
        let back = decode_tensors(&bytes, "mem").unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in ts.iter().zip(&back) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_tensors(&[Tensor::from_vector("v", &array![1.0, 2.0])]);
        assert!(decode_tensors(&bytes[..bytes.len() - 3], "mem").is_err());
        assert!(decode_tensors(b"NOPE", "mem").is_err());
    }
}
