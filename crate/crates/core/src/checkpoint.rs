//! CSN1 parameter checkpoints.
//!
//! ```text
//! offset 0   magic    b"CSN1"
//! offset 4   version  u32 = 1
//! offset 8   kind     u32 (1 = scoring net, 2 = projection, 3 = embedding head)
//! offset 12  count    u32 number of tensors
//! shape table, per tensor:
//!            name_len u32, name (UTF-8), ndim u32, dims u32 × ndim
//! payload:   f32 LE, tensors in table order, row-major
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CSN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ScoringNet = 1,
    Projection = 2,
    EmbeddingHead = 3,
}

impl ModelKind {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Self::ScoringNet),
            2 => Ok(Self::Projection),
            3 => Ok(Self::EmbeddingHead),
            other => Err(Error::Manifest(format!("unknown checkpoint kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }

    /// Looks up a tensor by name and checks its shape.
    pub fn get(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Manifest(format!("checkpoint lacks tensor {name:?}")))?;
        if t.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(&t.data)
    }

    pub fn shape_of(&self, name: &str) -> Result<&[usize]> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.shape.as_slice())
            .ok_or_else(|| Error::Manifest(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name, &[1])?[0])
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Manifest(format!(
                "checkpoint holds {:?}, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for &x in &t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let kind = ModelKind::from_code(cur.u32()?)?;
        let count = cur.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|e| Error::Manifest(e.to_string()))?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let data = cur
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect::<Vec<_>>();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor {name:?}")));
            }
            tensors.push(Tensor { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Manifest(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { kind, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(ModelKind::Projection);
        c.push("weight", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        c.push("bias", &[3], &[0.5, -0.25, 0.0]);
        c
    }

    #[test]
    fn layout_and_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        // header + table ("weight": 4+6+4+8, "bias": 4+4+4+4) + 9 floats
        assert_eq!(bytes.len(), 16 + 22 + 16 + 9 * 4);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let c = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(c.get("weight", &[3, 2]).is_err());
        assert!(c.expect_kind(ModelKind::ScoringNet).is_err());
    }
}
