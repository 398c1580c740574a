//! Head checkpoint file.
//!
//! ```text
//! magic        8 bytes  "COCAHEAD"
//! version      u32      1
//! kind         u32      0 = linear, 1 = adapter
//! classes      u64      |C^s|
//! dim          u64      D
//! adapter only:
//!   hidden     u64
//!   residual   f64
//!   scale      f64
//!   text       classes * dim f64
//! param count  u64
//! params       f64 * count, in the head's declared order
//! name count   u64
//! names        (u32 byte length, UTF-8 bytes) * name count
//! ```
//!
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::FeatureMatrix;

use super::head::{AdapterHead, ClassifierHead, LinearHead};

pub const HEAD_MAGIC: &[u8; 8] = b"COCAHEAD";
pub const HEAD_VERSION: u32 = 1;

const KIND_LINEAR: u32 = 0;
const KIND_ADAPTER: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCheckpoint {
    pub head: ClassifierHead,
    pub class_names: Vec<String>,
}

impl HeadCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.class_names.len() != self.head.classes() {
            return Err(Error::ClassCountMismatch(format!(
                "{} names for a {}-class head",
                self.class_names.len(),
                self.head.classes()
            )));
        }
        let mut out = Vec::new();
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        let kind = match &self.head {
            ClassifierHead::Linear(_) => KIND_LINEAR,
            ClassifierHead::Adapter(_) => KIND_ADAPTER,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&(self.head.classes() as u64).to_le_bytes());
        out.extend_from_slice(&(self.head.dim() as u64).to_le_bytes());
        if let ClassifierHead::Adapter(a) = &self.head {
            out.extend_from_slice(&(a.hidden() as u64).to_le_bytes());
            out.extend_from_slice(&a.residual_ratio().to_le_bytes());
            out.extend_from_slice(&a.logit_scale().to_le_bytes());
            for v in a.text().as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let params = self.head.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&(self.class_names.len() as u64).to_le_bytes());
        for name in &self.class_names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != HEAD_MAGIC {
            return Err(Error::BadMagic { expected: "COCAHEAD" });
        }
        let version = r.u32()?;
        if version != HEAD_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let kind = r.u32()?;
        let classes = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let head = match kind {
            KIND_LINEAR => {
                let params = r.params()?;
                if params.len() != classes * dim + classes {
                    return Err(Error::CorruptedHeader(format!(
                        "linear head {classes}x{dim} with {} parameters",
                        params.len()
                    )));
                }
                let (w, b) = params.split_at(classes * dim);
                ClassifierHead::Linear(LinearHead::from_parts(classes, dim, w.to_vec(), b.to_vec())?)
            }
            KIND_ADAPTER => {
                let hidden = r.u64()? as usize;
                let residual = r.f64()?;
                let scale = r.f64()?;
                let text = r.reals(classes.checked_mul(dim).ok_or_else(overflow)?)?;
                let params = r.params()?;
                let text = FeatureMatrix::new(classes, dim, text)?;
                ClassifierHead::Adapter(AdapterHead::from_parts(text, hidden, residual, scale, params)?)
            }
            other => return Err(Error::CorruptedHeader(format!("unknown head kind {other}"))),
        };
        let count = r.u64()? as usize;
        let mut class_names = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let name = std::str::from_utf8(raw).map_err(|e| Error::CorruptedHeader(format!("class name: {e}")))?;
            class_names.push(name.to_owned());
        }
        if r.pos != bytes.len() {
            return Err(Error::SizeMismatch {
                expected: r.pos as u64,
                found: bytes.len() as u64,
            });
        }
        let ckpt = Self { head, class_names };
        if ckpt.class_names.len() != ckpt.head.classes() {
            return Err(Error::ClassCountMismatch(format!(
                "{} names for a {}-class head",
                ckpt.class_names.len(),
                ckpt.head.classes()
            )));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn overflow() -> Error {
    Error::CorruptedHeader("size overflow".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(overflow)?;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(overflow)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn params(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        self.reals(n)
    }
}
