//! Feature store file.
//!
//! ```text
//! magic      8 bytes  "COCAFEAT"
//! version    u32      1
//! rows       u64      N
//! dim        u64      D
//! flags      u32      bit 0: label block, bit 1: masked block
//! payload    N * D f32, row-major
//! labels     N * i32                      (bit 0)
//! masked     count u64, then per entry:   (bit 1)
//!              row u64, mask_seed u64, D f32
//! ```
//!
//! Everything is little-endian. The file must end exactly after the last
//! block. Every stored vector is unit-normalized within [`NORM_TOLERANCE`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mieci::{ExternalMaskedFeatures, FrozenEncoder};
use crate::numeric::{l2_normalize, FeatureMatrix};

pub const STORE_MAGIC: &[u8; 8] = b"COCAFEAT";
pub const STORE_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;
pub const NORM_TOLERANCE: f64 = 1e-5;
/// Label value for rows without a known source class.
pub const UNLABELED: i32 = -1;

pub const FLAG_LABELS: u32 = 1;
pub const FLAG_MASKED: u32 = 1 << 1;
const KNOWN_FLAGS: u32 = FLAG_LABELS | FLAG_MASKED;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedEntry {
    pub row: u64,
    pub mask_seed: u64,
    pub values: Vec<f32>,
}

/// Unit-normalized features as stored on disk, in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    rows: usize,
    dim: usize,
    payload: Vec<f32>,
    labels: Option<Vec<i32>>,
    masked: Option<Vec<MaskedEntry>>,
}

fn to_unit_f32(v: &[f64]) -> Result<Vec<f32>> {
    Ok(l2_normalize(v)?.into_iter().map(|x| x as f32).collect())
}

fn f32_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

impl FeatureStore {
    /// Normalizes every row and rounds it to single precision.
    pub fn from_matrix(features: &FeatureMatrix) -> Result<Self> {
        let mut payload = Vec::with_capacity(features.rows() * features.dim());
        for row in features.iter_rows() {
            payload.extend(to_unit_f32(row)?);
        }
        Ok(Self {
            rows: features.rows(),
            dim: features.dim(),
            payload,
            labels: None,
            masked: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::ShapeMismatch(format!("{} labels for {} rows", labels.len(), self.rows)));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Adds one masked variant of `row`, normalized on ingest.
    pub fn push_masked(&mut self, row: u64, mask_seed: u64, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: feature.len(),
            });
        }
        if row >= self.rows as u64 {
            return Err(Error::OutOfRange {
                what: "masked row",
                detail: format!("{row} >= {}", self.rows),
            });
        }
        self.masked.get_or_insert_with(Vec::new).push(MaskedEntry {
            row,
            mask_seed,
            values: to_unit_f32(feature)?,
        });
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn masked(&self) -> Option<&[MaskedEntry]> {
        self.masked.as_deref()
    }

    /// Double-precision copy, re-normalized.
    pub fn to_matrix(&self) -> Result<FeatureMatrix> {
        let mut data = Vec::with_capacity(self.payload.len());
        for row in self.payload.chunks_exact(self.dim.max(1)) {
            let v: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
            data.extend(l2_normalize(&v)?);
        }
        FeatureMatrix::new(self.rows, self.dim, data)
    }

    /// Encoder serving the stored masked variants.
    pub fn masked_encoder(&self) -> Result<FrozenEncoder> {
        let mut ext = ExternalMaskedFeatures::default();
        for e in self.masked.iter().flatten() {
            let v: Vec<f64> = e.values.iter().map(|&x| f64::from(x)).collect();
            ext.insert(e.row, e.mask_seed, l2_normalize(&v)?);
        }
        Ok(FrozenEncoder::External(ext))
    }

    pub fn flags(&self) -> u32 {
        let mut flags = 0;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.masked.is_some() {
            flags |= FLAG_MASKED;
        }
        flags
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let masked = self.masked.as_deref().unwrap_or(&[]);
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.payload.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.flags().to_le_bytes());
        for x in &self.payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        if self.masked.is_some() {
            out.extend_from_slice(&(masked.len() as u64).to_le_bytes());
            for e in masked {
                out.extend_from_slice(&e.row.to_le_bytes());
                out.extend_from_slice(&e.mask_seed.to_le_bytes());
                for x in &e.values {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != STORE_MAGIC {
            return Err(Error::BadMagic { expected: "COCAFEAT" });
        }
        let mut r = Cursor { bytes, pos: 8 };
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let rows = r.u64()?;
        let dim = r.u64()?;
        let flags = r.u32()?;
        if flags & !KNOWN_FLAGS != 0 {
            return Err(Error::CorruptedHeader(format!("unknown flag bits {:#x}", flags & !KNOWN_FLAGS)));
        }
        if dim < 2 {
            return Err(Error::CorruptedHeader(format!("dimension {dim} < 2")));
        }
        let cells = rows
            .checked_mul(dim)
            .filter(|c| c.checked_mul(4).is_some_and(|b| b <= usize::MAX as u64))
            .ok_or_else(|| Error::CorruptedHeader(format!("{rows} x {dim} overflows")))?;
        let (rows, dim, cells) = (rows as usize, dim as usize, cells as usize);

        let payload = r.f32s(cells)?;
        for (i, row) in payload.chunks_exact(dim).enumerate() {
            check_norm(i, row)?;
        }
        let labels = if flags & FLAG_LABELS != 0 {
            let raw = r.take(rows.checked_mul(4).ok_or_else(overflow)?)?;
            Some(
                raw.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        } else {
            None
        };
        let masked = if flags & FLAG_MASKED != 0 {
            let count = r.u64()? as usize;
            let mut entries = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                let row = r.u64()?;
                let mask_seed = r.u64()?;
                let values = r.f32s(dim)?;
                if row >= rows as u64 {
                    return Err(Error::CorruptedHeader(format!("masked entry for row {row} of {rows}")));
                }
                check_norm(row as usize, &values)?;
                entries.push(MaskedEntry { row, mask_seed, values });
            }
            Some(entries)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::SizeMismatch {
                expected: r.pos as u64,
                found: bytes.len() as u64,
            });
        }
        Ok(Self {
            rows,
            dim,
            payload,
            labels,
            masked,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_norm(row: usize, v: &[f32]) -> Result<()> {
    let norm = f32_norm(v);
    if (norm - 1.0).abs() > NORM_TOLERANCE || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotNormalized { row, norm });
    }
    Ok(())
}

fn overflow() -> Error {
    Error::CorruptedHeader("size overflow".into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
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

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(overflow)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
