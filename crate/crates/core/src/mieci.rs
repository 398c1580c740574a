//! Masked-context consistency.
//!
//! A random subset of image patches is hidden, the masked image is re-encoded
//! by the frozen encoder, and the student head is trained to reproduce the
//! teacher's prediction on the full image from the masked feature.
//!
//! # Mask contract
//!
//! Masks must agree bit-for-bit with external extractors, so the procedure is
//! fixed: with `n = P * P` cells and `m = round(v * n)` (halves away from
//! zero), seed a [`SplitMix64`] with the mask seed, start from the identity
//! order `0..n`, and for `i` in `0..m` swap position `i` with position
//! `i + next_u64() % (n - i)`. The first `m` cells of the order are masked.
//! Cells are numbered row-major.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::classifier::{soft_cross_entropy, ClassifierHead, LossAndGrad, TeacherHead};
use crate::error::{Error, Result};
use crate::numeric::{dot, l2_normalize, FeatureMatrix, ProbVector};
use crate::rng::{self, mix64, SplitMix64};

pub const DEFAULT_GRID: usize = 14;
pub const DEFAULT_MASK_RATIO: f64 = 0.25;
pub const DEFAULT_CONTEXT_SCALE: f64 = 1.0;

const CONTEXT_BANK: usize = 64;

/// A `grid x grid` arrangement of patch embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGridImage {
    pub grid: usize,
    pub patch_dim: usize,
    pub patches: Vec<f64>,
    /// Row of the full-image feature in the feature store.
    pub sample_id: u64,
}

impl PatchGridImage {
    pub fn new(grid: usize, patch_dim: usize, patches: Vec<f64>, sample_id: u64) -> Result<Self> {
        if grid < 2 || patches.len() != grid * grid * patch_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {grid}x{grid} grid of {patch_dim}-d patches",
                patches.len()
            )));
        }
        if patches.iter().any(|p| !p.is_finite()) {
            return Err(Error::DegenerateFeature);
        }
        Ok(Self {
            grid,
            patch_dim,
            patches,
            sample_id,
        })
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch(&self, cell: usize) -> &[f64] {
        &self.patches[cell * self.patch_dim..(cell + 1) * self.patch_dim]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub grid: usize,
    /// `true` where the patch is kept, row-major.
    pub kept: Vec<bool>,
    pub seed: u64,
}

impl PatchMask {
    pub fn masked_count(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }
}

/// Number of cells hidden at ratio `v`.
pub fn masked_cells(grid: usize, ratio: f64) -> usize {
    (ratio * (grid * grid) as f64).round() as usize
}

pub fn generate_mask(grid: usize, ratio: f64, seed: u64) -> Result<PatchMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::OutOfRange {
            what: "mask ratio",
            detail: format!("{ratio} not in [0, 1)"),
        });
    }
    if grid < 2 {
        return Err(Error::OutOfRange {
            what: "grid",
            detail: format!("{grid} < 2"),
        });
    }
    let n = grid * grid;
    let m = masked_cells(grid, ratio);
    if m >= n {
        return Err(Error::FullyMasked { ratio, cells: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut sm = SplitMix64::new(seed);
    for i in 0..m {
        let j = i + (sm.next_u64() % (n - i) as u64) as usize;
        order.swap(i, j);
    }
    let mut kept = vec![true; n];
    for &cell in &order[..m] {
        kept[cell] = false;
    }
    Ok(PatchMask { grid, kept, seed })
}

/// Mask seed for a stored row in a given epoch under the toy encoder.
pub fn mask_seed(run_seed: u64, epoch: u64, row: u64) -> u64 {
    let mut sm = SplitMix64::new(run_seed ^ mix64(epoch.wrapping_add(1)));
    sm.next_u64() ^ mix64(row.wrapping_add(0x5851_F42D_4C95_7F2D))
}

/// Seeded stand-in for a patch-based image encoder.
///
/// Encoding averages the kept patches and applies a fixed orthogonal
/// projection, then normalizes. [`ToyEncoder::synthesize_grid`] builds a grid
/// whose full-image encoding is a given unit feature: every patch is the
/// pre-image of that feature plus a zero-mean context term.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    grid: usize,
    context_scale: f64,
    seed: u64,
    /// Orthogonal, D x D, row-major.
    projection: FeatureMatrix,
    context: FeatureMatrix,
}

impl ToyEncoder {
    pub fn new(dim: usize, grid: usize, context_scale: f64, seed: u64) -> Result<Self> {
        if grid < 2 || dim < 2 {
            return Err(Error::OutOfRange {
                what: "toy encoder",
                detail: format!("grid {grid}, dim {dim}"),
            });
        }
        let mut rng = rng::stream(seed, rng::purpose::TOY_ENCODER);
        let mut projection = FeatureMatrix::zeros(dim, dim);
        for r in 0..dim {
            loop {
                let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                for prev in 0..r {
                    let p = projection.row(prev);
                    let c = dot(&v, p);
                    v.iter_mut().zip(p).for_each(|(x, y)| *x -= c * y);
                }
                if let Ok(u) = l2_normalize(&v) {
                    projection.row_mut(r).copy_from_slice(&u);
                    break;
                }
            }
        }
        let spread = 1.0 / (dim as f64).sqrt();
        let context_rows: Vec<Vec<f64>> = (0..CONTEXT_BANK)
            .map(|_| {
                (0..dim)
                    .map(|_| { let x: f64 = StandardNormal.sample(&mut rng); spread * x })
                    .collect()
            })
            .collect();
        Ok(Self {
            grid,
            context_scale,
            seed,
            projection,
            context: FeatureMatrix::from_rows(&context_rows)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn context_scale(&self) -> f64 {
        self.context_scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y: Vec<f64> = self.projection.iter_rows().map(|r| dot(r, x)).collect();
        l2_normalize(&y)
    }

    /// Patch grid for stored row `sample_id` whose full encoding is `z`.
    pub fn synthesize_grid(&self, z: &[f64], sample_id: u64) -> Result<PatchGridImage> {
        let d = self.dim();
        if z.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: z.len() });
        }
        // pre-image under the orthogonal projection
        let mut base = vec![0.0; d];
        for (r, &zr) in self.projection.iter_rows().zip(z) {
            base.iter_mut().zip(r).for_each(|(b, p)| *b += zr * p);
        }
        let cells = self.grid * self.grid;
        let sample_key = mix64(self.seed ^ mix64(sample_id.wrapping_add(1)));
        let picks: Vec<usize> = (0..cells)
            .map(|c| (mix64(sample_key ^ c as u64) % CONTEXT_BANK as u64) as usize)
            .collect();
        let mut mean_ctx = vec![0.0; d];
        for &p in &picks {
            mean_ctx.iter_mut().zip(self.context.row(p)).for_each(|(m, v)| *m += v);
        }
        mean_ctx.iter_mut().for_each(|m| *m /= cells as f64);

        let mut patches = Vec::with_capacity(cells * d);
        for &p in &picks {
            let ctx = self.context.row(p);
            patches.extend((0..d).map(|i| base[i] + self.context_scale * (ctx[i] - mean_ctx[i])));
        }
        PatchGridImage::new(self.grid, d, patches, sample_id)
    }

    pub fn encode(&self, img: &PatchGridImage, mask: &PatchMask) -> Result<Vec<f64>> {
        if mask.grid != img.grid || img.patch_dim != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} / image {}x{} with {}-d patches for a {}-d encoder",
                mask.grid,
                mask.grid,
                img.grid,
                img.grid,
                img.patch_dim,
                self.dim()
            )));
        }
        let mut mean = vec![0.0; img.patch_dim];
        let mut kept = 0;
        for cell in (0..img.cells()).filter(|&c| mask.kept[c]) {
            mean.iter_mut().zip(img.patch(cell)).for_each(|(m, p)| *m += p);
            kept += 1;
        }
        mean.iter_mut().for_each(|m| *m /= kept as f64);
        self.project(&mean)
    }

    /// Encoding of the whole grid.
    pub fn encode_full(&self, img: &PatchGridImage) -> Result<Vec<f64>> {
        let mask = PatchMask {
            grid: img.grid,
            kept: vec![true; img.cells()],
            seed: 0,
        };
        self.encode(img, &mask)
    }
}

/// Masked features computed offline, keyed by stored row and mask seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalMaskedFeatures {
    by_row: BTreeMap<u64, Vec<(u64, Vec<f64>)>>,
}

impl ExternalMaskedFeatures {
    pub fn insert(&mut self, row: u64, mask_seed: u64, feature: Vec<f64>) {
        let variants = self.by_row.entry(row).or_default();
        match variants.binary_search_by_key(&mask_seed, |(s, _)| *s) {
            Ok(i) => variants[i].1 = feature,
            Err(i) => variants.insert(i, (mask_seed, feature)),
        }
    }

    pub fn get(&self, row: u64, mask_seed: u64) -> Option<&[f64]> {
        let variants = self.by_row.get(&row)?;
        variants
            .binary_search_by_key(&mask_seed, |(s, _)| *s)
            .ok()
            .map(|i| variants[i].1.as_slice())
    }

    /// Mask seeds stored for `row`, ascending.
    pub fn seeds(&self, row: u64) -> Vec<u64> {
        self.by_row
            .get(&row)
            .map(|v| v.iter().map(|(s, _)| *s).collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.by_row.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_row.is_empty()
    }
}

/// The frozen image encoder used to embed masked images.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenEncoder {
    Toy(ToyEncoder),
    External(ExternalMaskedFeatures),
}

impl FrozenEncoder {
    /// Feature of `img` under `mask`. The external variant looks the pair up
    /// by `(img.sample_id, mask.seed)` and ignores the patch contents.
    pub fn encode_masked(&self, img: &PatchGridImage, mask: &PatchMask) -> Result<Vec<f64>> {
        match self {
            FrozenEncoder::Toy(enc) => enc.encode(img, mask),
            FrozenEncoder::External(ext) => ext
                .get(img.sample_id, mask.seed)
                .map(<[f64]>::to_vec)
                .ok_or(Error::MaskedFeatureMissing { row: img.sample_id }),
        }
    }

    /// Masked view of stored row `row` (full feature `z`) for one epoch.
    ///
    /// Toy: a fresh mask from [`mask_seed`]. External: the stored variants of
    /// the row are used in ascending seed order, one per epoch, cycling.
    pub fn masked_view(&self, row: u64, z: &[f64], epoch: u64, run_seed: u64, ratio: f64) -> Result<Vec<f64>> {
        match self {
            FrozenEncoder::Toy(enc) => {
                let img = enc.synthesize_grid(z, row)?;
                let mask = generate_mask(enc.grid(), ratio, mask_seed(run_seed, epoch, row))?;
                enc.encode(&img, &mask)
            }
            FrozenEncoder::External(ext) => {
                let variants = ext.by_row.get(&row).ok_or(Error::MaskedFeatureMissing { row })?;
                Ok(variants[(epoch % variants.len() as u64) as usize].1.clone())
            }
        }
    }
}

/// Soft cross-entropy from the teacher on full features to the student on
/// masked features. The teacher is read-only and contributes no gradient.
pub fn mask_loss(
    teacher: &TeacherHead,
    student: &ClassifierHead,
    full: &FeatureMatrix,
    masked: &FeatureMatrix,
) -> Result<LossAndGrad> {
    if full.rows() != masked.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} full features for {} masked features",
            full.rows(),
            masked.rows()
        )));
    }
    let targets = full
        .iter_rows()
        .map(|z| teacher.head.probabilities(z))
        .collect::<Result<Vec<ProbVector>>>()?;
    soft_cross_entropy(student, masked.iter_rows(), &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::LinearHead;

    #[test]
    fn zero_ratio_masks_nothing() {
        let m = generate_mask(14, 0.0, 3).unwrap();
        assert_eq!(m.masked_count(), 0);
    }

    #[test]
    fn exact_masked_count() {
        let m = generate_mask(4, 0.25, 99).unwrap();
        assert_eq!(m.masked_count(), 4);
        for (p, v) in [(14, 0.25), (14, 0.15), (7, 0.35), (3, 0.5)] {
            let m = generate_mask(p, v, 5).unwrap();
            assert_eq!(m.masked_count(), masked_cells(p, v));
            assert!((m.masked_count() as f64 - v * (p * p) as f64).abs() <= 0.5);
        }
    }

    #[test]
    fn mask_is_deterministic_per_seed() {
        assert_eq!(generate_mask(14, 0.25, 42).unwrap(), generate_mask(14, 0.25, 42).unwrap());
        assert_ne!(generate_mask(14, 0.25, 42).unwrap(), generate_mask(14, 0.25, 43).unwrap());
        assert_eq!(mask_seed(1, 2, 3), mask_seed(1, 2, 3));
        assert_ne!(mask_seed(1, 2, 3), mask_seed(1, 3, 3));
        assert_ne!(mask_seed(1, 2, 3), mask_seed(1, 2, 4));
    }

    #[test]
    fn mask_errors() {
        assert!(matches!(generate_mask(2, 0.9, 0), Err(Error::FullyMasked { .. })));
        assert!(generate_mask(4, 1.0, 0).is_err());
        assert!(generate_mask(4, -0.1, 0).is_err());
    }

    #[test]
    fn splitmix_fisher_yates_by_hand() {
        // n = 4, m = 1: the single masked cell is next_u64() % 4
        let expected = SplitMix64::new(77).next_u64() % 4;
        let m = generate_mask(2, 0.25, 77).unwrap();
        let masked: Vec<usize> = (0..4).filter(|&c| !m.kept[c]).collect();
        assert_eq!(masked, vec![expected as usize]);
    }

    fn unit(rng: &mut impl rand::Rng, d: usize) -> Vec<f64> {
        l2_normalize(&(0..d).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>()).unwrap()
    }

    #[test]
    fn toy_full_encoding_recovers_feature() {
        let enc = ToyEncoder::new(16, 5, 1.0, 7).unwrap();
        let mut rng = rng::stream(1, 0);
        let z = unit(&mut rng, 16);
        let img = enc.synthesize_grid(&z, 12).unwrap();
        let full = enc.encode_full(&img).unwrap();
        for (a, b) in full.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        // identity mask encodes exactly like the full image
        let none = generate_mask(5, 0.0, 9).unwrap();
        assert_eq!(enc.encode(&img, &none).unwrap(), full);
    }

    #[test]
    fn identical_patches_ignore_mask_position() {
        let enc = ToyEncoder::new(6, 4, 1.0, 2).unwrap();
        let patch = [0.3, -0.1, 0.7, 0.2, 0.0, 0.5];
        let img = PatchGridImage::new(4, 6, patch.repeat(16), 0).unwrap();
        let a = enc.encode(&img, &generate_mask(4, 0.25, 1).unwrap()).unwrap();
        let b = enc.encode(&img, &generate_mask(4, 0.25, 2).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn one_masked_cell_matches_direct_recomputation() {
        let (p, d) = (3, 5);
        let enc = ToyEncoder::new(d, p, 1.0, 8).unwrap();
        let mut rng = rng::stream(3, 0);
        let patches: Vec<f64> = (0..p * p * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let img = PatchGridImage::new(p, d, patches.clone(), 4).unwrap();
        let mask = generate_mask(p, 1.0 / 9.0, 31).unwrap();
        assert_eq!(mask.masked_count(), 1);
        let hidden = mask.kept.iter().position(|k| !k).unwrap();

        let mut mean = vec![0.0; d];
        for cell in 0..p * p {
            if cell != hidden {
                for i in 0..d {
                    mean[i] += patches[cell * d + i] / 8.0;
                }
            }
        }
        let projected: Vec<f64> = (0..d)
            .map(|r| (0..d).map(|c| enc.projection.row(r)[c] * mean[c]).sum())
            .collect();
        let expected = l2_normalize(&projected).unwrap();
        let got = enc.encode(&img, &mask).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn external_lookup() {
        let mut ext = ExternalMaskedFeatures::default();
        ext.insert(3, 10, vec![1.0, 0.0]);
        ext.insert(3, 4, vec![0.0, 1.0]);
        let enc = FrozenEncoder::External(ext);
        let img = PatchGridImage::new(2, 1, vec![0.0; 4], 3).unwrap();
        let mask = PatchMask {
            grid: 2,
            kept: vec![true; 4],
            seed: 10,
        };
        assert_eq!(enc.encode_masked(&img, &mask).unwrap(), vec![1.0, 0.0]);
        let missing = PatchMask { seed: 11, ..mask };
        assert!(matches!(
            enc.encode_masked(&img, &missing),
            Err(Error::MaskedFeatureMissing { row: 3 })
        ));
        // epochs walk the variants in seed order
        assert_eq!(enc.masked_view(3, &[0.0, 0.0], 0, 0, 0.25).unwrap(), vec![0.0, 1.0]);
        assert_eq!(enc.masked_view(3, &[0.0, 0.0], 1, 0, 0.25).unwrap(), vec![1.0, 0.0]);
        assert!(enc.masked_view(4, &[0.0, 0.0], 0, 0, 0.25).is_err());
    }

    #[test]
    fn mask_loss_limits() {
        let mut bias = LinearHead::zeros(3, 2);
        bias.bias_mut().copy_from_slice(&[80.0, 0.0, 0.0]);
        let confident = ClassifierHead::Linear(bias);
        let teacher = TeacherHead::new(confident.clone(), 0.99).unwrap();
        let f = FeatureMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(mask_loss(&teacher, &confident, &f, &f).unwrap().loss < 1e-20);

        let flat = ClassifierHead::Linear(LinearHead::zeros(3, 2));
        let teacher = TeacherHead::new(flat.clone(), 0.99).unwrap();
        let out = mask_loss(&teacher, &flat, &f, &f).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
    }
}
