use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::actp::TextualPrototypeSet;
use crate::error::{Error, Result};
use crate::numeric::{cross_entropy, dot, softmax, FeatureMatrix, ProbVector};
use crate::rng;

pub const LINEAR_INIT_STD: f64 = 0.02;
pub const DEFAULT_RESIDUAL_RATIO: f64 = 0.2;
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;
pub const ADAPTER_REDUCTION: usize = 4;

/// `logits = W z + b`. Parameters are stored as `[W (C x D, row-major) | b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    classes: usize,
    dim: usize,
    params: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            params: vec![0.0; classes * dim + classes],
        }
    }

    /// Gaussian weights with std [`LINEAR_INIT_STD`], zero bias.
    pub fn init(classes: usize, dim: usize, seed: u64) -> Self {
        let mut head = Self::zeros(classes, dim);
        let mut rng = rng::stream(seed, rng::purpose::HEAD_INIT);
        let normal = Normal::new(0.0, LINEAR_INIT_STD).expect("valid std");
        for w in head.weight_mut() {
            *w = normal.sample(&mut rng);
        }
        head
    }

    pub fn from_parts(classes: usize, dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != classes * dim || bias.len() != classes {
            return Err(Error::ShapeMismatch(format!(
                "linear head {classes}x{dim} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        let mut params = weight;
        params.extend(bias);
        Ok(Self { classes, dim, params })
    }

    pub fn weight(&self) -> &[f64] {
        &self.params[..self.classes * self.dim]
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        let n = self.classes * self.dim;
        &mut self.params[..n]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.classes * self.dim..]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let n = self.classes * self.dim;
        &mut self.params[n..]
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        let w = self.weight();
        let b = self.bias();
        (0..self.classes)
            .map(|c| dot(&w[c * self.dim..(c + 1) * self.dim], z) + b[c])
            .collect()
    }

    fn backward(&self, z: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let (gw, gb) = grad.split_at_mut(self.classes * self.dim);
        for (c, &g) in dlogits.iter().enumerate() {
            for (gw, &zd) in gw[c * self.dim..(c + 1) * self.dim].iter_mut().zip(z) {
                *gw += g * zd;
            }
            gb[c] += g;
        }
    }
}

/// Residual bottleneck adapter over the image feature, classified by scaled
/// cosine similarity to fixed class text features.
///
/// `z' = r * up(relu(down(z))) + (1 - r) * z`, `logits = s * <z'/|z'|, t_c>`.
/// Parameters are stored as `[down (D x H) | up (H x D)]`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterHead {
    dim: usize,
    hidden: usize,
    residual_ratio: f64,
    logit_scale: f64,
    text: FeatureMatrix,
    params: Vec<f64>,
}

impl AdapterHead {
    /// Kaiming-uniform `down`/`up` with hidden width `D / 4`.
    pub fn init(text: &TextualPrototypeSet, residual_ratio: f64, logit_scale: f64, seed: u64) -> Result<Self> {
        let dim = text.dim();
        let hidden = (dim / ADAPTER_REDUCTION).max(1);
        let mut rng = rng::stream(seed, rng::purpose::HEAD_INIT);
        let mut params = Vec::with_capacity(2 * dim * hidden);
        for fan_in in [dim, hidden] {
            let bound = (6.0 / fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            params.extend((0..dim * hidden).map(|_| u.sample(&mut rng)));
        }
        Self::from_parts(text.matrix().clone(), hidden, residual_ratio, logit_scale, params)
    }

    pub fn from_parts(
        text: FeatureMatrix,
        hidden: usize,
        residual_ratio: f64,
        logit_scale: f64,
        params: Vec<f64>,
    ) -> Result<Self> {
        let dim = text.dim();
        if params.len() != 2 * dim * hidden {
            return Err(Error::ShapeMismatch(format!(
                "adapter {dim}x{hidden} given {} parameters",
                params.len()
            )));
        }
        if !(0.0..=1.0).contains(&residual_ratio) || logit_scale <= 0.0 {
            return Err(Error::OutOfRange {
                what: "adapter hyperparameters",
                detail: format!("residual_ratio={residual_ratio}, logit_scale={logit_scale}"),
            });
        }
        Ok(Self {
            dim,
            hidden,
            residual_ratio,
            logit_scale,
            text,
            params,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn residual_ratio(&self) -> f64 {
        self.residual_ratio
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn text(&self) -> &FeatureMatrix {
        &self.text
    }

    pub fn down(&self) -> &[f64] {
        &self.params[..self.dim * self.hidden]
    }

    pub fn up(&self) -> &[f64] {
        &self.params[self.dim * self.hidden..]
    }

    fn pass(&self, z: &[f64]) -> AdapterPass {
        let (h_dim, d) = (self.hidden, self.dim);
        let down = self.down();
        let up = self.up();
        let mut pre = vec![0.0; h_dim];
        for (di, &zd) in z.iter().enumerate() {
            for (p, &w) in pre.iter_mut().zip(&down[di * h_dim..(di + 1) * h_dim]) {
                *p += zd * w;
            }
        }
        let act: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
        let mut mixed: Vec<f64> = z.iter().map(|&zd| (1.0 - self.residual_ratio) * zd).collect();
        for (j, &a) in act.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (m, &w) in mixed.iter_mut().zip(&up[j * d..(j + 1) * d]) {
                *m += self.residual_ratio * a * w;
            }
        }
        let n = dot(&mixed, &mixed).sqrt();
        let unit: Vec<f64> = mixed.iter().map(|m| m / n).collect();
        AdapterPass { pre, act, unit, norm: n }
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        let pass = self.pass(z);
        self.text
            .iter_rows()
            .map(|t| self.logit_scale * dot(&pass.unit, t))
            .collect()
    }

    fn backward(&self, z: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let (h_dim, d) = (self.hidden, self.dim);
        let pass = self.pass(z);
        let mut du = vec![0.0; d];
        for (t, &g) in self.text.iter_rows().zip(dlogits) {
            for (x, &tv) in du.iter_mut().zip(t) {
                *x += self.logit_scale * g * tv;
            }
        }
        // through z' / |z'|
        let proj = dot(&pass.unit, &du);
        let dmixed: Vec<f64> = du
            .iter()
            .zip(&pass.unit)
            .map(|(g, u)| (g - u * proj) / pass.norm)
            .collect();
        let dadapter: Vec<f64> = dmixed.iter().map(|g| self.residual_ratio * g).collect();

        let up = self.up();
        let (gdown, gup) = grad.split_at_mut(d * h_dim);
        let mut dpre = vec![0.0; h_dim];
        for j in 0..h_dim {
            if pass.pre[j] <= 0.0 {
                continue;
            }
            let a = pass.act[j];
            let up_row = &up[j * d..(j + 1) * d];
            let gup_row = &mut gup[j * d..(j + 1) * d];
            let mut dh = 0.0;
            for ((gu, &w), &g) in gup_row.iter_mut().zip(up_row).zip(&dadapter) {
                *gu += a * g;
                dh += w * g;
            }
            dpre[j] = dh;
        }
        for (di, &zd) in z.iter().enumerate() {
            for (g, &dp) in gdown[di * h_dim..(di + 1) * h_dim].iter_mut().zip(&dpre) {
                *g += zd * dp;
            }
        }
    }
}

struct AdapterPass {
    pre: Vec<f64>,
    act: Vec<f64>,
    unit: Vec<f64>,
    norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Adapter,
}

/// A trainable classifier over frozen image features.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierHead {
    Linear(LinearHead),
    Adapter(AdapterHead),
}

impl ClassifierHead {
    pub fn kind(&self) -> HeadKind {
        match self {
            ClassifierHead::Linear(_) => HeadKind::Linear,
            ClassifierHead::Adapter(_) => HeadKind::Adapter,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ClassifierHead::Linear(h) => h.classes,
            ClassifierHead::Adapter(h) => h.text.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ClassifierHead::Linear(h) => h.dim,
            ClassifierHead::Adapter(h) => h.dim,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            ClassifierHead::Linear(h) => &h.params,
            ClassifierHead::Adapter(h) => &h.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            ClassifierHead::Linear(h) => &mut h.params,
            ClassifierHead::Adapter(h) => &mut h.params,
        }
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        Ok(match self {
            ClassifierHead::Linear(h) => h.logits(z),
            ClassifierHead::Adapter(h) => h.logits(z),
        })
    }

    pub fn probabilities(&self, z: &[f64]) -> Result<ProbVector> {
        Ok(softmax(&self.forward(z)?))
    }

    /// Adds `d loss / d params` for one input, given `d loss / d logits`.
    pub fn accumulate_grad(&self, z: &[f64], dlogits: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check_dim(z)?;
        if dlogits.len() != self.classes() || grad.len() != self.params().len() {
            return Err(Error::ShapeMismatch("gradient buffers do not match head".into()));
        }
        match self {
            ClassifierHead::Linear(h) => h.backward(z, dlogits, grad),
            ClassifierHead::Adapter(h) => h.backward(z, dlogits, grad),
        }
        Ok(())
    }

    /// True when `other` has the same kind and parameter layout.
    pub fn same_shape(&self, other: &ClassifierHead) -> bool {
        self.kind() == other.kind()
            && self.classes() == other.classes()
            && self.dim() == other.dim()
            && self.params().len() == other.params().len()
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl LossAndGrad {
    pub fn zeros(params: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![0.0; params],
        }
    }

    pub fn add_assign(&mut self, other: &LossAndGrad) {
        self.loss += other.loss;
        self.grad.iter_mut().zip(&other.grad).for_each(|(a, b)| *a += b);
    }
}

/// Mean soft cross-entropy of `head` over `inputs` against `targets`, with its
/// exact gradient (`softmax - target`, back-propagated).
pub fn soft_cross_entropy<'a, I>(head: &ClassifierHead, inputs: I, targets: &[ProbVector]) -> Result<LossAndGrad>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut out = LossAndGrad::zeros(head.params().len());
    let mut count = 0;
    for (z, target) in inputs.into_iter().zip(targets) {
        if target.len() != head.classes() {
            return Err(Error::DimensionMismatch {
                expected: head.classes(),
                got: target.len(),
            });
        }
        let p = head.probabilities(z)?;
        out.loss += cross_entropy(target, &p)?;
        let dlogits: Vec<f64> = p.as_slice().iter().zip(target.as_slice()).map(|(p, t)| p - t).collect();
        head.accumulate_grad(z, &dlogits, &mut out.grad)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    if count != targets.len() {
        return Err(Error::ShapeMismatch(format!("{count} inputs for {} targets", targets.len())));
    }
    let inv = 1.0 / count as f64;
    out.loss *= inv;
    out.grad.iter_mut().for_each(|g| *g *= inv);
    Ok(out)
}

/// Mean cross-entropy over a batch of image features.
pub fn image_loss(head: &ClassifierHead, batch: &FeatureMatrix, targets: &[ProbVector]) -> Result<LossAndGrad> {
    if batch.rows() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} features for {} targets",
            batch.rows(),
            targets.len()
        )));
    }
    soft_cross_entropy(head, batch.iter_rows(), targets)
}

/// Mean cross-entropy of each class text feature against its own class.
pub fn text_loss(head: &ClassifierHead, textual: &TextualPrototypeSet) -> Result<LossAndGrad> {
    if textual.len() != head.classes() {
        return Err(Error::ClassCountMismatch(format!(
            "head has {} classes, textual set has {}",
            head.classes(),
            textual.len()
        )));
    }
    let targets: Vec<ProbVector> = (0..textual.len()).map(|c| ProbVector::one_hot(textual.len(), c)).collect();
    soft_cross_entropy(head, textual.matrix().iter_rows(), &targets)
}

pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::l2_normalize;

    fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        l2_normalize(&(0..d).map(|_| normal.sample(rng)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_forward_picks_column() {
        let (c, d) = (3, 4);
        let weight: Vec<f64> = (0..c * d).map(|i| i as f64 * 0.5 - 1.0).collect();
        let head = ClassifierHead::Linear(LinearHead::from_parts(c, d, weight.clone(), vec![0.0; c]).unwrap());
        let logits = head.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let column: Vec<f64> = (0..c).map(|r| weight[r * d]).collect();
        assert_eq!(logits, column);
        assert!(head.forward(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn adapter_without_residual_is_zero_shot() {
        let mut rng = rng::stream(5, 0);
        let text_rows: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, 8)).collect();
        let text = TextualPrototypeSet::unnamed(&FeatureMatrix::from_rows(&text_rows).unwrap()).unwrap();
        let init = AdapterHead::init(&text, 0.2, 100.0, 1).unwrap();
        let head = AdapterHead::from_parts(text.matrix().clone(), init.hidden(), 0.0, 100.0, init.params.clone()).unwrap();
        let z = random_unit(&mut rng, 8);
        let logits = ClassifierHead::Adapter(head).forward(&z).unwrap();
        for (c, l) in logits.iter().enumerate() {
            assert!((l - 100.0 * dot(&z, text.row(c))).abs() < 1e-10);
        }
    }

    #[test]
    fn adapter_matches_straight_line_reimplementation() {
        let mut rng = rng::stream(9, 0);
        let d = 8;
        let text_rows: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, d)).collect();
        let text = TextualPrototypeSet::unnamed(&FeatureMatrix::from_rows(&text_rows).unwrap()).unwrap();
        let head = AdapterHead::init(&text, 0.2, 100.0, 4).unwrap();
        let z = random_unit(&mut rng, d);

        let h = head.hidden();
        let (down, up) = (head.down(), head.up());
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let mut s = 0.0;
            for i in 0..d {
                s += z[i] * down[i * h + j];
            }
            hidden[j] = if s > 0.0 { s } else { 0.0 };
        }
        let mut mixed = vec![0.0; d];
        for i in 0..d {
            let mut f = 0.0;
            for j in 0..h {
                f += hidden[j] * up[j * d + i];
            }
            mixed[i] = 0.2 * f + 0.8 * z[i];
        }
        let unit = l2_normalize(&mixed).unwrap();
        let expected: Vec<f64> = text_rows
            .iter()
            .map(|t| 100.0 * unit.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let got = ClassifierHead::Adapter(head).forward(&z).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn confident_correct_prediction_has_tiny_loss() {
        let mut head = LinearHead::zeros(3, 2);
        head.bias_mut().copy_from_slice(&[60.0, 0.0, 0.0]);
        let head = ClassifierHead::Linear(head);
        let batch = FeatureMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let out = image_loss(&head, &batch, &[ProbVector::one_hot(3, 0)]).unwrap();
        assert!(out.loss < 1e-20);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-20));
    }

    #[test]
    fn uniform_targets_minimised_by_uniform_prediction() {
        let head = ClassifierHead::Linear(LinearHead::init(4, 3, 2));
        let batch = FeatureMatrix::from_rows(&[[0.0, 1.0, 0.0], [0.6, 0.8, 0.0]]).unwrap();
        let targets = vec![ProbVector::uniform(4); 2];
        let out = image_loss(&head, &batch, &targets).unwrap();
        assert!(out.loss >= 4f64.ln() - 1e-12);
        let zero = ClassifierHead::Linear(LinearHead::zeros(4, 3));
        let flat = image_loss(&zero, &batch, &targets).unwrap();
        assert!((flat.loss - 4f64.ln()).abs() < 1e-12);
        assert!(flat.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn text_loss_zero_head_two_symmetric_classes() {
        let m = FeatureMatrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let text = TextualPrototypeSet::unnamed(&m).unwrap();
        let out = text_loss(&ClassifierHead::Linear(LinearHead::zeros(2, 2)), &text).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn text_loss_small_for_aligned_head() {
        let m = FeatureMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let text = TextualPrototypeSet::unnamed(&m).unwrap();
        let head = LinearHead::from_parts(2, 2, vec![50.0, 0.0, 0.0, 50.0], vec![0.0; 2]).unwrap();
        let out = text_loss(&ClassifierHead::Linear(head), &text).unwrap();
        assert!(out.loss < 1e-20);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let head = ClassifierHead::Linear(LinearHead::zeros(2, 2));
        assert!(matches!(
            image_loss(&head, &FeatureMatrix::zeros(0, 2), &[]),
            Err(Error::EmptyBatch)
        ));
    }
}
