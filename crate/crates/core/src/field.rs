//! Dense pixel fields shared by every module: probability maps, binary masks,
//! per-pixel confidence maps and plain scalar fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower clamp applied to confidences before taking logarithms.
pub const DEFAULT_EPS_CLIP: f64 = 1e-7;

/// Row-major H×W field of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_shape(height, width, values.len())?;
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Field {
        self.map(|v| v * k)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Row-major H×W field of probabilities in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Field", into = "Field")]
pub struct ProbMap(Field);

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_field(Field::new(height, width, values)?)
    }

    pub fn from_field(field: Field) -> Result<Self> {
        if let Some((i, v)) = field.values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!(
                "probability at index {i} is {v}, outside [0, 1]"
            )));
        }
        Ok(Self(field))
    }

    pub fn filled(height: usize, width: usize, p: f64) -> Result<Self> {
        Self::new(height, width, vec![p; height * width])
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self(mask.to_field())
    }

    pub fn field(&self) -> &Field {
        &self.0
    }

    pub fn into_field(self) -> Field {
        self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0.get(row, col)
    }
}

impl TryFrom<Field> for ProbMap {
    type Error = Error;
    fn try_from(f: Field) -> Result<Self> {
        ProbMap::from_field(f)
    }
}

impl From<ProbMap> for Field {
    fn from(p: ProbMap) -> Field {
        p.0
    }
}

/// Row-major H×W field over {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        check_shape(height, width, values.len())?;
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| **v > 1) {
            return Err(Error::Parameter(format!(
                "mask value at index {i} is {v}, expected 0 or 1"
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        check_shape(height, width, height * width)?;
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c) as u8);
            }
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_field(&self) -> Field {
        Field {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v as f64).collect(),
        }
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.values.iter().zip(&other.values).all(|(&a, &b)| a <= b)
    }

    pub fn and_not(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a & (1 - b))
                .collect(),
        }
    }
}

/// Per-pixel confidence of the true class, clamped below at `eps_clip`.
#[derive(Debug, Clone, PartialEq)]
pub struct PtMap {
    field: Field,
    eps_clip: f64,
}

impl PtMap {
    /// Build a confidence map directly from values (each clamped to `eps_clip`).
    pub fn from_values(height: usize, width: usize, values: Vec<f64>, eps_clip: f64) -> Result<Self> {
        check_eps(eps_clip)?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("confidence {v} outside [0, 1]")));
        }
        let field = Field::new(height, width, values)?.map(|v| v.max(eps_clip));
        Ok(Self { field, eps_clip })
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn values(&self) -> &[f64] {
        self.field.values()
    }

    pub fn eps_clip(&self) -> f64 {
        self.eps_clip
    }

    pub fn len(&self) -> usize {
        self.field.len()
    }

    pub fn is_empty(&self) -> bool {
        self.field.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.field.shape()
    }
}

fn check_shape(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "field must be at least 1x1, got {height}x{width}"
        )));
    }
    if len != height * width {
        return Err(Error::Dimension(format!(
            "{height}x{width} field needs {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}

fn check_eps(eps_clip: f64) -> Result<()> {
    if !(eps_clip > 0.0 && eps_clip <= 1e-3) {
        return Err(Error::Parameter(format!(
            "eps_clip must be in (0, 1e-3], got {eps_clip}"
        )));
    }
    Ok(())
}

pub(crate) fn ensure_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Unclamped confidence of the true class: `p` on foreground, `1 - p` on background.
#[inline]
pub fn raw_pt(p: f64, y: u8) -> f64 {
    if y == 1 {
        p
    } else {
        1.0 - p
    }
}

/// Confidence map of the true class, clamped below at `eps_clip`.
pub fn pt_map(pred: &ProbMap, gt: &BinaryMask, eps_clip: f64) -> Result<PtMap> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    check_eps(eps_clip)?;
    let values = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &y)| raw_pt(p, y).max(eps_clip))
        .collect();
    Ok(PtMap {
        field: Field::new(pred.height(), pred.width(), values)?,
        eps_clip,
    })
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.values.iter().zip(&gt.values) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Threshold a probability map; `p >= threshold` maps to foreground.
pub fn binarize(pred: &ProbMap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!(
            "threshold must be in (0, 1), got {threshold}"
        )));
    }
    Ok(BinaryMask {
        height: pred.height(),
        width: pred.width(),
        values: pred.values().iter().map(|&p| (p >= threshold) as u8).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(p: f64) -> ProbMap {
        ProbMap::new(1, 1, vec![p]).unwrap()
    }

    #[test]
    fn pt_case_split() {
        let fg = BinaryMask::ones(1, 1).unwrap();
        let bg = BinaryMask::zeros(1, 1).unwrap();
        assert_eq!(pt_map(&single(0.7), &fg, 1e-7).unwrap().values()[0], 0.7);
        assert!((pt_map(&single(0.7), &bg, 1e-7).unwrap().values()[0] - 0.3).abs() < 1e-15);
        assert_eq!(pt_map(&single(0.0), &fg, 1e-7).unwrap().values()[0], 1e-7);
    }

    #[test]
    fn pt_errors() {
        let fg = BinaryMask::ones(1, 2).unwrap();
        assert!(matches!(pt_map(&single(0.5), &fg, 1e-7), Err(Error::Dimension(_))));
        let fg = BinaryMask::ones(1, 1).unwrap();
        assert!(matches!(pt_map(&single(0.5), &fg, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(pt_map(&single(0.5), &fg, 1e-2), Err(Error::Parameter(_))));
    }

    #[test]
    fn iou_cases() {
        let a = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let b = BinaryMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let all = BinaryMask::ones(2, 2).unwrap();
        let one = BinaryMask::new(2, 2, vec![0, 0, 0, 1]).unwrap();
        assert_eq!(iou(&all, &one).unwrap(), 0.25);
        let e = BinaryMask::zeros(2, 2).unwrap();
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(iou(&e, &BinaryMask::zeros(1, 4).unwrap()).is_err());
    }

    #[test]
    fn binarize_inclusive() {
        assert!(binarize(&single(0.5), 0.5).unwrap().get(0, 0));
        assert!(!binarize(&single(0.49), 0.5).unwrap().get(0, 0));
        let m = binarize(&ProbMap::filled(3, 3, 0.9).unwrap(), 0.5).unwrap();
        assert_eq!(m, BinaryMask::ones(3, 3).unwrap());
        assert!(binarize(&single(0.5), 1.0).is_err());
    }

    #[test]
    fn constructors_validate() {
        assert!(ProbMap::new(1, 1, vec![1.5]).is_err());
        assert!(BinaryMask::new(1, 1, vec![2]).is_err());
        assert!(Field::new(0, 3, vec![]).is_err());
        assert!(Field::new(2, 2, vec![0.0; 3]).is_err());
    }

    fn mask_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>, Vec<u8>)> {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(0u8..=1, n),
            prop::collection::vec(0u8..=1, n),
        )
    }

    proptest! {
        #[test]
        fn pt_relabel_symmetry((p, y, _) in mask_pair(12)) {
            for (&pi, &yi) in p.iter().zip(&y) {
                prop_assert!((raw_pt(pi, yi) - raw_pt(1.0 - pi, 1 - yi)).abs() < 1e-15);
            }
        }

        #[test]
        fn iou_bounded_symmetric((_, a, b) in mask_pair(12)) {
            let a = BinaryMask::new(3, 4, a).unwrap();
            let b = BinaryMask::new(3, 4, b).unwrap();
            let ab = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
        }

        #[test]
        fn binarize_monotone((p, _, _) in mask_pair(12), idx in 0usize..12, bump in 0.0f64..1.0, t in 0.01f64..0.99) {
            let before = binarize(&ProbMap::new(3, 4, p.clone()).unwrap(), t).unwrap();
            let mut raised = p;
            raised[idx] = (raised[idx] + bump).min(1.0);
            let after = binarize(&ProbMap::new(3, 4, raised).unwrap(), t).unwrap();
            prop_assert!(before.is_subset_of(&after));
        }
    }
}
