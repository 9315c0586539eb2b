//! Baseline segmentation losses with closed-form per-pixel gradients.
//!
//! Every function returns the loss value together with `∂L/∂p` for each pixel.
//! Values are summed over pixels unless a [`Reduction::Mean`] is requested
//! through [`LossSpec::evaluate`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptive::{self, AflParams};
use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, raw_pt, BinaryMask, Field, ProbMap, DEFAULT_EPS_CLIP};

/// Loss value, gradient with respect to the predicted probabilities, and
/// optional named diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Field,
    pub diagnostics: BTreeMap<String, f64>,
}

impl LossOutput {
    fn new(value: f64, grad: Field) -> Self {
        Self {
            value,
            grad,
            diagnostics: BTreeMap::new(),
        }
    }

    fn scaled(mut self, k: f64) -> Self {
        self.value *= k;
        self.grad = self.grad.scale(k);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Bce,
    Wbce,
    BalancedCe,
    SoftIou,
    Focal,
    Nfl,
    Poly,
    Dice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Shared pixel-wise setup: clamped confidence and `∂pt/∂p`.
///
/// The derivative is zero where the clamp is active.
#[inline]
pub(crate) fn pt_and_slope(p: f64, y: u8, eps: f64) -> (f64, f64) {
    let raw = raw_pt(p, y);
    let sign = if y == 1 { 1.0 } else { -1.0 };
    if raw < eps {
        (eps, 0.0)
    } else {
        (raw, sign)
    }
}

/// `ln(pt) / (1 - pt)`, continuous at `pt = 1` where it equals -1.
#[inline]
pub(crate) fn log_over_gap(pt: f64) -> f64 {
    let u = 1.0 - pt;
    if u == 0.0 {
        -1.0
    } else {
        (-u).ln_1p() / u
    }
}

/// `-(1-pt)^g ln pt` and its derivative in `pt`.
#[inline]
pub(crate) fn focal_term(pt: f64, g: f64) -> (f64, f64) {
    let u = 1.0 - pt;
    let ug = u.powf(g);
    let value = -ug * pt.ln();
    let d = if g == 0.0 {
        -1.0 / pt
    } else {
        g * ug * log_over_gap(pt) - ug / pt
    };
    (value, d)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=5.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma must be in [0, 5], got {gamma}")));
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Parameter(format!("{name} must be a finite value >= 0, got {v}")));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Parameter(format!("eps_clip must be in (0, 1e-3], got {eps}")));
    }
    Ok(())
}

/// Applies `term(pt) -> (value, ∂value/∂pt)` to every pixel and sums.
fn pixelwise(pred: &ProbMap, gt: &BinaryMask, eps: f64, term: impl Fn(f64) -> (f64, f64)) -> Result<LossOutput> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    check_eps(eps)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.values().iter().zip(gt.values()) {
        let (pt, slope) = pt_and_slope(p, y, eps);
        let (v, d) = term(pt);
        value += v;
        grad.push(d * slope);
    }
    Ok(LossOutput::new(value, Field::new(pred.height(), pred.width(), grad)?))
}

/// Binary cross-entropy `-Σ ln pt`.
pub fn bce(pred: &ProbMap, gt: &BinaryMask, eps: f64) -> Result<LossOutput> {
    pixelwise(pred, gt, eps, |pt| (-pt.ln(), -1.0 / pt))
}

/// Focal loss `-Σ (1-pt)^γ ln pt`.
pub fn focal(pred: &ProbMap, gt: &BinaryMask, gamma: f64, eps: f64) -> Result<LossOutput> {
    check_gamma(gamma)?;
    pixelwise(pred, gt, eps, |pt| focal_term(pt, gamma))
}

/// Poly loss `Σ [-(1-pt)^γ ln pt + α (1-pt)^(γ+1)]`.
pub fn poly(pred: &ProbMap, gt: &BinaryMask, gamma: f64, alpha: f64, eps: f64) -> Result<LossOutput> {
    check_gamma(gamma)?;
    check_nonneg("alpha", alpha)?;
    pixelwise(pred, gt, eps, |pt| {
        let (fv, fd) = focal_term(pt, gamma);
        let u = 1.0 - pt;
        (
            fv + alpha * u.powf(gamma + 1.0),
            fd - alpha * (gamma + 1.0) * u.powf(gamma),
        )
    })
}

/// Normalized focal loss: focal value scaled by `N / Σ (1-pt)^γ`.
///
/// The normalizer is treated as a constant for the gradient. A zero
/// normalizer (every pixel perfect) yields a zero loss and gradient.
pub fn nfl(pred: &ProbMap, gt: &BinaryMask, gamma: f64, eps: f64) -> Result<LossOutput> {
    let base = focal(pred, gt, gamma, eps)?;
    let norm: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &y)| (1.0 - pt_and_slope(p, y, eps).0).powf(gamma))
        .sum();
    let scale = if norm > 0.0 { pred.len() as f64 / norm } else { 0.0 };
    let mut out = base.scaled(scale);
    out.diagnostics.insert("normalizer".into(), norm);
    Ok(out)
}

/// Dice loss `1 - (2 Σ p y + s) / (Σ p + Σ y + s)`.
pub fn dice(pred: &ProbMap, gt: &BinaryMask, smooth: f64) -> Result<LossOutput> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    check_nonneg("smooth", smooth)?;
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.values().iter().zip(gt.values()) {
        inter += p * y as f64;
        psum += p;
        ysum += y as f64;
    }
    let num = 2.0 * inter + smooth;
    let den = psum + ysum + smooth;
    if den == 0.0 {
        return Ok(LossOutput::new(0.0, Field::zeros(pred.height(), pred.width())?));
    }
    let grad = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(_, &y)| -(2.0 * y as f64 * den - num) / (den * den))
        .collect();
    Ok(LossOutput::new(
        1.0 - num / den,
        Field::new(pred.height(), pred.width(), grad)?,
    ))
}

/// Weighted, class-balanced and soft-IoU comparison losses.
///
/// For `Wbce`, `beta = None` selects the ground-truth negative/positive ratio.
pub fn aux_loss(
    kind: BaselineKind,
    pred: &ProbMap,
    gt: &BinaryMask,
    beta: Option<f64>,
    eps: f64,
) -> Result<LossOutput> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    check_eps(eps)?;
    match kind {
        BaselineKind::Wbce => {
            let beta = match beta {
                Some(b) => {
                    check_nonneg("beta", b)?;
                    b
                }
                None => {
                    let pos = gt.count();
                    if pos == 0 {
                        return Err(Error::Parameter(
                            "automatic wbce weight needs at least one foreground pixel".into(),
                        ));
                    }
                    (gt.len() - pos) as f64 / pos as f64
                }
            };
            let mut out = weighted_ce(pred, gt, beta, 1.0, eps)?;
            out.diagnostics.insert("beta".into(), beta);
            Ok(out)
        }
        BaselineKind::BalancedCe => {
            let beta = beta.unwrap_or(0.5);
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::Parameter(format!("beta must be in (0, 1), got {beta}")));
            }
            let mut out = weighted_ce(pred, gt, beta, 1.0 - beta, eps)?;
            out.diagnostics.insert("beta".into(), beta);
            Ok(out)
        }
        BaselineKind::SoftIou => soft_iou(pred, gt),
        other => Err(Error::Parameter(format!(
            "{other:?} is not an auxiliary comparison loss"
        ))),
    }
}

fn weighted_ce(pred: &ProbMap, gt: &BinaryMask, w_pos: f64, w_neg: f64, eps: f64) -> Result<LossOutput> {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.values().iter().zip(gt.values()) {
        if y == 1 {
            let q = p.max(eps);
            value -= w_pos * q.ln();
            grad.push(if p >= eps { -w_pos / p } else { 0.0 });
        } else {
            let q = (1.0 - p).max(eps);
            value -= w_neg * q.ln();
            grad.push(if 1.0 - p >= eps { w_neg / (1.0 - p) } else { 0.0 });
        }
    }
    Ok(LossOutput::new(value, Field::new(pred.height(), pred.width(), grad)?))
}

fn soft_iou(pred: &ProbMap, gt: &BinaryMask) -> Result<LossOutput> {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&p, &y) in pred.values().iter().zip(gt.values()) {
        let y = y as f64;
        inter += p * y;
        union += p + y - p * y;
    }
    if union == 0.0 {
        return Ok(LossOutput::new(0.0, Field::zeros(pred.height(), pred.width())?));
    }
    let grad = gt
        .values()
        .iter()
        .map(|&y| {
            let y = y as f64;
            -(y * union - inter * (1.0 - y)) / (union * union)
        })
        .collect();
    Ok(LossOutput::new(
        1.0 - inter / union,
        Field::new(pred.height(), pred.width(), grad)?,
    ))
}

/// A loss together with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LossSpec {
    Bce,
    Wbce { beta: Option<f64> },
    BalancedCe { beta: f64 },
    SoftIou,
    Focal { gamma: f64 },
    Nfl { gamma: f64 },
    Poly { gamma: f64, alpha: f64 },
    Dice { smooth: f64 },
    Afl(AflParams),
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Bce => "bce",
            LossSpec::Wbce { .. } => "wbce",
            LossSpec::BalancedCe { .. } => "balanced_ce",
            LossSpec::SoftIou => "soft_iou",
            LossSpec::Focal { .. } => "focal",
            LossSpec::Nfl { .. } => "nfl",
            LossSpec::Poly { .. } => "poly",
            LossSpec::Dice { .. } => "dice",
            LossSpec::Afl(_) => "afl",
        }
    }

    /// Default hyperparameters for a loss name.
    pub fn by_name(name: &str) -> Result<LossSpec> {
        Ok(match name {
            "bce" => LossSpec::Bce,
            "wbce" => LossSpec::Wbce { beta: None },
            "balanced_ce" => LossSpec::BalancedCe { beta: 0.5 },
            "soft_iou" => LossSpec::SoftIou,
            "focal" => LossSpec::Focal { gamma: 2.0 },
            "nfl" => LossSpec::Nfl { gamma: 2.0 },
            "poly" => LossSpec::Poly { gamma: 2.0, alpha: 1.0 },
            "dice" => LossSpec::Dice { smooth: 1.0 },
            "afl" => LossSpec::Afl(AflParams::default()),
            other => return Err(Error::Parameter(format!("unknown loss {other:?}"))),
        })
    }

    pub const NAMES: [&'static str; 9] = [
        "bce",
        "wbce",
        "balanced_ce",
        "soft_iou",
        "focal",
        "nfl",
        "poly",
        "dice",
        "afl",
    ];

    /// True for losses that sum a per-pixel term (and therefore honor `Mean`).
    pub fn is_pixel_sum(&self) -> bool {
        !matches!(self, LossSpec::Dice { .. } | LossSpec::SoftIou)
    }

    pub fn evaluate(&self, pred: &ProbMap, gt: &BinaryMask, eps: f64, reduction: Reduction) -> Result<LossOutput> {
        let out = match self {
            LossSpec::Bce => bce(pred, gt, eps)?,
            LossSpec::Wbce { beta } => aux_loss(BaselineKind::Wbce, pred, gt, *beta, eps)?,
            LossSpec::BalancedCe { beta } => aux_loss(BaselineKind::BalancedCe, pred, gt, Some(*beta), eps)?,
            LossSpec::SoftIou => aux_loss(BaselineKind::SoftIou, pred, gt, None, eps)?,
            LossSpec::Focal { gamma } => focal(pred, gt, *gamma, eps)?,
            LossSpec::Nfl { gamma } => nfl(pred, gt, *gamma, eps)?,
            LossSpec::Poly { gamma, alpha } => poly(pred, gt, *gamma, *alpha, eps)?,
            LossSpec::Dice { smooth } => dice(pred, gt, *smooth)?,
            LossSpec::Afl(params) => {
                let params = AflParams {
                    eps_clip: eps,
                    ..*params
                };
                adaptive::afl(pred, gt, &params)?.0
            }
        };
        Ok(match reduction {
            Reduction::Mean if self.is_pixel_sum() => out.scaled(1.0 / pred.len() as f64),
            _ => out,
        })
    }
}

/// Convenience for callers that accept the default clamp.
pub fn evaluate_default(spec: &LossSpec, pred: &ProbMap, gt: &BinaryMask) -> Result<LossOutput> {
    spec.evaluate(pred, gt, DEFAULT_EPS_CLIP, Reduction::Sum)
}
