//! Adaptive focal loss.
//!
//! Two data-driven coefficients modify the poly/focal family:
//!
//! * difficulty adjustment `γₐ = 1 - mean foreground pt`, giving the exponent
//!   `γ_d = γ + γₐ`;
//! * gradient representation `μ = N / Σ (1-pt)^γ_d (1 + δ γ_d)`, which rescales
//!   the modulated log term so its gradient mass tracks plain cross-entropy.
//!
//! Both coefficients are computed from the clamped confidence map in a full
//! reduction pass and are held constant when differentiating.
//!
//! The series helpers expand the same gradients as truncated power series in
//! `1 - pt`. They exist to check the derivation numerically and are only
//! defined for `pt > 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, pt_map, raw_pt, BinaryMask, Field, ProbMap, PtMap, DEFAULT_EPS_CLIP};
use crate::losses::{log_over_gap, pt_and_slope, LossOutput};

/// Upper bound on μ when the modulating mass vanishes.
pub const MU_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AflParams {
    pub gamma: f64,
    pub alpha: f64,
    pub delta: f64,
    pub ada_enabled: bool,
    pub agr_enabled: bool,
    pub eps_clip: f64,
}

impl Default for AflParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 1.0,
            delta: 0.4,
            ada_enabled: true,
            agr_enabled: true,
            eps_clip: DEFAULT_EPS_CLIP,
        }
    }
}

impl AflParams {
    /// Both adaptive parts switched off: the loss reduces to poly(γ, α).
    pub fn static_poly(gamma: f64, alpha: f64) -> Self {
        Self {
            gamma,
            alpha,
            ada_enabled: false,
            agr_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=5.0).contains(&self.gamma) {
            return Err(Error::Parameter(format!("gamma must be in [0, 5], got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Parameter(format!("delta must be in [0, 1], got {}", self.delta)));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip <= 1e-3) {
            return Err(Error::Parameter(format!(
                "eps_clip must be in (0, 1e-3], got {}",
                self.eps_clip
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AflDiagnostics {
    pub gamma_a: f64,
    pub gamma_d: f64,
    pub mu: f64,
    pub hard_count: usize,
    pub foreground_pt_mean: f64,
}

fn foreground_stats(pts: impl Iterator<Item = (f64, u8)>) -> (usize, f64) {
    let (mut h, mut sum) = (0usize, 0.0);
    for (pt, y) in pts {
        if y == 1 {
            h += 1;
            sum += pt;
        }
    }
    (h, sum)
}

/// Difficulty adjustment `1 - Σ_fg pt / H` from raw (unclamped) confidences.
///
/// Returns 0 when the ground truth has no foreground.
pub fn gamma_a(pred: &ProbMap, gt: &BinaryMask) -> Result<f64> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    let (h, sum) = foreground_stats(pred.values().iter().zip(gt.values()).map(|(&p, &y)| (raw_pt(p, y), y)));
    Ok(if h == 0 { 0.0 } else { 1.0 - sum / h as f64 })
}

/// Gradient representation factor `N / Σ (1-pt)^γ_d (1 + δ γ_d)`, capped at [`MU_CAP`].
pub fn mu(pt: &PtMap, gamma_d: f64, delta: f64) -> Result<f64> {
    if pt.is_empty() {
        return Err(Error::Dimension("mu needs at least one pixel".into()));
    }
    if gamma_d.is_nan() || gamma_d < 0.0 {
        return Err(Error::Parameter(format!("gamma_d must be >= 0, got {gamma_d}")));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Parameter(format!("delta must be in [0, 1], got {delta}")));
    }
    let n = pt.len() as f64;
    let boost = 1.0 + delta * gamma_d;
    let denom: f64 = pt.values().iter().map(|&p| (1.0 - p).powf(gamma_d) * boost).sum();
    if denom < 1e-12 * n {
        return Ok(MU_CAP);
    }
    Ok((n / denom).min(MU_CAP))
}

/// Adaptive focal loss `Σ [-μ (1-pt)^γ_d ln pt + α (1-pt)^(γ_d+1)]` with its
/// gradient in `p` (coefficients detached) and diagnostics.
pub fn afl(pred: &ProbMap, gt: &BinaryMask, params: &AflParams) -> Result<(LossOutput, AflDiagnostics)> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    params.validate()?;
    let eps = params.eps_clip;
    let pts = pt_map(pred, gt, eps)?;

    // reduction pass
    let (hard_count, fg_sum) = foreground_stats(pts.values().iter().copied().zip(gt.values().iter().copied()));
    let foreground_pt_mean = if hard_count == 0 {
        0.0
    } else {
        fg_sum / hard_count as f64
    };
    let gamma_a = if params.ada_enabled && hard_count > 0 {
        1.0 - foreground_pt_mean
    } else {
        0.0
    };
    let gamma_d = params.gamma + gamma_a;
    let mu = if params.agr_enabled {
        mu(&pts, gamma_d, params.delta)?
    } else {
        1.0
    };

    let mut out = afl_frozen(pred, gt, gamma_d, mu, params.alpha, eps)?;
    let diag = AflDiagnostics {
        gamma_a,
        gamma_d,
        mu,
        hard_count,
        foreground_pt_mean,
    };
    out.diagnostics.insert("gamma_a".into(), gamma_a);
    out.diagnostics.insert("gamma_d".into(), gamma_d);
    out.diagnostics.insert("mu".into(), mu);
    out.diagnostics.insert("hard_count".into(), hard_count as f64);
    Ok((out, diag))
}

/// Adaptive focal loss with fixed coefficients `γ_d` and `μ`.
///
/// This is the map pass of [`afl`]; the gradient is exact for the frozen
/// coefficients.
pub fn afl_frozen(pred: &ProbMap, gt: &BinaryMask, gamma_d: f64, mu: f64, alpha: f64, eps: f64) -> Result<LossOutput> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    if !(gamma_d >= 0.0 && mu > 0.0 && alpha >= 0.0 && eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Parameter(format!(
            "need gamma_d >= 0, mu > 0, alpha >= 0, eps in (0, 1e-3]; got {gamma_d}, {mu}, {alpha}, {eps}"
        )));
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.values().iter().zip(gt.values()) {
        let (pt, slope) = pt_and_slope(p, y, eps);
        let u = 1.0 - pt;
        let ug = u.powf(gamma_d);
        value += mu * (-ug * pt.ln()) + alpha * u.powf(gamma_d + 1.0);
        let d_log = if gamma_d == 0.0 {
            -1.0 / pt
        } else {
            gamma_d * ug * log_over_gap(pt) - ug / pt
        };
        let d = mu * d_log - alpha * (gamma_d + 1.0) * ug;
        grad.push(d * slope);
    }
    Ok(LossOutput {
        value,
        grad: Field::new(pred.height(), pred.width(), grad)?,
        diagnostics: Default::default(),
    })
}

fn check_series_domain(pt: &PtMap, terms: usize, min_terms: usize) -> Result<()> {
    if terms < min_terms {
        return Err(Error::Parameter(format!(
            "need at least {min_terms} terms, got {terms}"
        )));
    }
    if let Some(p) = pt.values().iter().find(|&&p| p <= 0.5) {
        return Err(Error::Domain(format!("series expansion requires pt > 0.5, found {p}")));
    }
    Ok(())
}

fn map_pt(pt: &PtMap, f: impl Fn(f64) -> f64) -> Field {
    pt.field().map(f)
}

/// Truncated Taylor series of `-ln pt`: `Σ_{k=1..terms} (1-pt)^k / k`.
pub fn bce_value_series(pt: &PtMap, terms: usize) -> Result<Field> {
    check_series_domain(pt, terms, 1)?;
    Ok(map_pt(pt, |p| {
        let u = 1.0 - p;
        let mut acc = 0.0;
        let mut uk = 1.0;
        for k in 1..=terms {
            uk *= u;
            acc += uk / k as f64;
        }
        acc
    }))
}

/// Truncated cross-entropy gradient magnitude `Σ_{k=0..terms-1} (1-pt)^k`.
pub fn bce_grad_series(pt: &PtMap, terms: usize) -> Result<Field> {
    check_series_domain(pt, terms, 1)?;
    Ok(map_pt(pt, |p| geometric(1.0 - p, terms)))
}

fn geometric(u: f64, terms: usize) -> f64 {
    let mut acc = 0.0;
    let mut uk = 1.0;
    for _ in 0..terms {
        acc += uk;
        uk *= u;
    }
    acc
}

/// Truncated series of the adaptive-focal gradient magnitude (μ = 1):
/// `(1-pt)^γ_d [(1+α)(1+γ_d) + Σ_{k≥1} (1 + γ_d/(k+1)) (1-pt)^k]`.
pub fn afl_grad_series(pt: &PtMap, gamma_d: f64, alpha: f64, terms: usize) -> Result<Field> {
    check_series_domain(pt, terms, 1)?;
    Ok(map_pt(pt, |p| {
        let u = 1.0 - p;
        let mut acc = (1.0 + alpha) * (1.0 + gamma_d);
        let mut uk = 1.0;
        for k in 1..terms {
            uk *= u;
            acc += (1.0 + gamma_d / (k + 1) as f64) * uk;
        }
        u.powf(gamma_d) * acc
    }))
}

/// Column split of the adaptive-focal gradient series.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDecomposition {
    /// Cross-entropy column `Σ (1-pt)^k`.
    pub nu: Field,
    /// Vertical correction column `γ_d(1+α) + α + Σ_{k≥1} γ_d/(k+1) (1-pt)^k`.
    pub nabla_b: Field,
    /// Proportional replacement `(1 + δ γ_d) ν`.
    pub mixed: Field,
}

pub fn gradient_decomposition(
    pt: &PtMap,
    gamma_d: f64,
    alpha: f64,
    delta: f64,
    terms: usize,
) -> Result<GradientDecomposition> {
    check_series_domain(pt, terms, 2)?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Parameter(format!("delta must be in [0, 1], got {delta}")));
    }
    let nu = map_pt(pt, |p| geometric(1.0 - p, terms));
    let nabla_b = map_pt(pt, |p| {
        let u = 1.0 - p;
        let mut acc = gamma_d * (1.0 + alpha) + alpha;
        let mut uk = 1.0;
        for k in 1..terms {
            uk *= u;
            acc += gamma_d / (k + 1) as f64 * uk;
        }
        acc
    });
    let boost = 1.0 + delta * gamma_d;
    let mixed = nu.map(|v| boost * v);
    Ok(GradientDecomposition { nu, nabla_b, mixed })
}

/// `|Σ a_i b_i - (1/N) Σ a_i Σ b_i|` with `a = (1-pt)^γ_d`, `b = 1/pt`.
///
/// Evaluated through the pairwise form `(1/N) Σ_{i<j} (a_i - a_j)(b_i - b_j)`,
/// which is exactly zero on constant maps. Chebyshev's sum inequality only
/// fixes the sign in general, so this reports the gap instead of asserting
/// equality.
pub fn chebyshev_residual(pt: &PtMap, gamma_d: f64) -> f64 {
    let ab: Vec<(f64, f64)> = pt
        .values()
        .iter()
        .map(|&p| ((1.0 - p).powf(gamma_d), 1.0 / p))
        .collect();
    let mut acc = 0.0;
    for (i, &(ai, bi)) in ab.iter().enumerate() {
        for &(aj, bj) in &ab[i + 1..] {
            acc += (ai - aj) * (bi - bj);
        }
    }
    (acc / ab.len() as f64).abs()
}
