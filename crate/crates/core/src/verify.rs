//! Executable checks of the loss derivations: finite-difference gradient
//! checks and algebraic identity sweeps. Used by the `loss grad-check` and
//! `loss identity-check` commands.

use rand::Rng as _;
use serde::Serialize;

use crate::adaptive::{afl, afl_frozen, afl_grad_series, bce_value_series, chebyshev_residual, AflParams};
use crate::error::{Error, Result};
use crate::field::{BinaryMask, ProbMap, PtMap, DEFAULT_EPS_CLIP};
use crate::losses::{bce, focal, poly, LossOutput, LossSpec, Reduction};
use crate::rng::{stream, Rng, Seed};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so vanishing gradients are
/// compared on an absolute scale.
pub const FD_REL_FLOOR: f64 = 1e-3;
/// Range of pt drawn for gradient checks, well away from the clamp.
pub const FD_PT_RANGE: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub tolerance: f64,
}

impl InvariantCheck {
    /// Passes when `measured <= tolerance` (NaN fails).
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            pass: measured <= tolerance,
            measured,
            tolerance,
        }
    }

    /// Passes when `measured >= tolerance`.
    pub fn at_least(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            pass: measured >= tolerance,
            measured,
            tolerance,
        }
    }

    /// Counts violations; passes when there are none.
    pub fn violations(name: impl Into<String>, count: usize) -> Self {
        Self::at_most(name, count as f64, 0.0)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// A loss evaluated at one map, with everything detached frozen.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub loss: LossSpec,
    pub pred: ProbMap,
    pub gt: BinaryMask,
}

fn random_map(rng: &mut Rng, force_fg: bool) -> Result<(ProbMap, BinaryMask)> {
    let h = rng.random_range(1..=5);
    let w = rng.random_range(1..=5);
    let mut labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..=1u8)).collect();
    if force_fg && !labels.contains(&1) {
        let i = rng.random_range(0..labels.len());
        labels[i] = 1;
    }
    let (lo, hi) = FD_PT_RANGE;
    let probs = labels
        .iter()
        .map(|&y| {
            let pt = rng.random_range(lo..=hi);
            if y == 1 {
                pt
            } else {
                1.0 - pt
            }
        })
        .collect();
    Ok((ProbMap::new(h, w, probs)?, BinaryMask::new(h, w, labels)?))
}

fn random_spec(name: &str, rng: &mut Rng) -> Result<LossSpec> {
    let gamma = rng.random_range(0.0..=5.0);
    let alpha = rng.random_range(0.0..=3.0);
    Ok(match name {
        "bce" => LossSpec::Bce,
        "wbce" => LossSpec::Wbce { beta: None },
        "balanced_ce" => LossSpec::BalancedCe {
            beta: rng.random_range(0.05..0.95),
        },
        "soft_iou" => LossSpec::SoftIou,
        "focal" => LossSpec::Focal { gamma },
        "nfl" => LossSpec::Nfl { gamma },
        "poly" => LossSpec::Poly { gamma, alpha },
        "dice" => LossSpec::Dice {
            smooth: rng.random_range(0.1..=2.0),
        },
        "afl" => LossSpec::Afl(AflParams {
            gamma,
            alpha,
            delta: rng.random_range(0.0..=1.0),
            ..AflParams::default()
        }),
        other => return Err(Error::Parameter(format!("unknown loss {other:?}"))),
    })
}

impl GradCase {
    pub fn random(name: &str, rng: &mut Rng) -> Result<Self> {
        let loss = random_spec(name, rng)?;
        let (pred, gt) = random_map(rng, matches!(loss, LossSpec::Wbce { .. }))?;
        Ok(Self { loss, pred, gt })
    }

    pub fn analytic(&self) -> Result<LossOutput> {
        self.loss
            .evaluate(&self.pred, &self.gt, DEFAULT_EPS_CLIP, Reduction::Sum)
    }

    /// Contribution of pixel `i` at probability `p`, with the coefficients
    /// of `at` held fixed. Losses that do not split over pixels return the
    /// whole-map value with pixel `i` replaced.
    fn frozen_value(&self, at: &LossOutput, i: usize, p: f64) -> Result<f64> {
        let eps = DEFAULT_EPS_CLIP;
        let y = self.gt.values()[i];
        let pixel = ProbMap::new(1, 1, vec![p])?;
        let label = BinaryMask::new(1, 1, vec![y])?;
        let single = |spec: &LossSpec| -> Result<f64> { Ok(spec.evaluate(&pixel, &label, eps, Reduction::Sum)?.value) };
        match &self.loss {
            LossSpec::Dice { .. } | LossSpec::SoftIou => {
                let mut v = self.pred.values().to_vec();
                v[i] = p;
                let pred = ProbMap::new(self.pred.height(), self.pred.width(), v)?;
                Ok(self.loss.evaluate(&pred, &self.gt, eps, Reduction::Sum)?.value)
            }
            LossSpec::Wbce { .. } => single(&LossSpec::Wbce {
                beta: Some(at.diagnostics["beta"]),
            }),
            LossSpec::Nfl { gamma } => {
                let norm = at.diagnostics["normalizer"];
                let scale = if norm > 0.0 { self.pred.len() as f64 / norm } else { 0.0 };
                Ok(scale * focal(&pixel, &label, *gamma, eps)?.value)
            }
            LossSpec::Afl(params) => Ok(afl_frozen(
                &pixel,
                &label,
                at.diagnostics["gamma_d"],
                at.diagnostics["mu"],
                params.alpha,
                eps,
            )?
            .value),
            spec => single(spec),
        }
    }

    /// Largest relative error over pixels between the analytic gradient and
    /// central differences with step `h`.
    pub fn max_relative_error(&self, h: f64) -> Result<f64> {
        let at = self.analytic()?;
        let mut worst: f64 = 0.0;
        for (i, &p) in self.pred.values().iter().enumerate() {
            let plus = self.frozen_value(&at, i, p + h)?;
            let minus = self.frozen_value(&at, i, p - h)?;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(at.grad.values()[i], numeric));
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub loss: String,
    pub cases: usize,
    pub max_relative_error: f64,
    pub pass: bool,
}

/// Finite-difference check of each named loss over `cases` seeded cases.
pub fn grad_check(names: &[&str], cases: usize, seed: Seed) -> Result<Vec<GradCheckResult>> {
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut rng = seed.derive(k as u64).rng(stream::VERIFY);
            let mut worst: f64 = 0.0;
            for _ in 0..cases {
                worst = worst.max(GradCase::random(name, &mut rng)?.max_relative_error(FD_STEP)?);
            }
            Ok(GradCheckResult {
                loss: name.to_string(),
                cases,
                max_relative_error: worst,
                pass: worst <= FD_TOLERANCE,
            })
        })
        .collect()
}

fn max_abs_diff(a: &LossOutput, b: &LossOutput) -> f64 {
    a.grad
        .values()
        .iter()
        .zip(b.grad.values())
        .map(|(x, y)| (x - y).abs())
        .fold((a.value - b.value).abs(), f64::max)
}

/// pt grid used by the series checks.
pub const SERIES_PT_GRID: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 0.99];

/// Focal component `-(1-pt)^γ ln pt` used by the reweighting check.
pub fn focal_component(pt: f64, gamma_d: f64) -> f64 {
    -(1.0 - pt).powf(gamma_d) * pt.ln()
}

/// Counts `(pt_hard, pt_easy, γ)` triples on a 9-point grid where the
/// hard/easy ratio decreases when `γ_d` steps up by 0.5 over `[0, 3]`.
pub fn reweighting_violations() -> usize {
    let pts: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let gammas: Vec<f64> = (0..=6).map(|k| k as f64 * 0.5).collect();
    let mut bad = 0;
    for (i, &hard) in pts.iter().enumerate() {
        for &easy in &pts[i + 1..] {
            let ratios: Vec<f64> = gammas
                .iter()
                .map(|&g| focal_component(hard, g) / focal_component(easy, g))
                .collect();
            bad += ratios.windows(2).filter(|w| w[1] < w[0]).count();
        }
    }
    bad
}

/// Reduction ladder, μ normalization, γₐ range, series convergence,
/// Chebyshev residual and reweighting checks over `maps` seeded maps.
pub fn identity_checks(maps: usize, seed: Seed) -> Result<Vec<InvariantCheck>> {
    let mut rng = seed.rng(stream::VERIFY);
    let eps = DEFAULT_EPS_CLIP;
    let (mut d_poly, mut d_focal, mut d_bce, mut d_mu) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut gamma_a_bad = 0;
    for _ in 0..maps {
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let mut labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..=1u8)).collect();
        labels[0] = 1;
        let gt = BinaryMask::new(h, w, labels)?;
        let pred = ProbMap::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())?;
        let gamma = rng.random_range(0.0..=5.0);
        let alpha = rng.random_range(0.0..=3.0);
        let delta = rng.random_range(0.0..=1.0);

        let (a, _) = afl(&pred, &gt, &AflParams::static_poly(gamma, alpha))?;
        d_poly = d_poly.max(max_abs_diff(&a, &poly(&pred, &gt, gamma, alpha, eps)?));
        let (a, _) = afl(&pred, &gt, &AflParams::static_poly(gamma, 0.0))?;
        d_focal = d_focal.max(max_abs_diff(&a, &focal(&pred, &gt, gamma, eps)?));
        let (a, _) = afl(&pred, &gt, &AflParams::static_poly(0.0, 0.0))?;
        d_bce = d_bce.max(max_abs_diff(&a, &bce(&pred, &gt, eps)?));

        let params = AflParams {
            gamma,
            alpha,
            delta,
            ..AflParams::default()
        };
        let (_, diag) = afl(&pred, &gt, &params)?;
        let pt = crate::field::pt_map(&pred, &gt, eps)?;
        let boost = 1.0 + delta * diag.gamma_d;
        let mean = pt
            .values()
            .iter()
            .map(|p| diag.mu * (1.0 - p).powf(diag.gamma_d) * boost)
            .sum::<f64>()
            / pt.len() as f64;
        d_mu = d_mu.max((mean - 1.0).abs());
        if !(0.0..=1.0).contains(&diag.gamma_a) {
            gamma_a_bad += 1;
        }
    }

    let grid = PtMap::from_values(1, SERIES_PT_GRID.len(), SERIES_PT_GRID.to_vec(), eps)?;
    let bce_err = bce_value_series(&grid, 50)?
        .values()
        .iter()
        .zip(&SERIES_PT_GRID)
        .map(|(s, p)| (s + p.ln()).abs())
        .fold(0.0, f64::max);
    let afl_err = afl_grad_series(&grid, 0.0, 0.0, 200)?
        .values()
        .iter()
        .zip(&SERIES_PT_GRID)
        .map(|(s, p)| (s - 1.0 / p).abs())
        .fold(0.0, f64::max);
    let constant = PtMap::from_values(3, 3, vec![0.7; 9], eps)?;
    let two = PtMap::from_values(1, 2, vec![0.5, 1.0], eps)?;

    let one = ProbMap::new(1, 1, vec![0.5])?;
    let (worked, _) = afl(&one, &BinaryMask::ones(1, 1)?, &AflParams::default())?;

    Ok(vec![
        InvariantCheck::at_most("ladder_poly", d_poly, 1e-12),
        InvariantCheck::at_most("ladder_focal", d_focal, 1e-12),
        InvariantCheck::at_most("ladder_bce", d_bce, 1e-12),
        InvariantCheck::at_most("mu_normalization", d_mu, 1e-12),
        InvariantCheck::violations("gamma_a_in_unit_interval", gamma_a_bad),
        InvariantCheck::at_most("bce_value_series_50", bce_err, 1e-8),
        InvariantCheck::at_most("afl_grad_series_limit_200", afl_err, 1e-6),
        InvariantCheck::at_most("chebyshev_constant", chebyshev_residual(&constant, 2.0), 0.0),
        InvariantCheck::at_most(
            "chebyshev_two_pixel",
            (chebyshev_residual(&two, 2.0) - 0.125).abs(),
            1e-12,
        ),
        InvariantCheck::at_most("afl_worked_value", (worked.value - 0.434_961_9).abs(), 1e-6),
        InvariantCheck::violations("reweighting_monotone", reweighting_violations()),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_losses_pass_small_suite() {
        for r in grad_check(&LossSpec::NAMES, 20, Seed(11)).unwrap() {
            assert!(r.pass, "{} {}", r.loss, r.max_relative_error);
        }
    }

    #[test]
    fn grad_check_is_reproducible() {
        let a = grad_check(&["afl", "nfl"], 5, Seed(3)).unwrap();
        assert_eq!(a, grad_check(&["afl", "nfl"], 5, Seed(3)).unwrap());
    }

    #[test]
    fn identities_hold() {
        for c in identity_checks(30, Seed(5)).unwrap() {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(1e-9, 0.0), 1e-6);
        assert!(!InvariantCheck::at_most("x", f64::NAN, 1.0).pass);
    }

    #[test]
    fn unknown_loss_rejected() {
        assert!(grad_check(&["nope"], 1, Seed(0)).is_err());
    }
}
