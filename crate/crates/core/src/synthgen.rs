//! Seeded synthetic segmentation problems.
//!
//! A sample is a stack of per-pixel feature channels plus one or more
//! ground-truth instance masks. Shapes are disks, rotated ellipses or blobs
//! (disks with a low-frequency radial perturbation). With `nesting` the
//! second instance lies strictly inside the first, which produces the
//! ambiguous "which object did the click mean" situation.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, pt_map, BinaryMask, Field, ProbMap, DEFAULT_EPS_CLIP};
use crate::rng::{stream, Rng, Seed};

const MAX_ATTEMPTS: usize = 1000;

/// Names of the feature channels, in order.
pub const FEATURE_NAMES: [&str; 4] = ["row", "col", "center_dist", "intensity"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    #[default]
    Disk,
    Ellipse,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub n_instances: usize,
    pub shape_kind: ShapeKind,
    /// Amplitude of boundary jitter, in pixels.
    pub boundary_noise: f64,
    /// Standard deviation of additive noise on the intensity channel.
    pub intensity_noise: f64,
    pub nesting: bool,
    pub seed: Seed,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_instances: 1,
            shape_kind: ShapeKind::Disk,
            boundary_noise: 0.0,
            intensity_noise: 0.0,
            nesting: false,
            seed: Seed(0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Parameter(format!(
                "synthetic images must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.n_instances == 0 {
            return Err(Error::Parameter("n_instances must be >= 1".into()));
        }
        if self.nesting && self.n_instances < 2 {
            return Err(Error::Parameter("nesting needs n_instances >= 2".into()));
        }
        if !(self.boundary_noise >= 0.0 && self.intensity_noise >= 0.0) {
            return Err(Error::Parameter("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// One radial harmonic `amp · sin(freq · θ + phase)` added to the boundary radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

/// Geometry of one rasterized instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub center: (f64, f64),
    /// Semi-axes along the rotated row/column directions, in pixels.
    pub radii: (f64, f64),
    pub angle: f64,
    /// Radial perturbation in pixels.
    pub harmonics: Vec<Harmonic>,
}

impl Shape {
    pub fn disk(center: (f64, f64), radius: f64) -> Self {
        Self {
            center,
            radii: (radius, radius),
            angle: 0.0,
            harmonics: Vec::new(),
        }
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (dr, dc) = (row - self.center.0, col - self.center.1);
        if self.harmonics.is_empty() && self.angle == 0.0 && self.radii.0 == self.radii.1 {
            return dr * dr + dc * dc <= self.radii.0 * self.radii.0;
        }
        let (s, c) = self.angle.sin_cos();
        let x = c * dr + s * dc;
        let y = -s * dr + c * dc;
        let rho = ((x / self.radii.0).powi(2) + (y / self.radii.1).powi(2)).sqrt();
        let theta = y.atan2(x);
        let mean_r = 0.5 * (self.radii.0 + self.radii.1);
        let jitter: f64 = self
            .harmonics
            .iter()
            .map(|h| h.amp * (h.freq * theta + h.phase).sin())
            .sum();
        rho <= 1.0 + jitter / mean_r
    }

    /// Upper bound on the distance from the center to the boundary.
    pub fn extent(&self) -> f64 {
        self.radii.0.max(self.radii.1) + self.harmonics.iter().map(|h| h.amp.abs()).sum::<f64>()
    }

    pub fn rasterize(&self, height: usize, width: usize) -> Result<BinaryMask> {
        BinaryMask::from_fn(height, width, |r, c| self.contains(r as f64, c as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    /// Per-pixel feature channels named by [`FEATURE_NAMES`].
    pub features: Vec<Field>,
    pub gt_instances: Vec<BinaryMask>,
    pub shapes: Vec<Shape>,
    pub spec: SynthSpec,
}

impl SynthSample {
    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    /// Feature vector of pixel `(row, col)`.
    pub fn pixel_features(&self, row: usize, col: usize) -> Vec<f64> {
        self.features.iter().map(|f| f.get(row, col)).collect()
    }
}

fn random_shape(spec: &SynthSpec, rng: &mut Rng, radius: f64) -> Shape {
    let noise_harmonics = |rng: &mut Rng, amp: f64| -> Vec<Harmonic> {
        if amp <= 0.0 {
            return Vec::new();
        }
        (0..3)
            .map(|_| Harmonic {
                amp: amp * rng.random_range(0.3..1.0) / 3f64.sqrt(),
                freq: rng.random_range(3..8) as f64,
                phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect()
    };
    let mut shape = match spec.shape_kind {
        ShapeKind::Disk => Shape::disk((0.0, 0.0), radius),
        ShapeKind::Ellipse => Shape {
            center: (0.0, 0.0),
            radii: (radius, radius * rng.random_range(0.5..0.9)),
            angle: rng.random_range(0.0..PI),
            harmonics: Vec::new(),
        },
        ShapeKind::Blob => Shape {
            center: (0.0, 0.0),
            radii: (radius, radius),
            angle: 0.0,
            harmonics: (0..2)
                .map(|_| Harmonic {
                    amp: radius * rng.random_range(0.08..0.18),
                    freq: rng.random_range(2..5) as f64,
                    phase: rng.random_range(0.0..2.0 * PI),
                })
                .collect(),
        },
    };
    shape.harmonics.extend(noise_harmonics(rng, spec.boundary_noise));
    shape
}

fn place(shape: &mut Shape, spec: &SynthSpec, rng: &mut Rng) -> bool {
    let e = shape.extent();
    let (h, w) = (spec.height as f64, spec.width as f64);
    if 2.0 * e + 2.0 > h.min(w) {
        return false;
    }
    shape.center = (
        rng.random_range(e + 1.0..h - 1.0 - e),
        rng.random_range(e + 1.0..w - 1.0 - e),
    );
    true
}

/// Draw a sample. Identical specs (including seed) give identical samples.
pub fn generate(spec: &SynthSpec) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = spec.seed.rng(stream::SYNTHGEN);
    let (h, w) = (spec.height, spec.width);
    let min_side = h.min(w) as f64;

    let mut shapes: Vec<Shape> = Vec::new();
    let mut masks: Vec<BinaryMask> = Vec::new();
    let mut attempts = 0;
    let mut inner_failures = 0;
    while shapes.len() < spec.n_instances {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Generation {
                attempts: MAX_ATTEMPTS,
                msg: format!(
                    "could only place {} of {} instances in {h}x{w}",
                    shapes.len(),
                    spec.n_instances
                ),
            });
        }
        let idx = shapes.len();
        let free = if spec.nesting {
            spec.n_instances - 1
        } else {
            spec.n_instances
        } as f64;
        let (shape, mask) = if spec.nesting && idx == 1 {
            let outer = &shapes[0];
            let outer_r = outer.radii.0.min(outer.radii.1);
            let inner_r = outer_r * rng.random_range(0.3..0.5);
            let mut inner = random_shape(spec, &mut rng, inner_r);
            let slack = (outer_r - inner.extent()).max(0.0) * 0.5;
            let ang = rng.random_range(0.0..2.0 * PI);
            let off = rng.random_range(0.0..=slack);
            inner.center = (outer.center.0 + off * ang.sin(), outer.center.1 + off * ang.cos());
            let mask = inner.rasterize(h, w)?;
            let strict = mask.count() > 0 && mask.is_subset_of(&masks[0]) && mask.count() < masks[0].count();
            if !strict {
                inner_failures += 1;
                if inner_failures == 50 {
                    // outer shape too small to host an inner one; start over
                    inner_failures = 0;
                    shapes.clear();
                    masks.clear();
                }
                continue;
            }
            (inner, mask)
        } else {
            let scale = 1.0 / free.sqrt();
            let radius = min_side * scale * rng.random_range(0.15..0.3);
            let mut shape = random_shape(spec, &mut rng, radius.max(1.5));
            if !place(&mut shape, spec, &mut rng) {
                continue;
            }
            let mask = shape.rasterize(h, w)?;
            let clash = masks
                .iter()
                .any(|m| m.values().iter().zip(mask.values()).any(|(&a, &b)| a & b == 1));
            if mask.count() == 0 || clash {
                continue;
            }
            (shape, mask)
        };
        shapes.push(shape);
        masks.push(mask);
    }

    let noise = Normal::new(0.0, spec.intensity_noise.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let diag = (cr * cr + cc * cc).sqrt().max(1.0);
    let mut channels: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(h * w)).collect();
    for r in 0..h {
        for c in 0..w {
            let inside = masks.iter().any(|m| m.get(r, c));
            let (rf, cf) = (r as f64, c as f64);
            channels[0].push(rf / h as f64);
            channels[1].push(cf / w as f64);
            channels[2].push(((rf - cr).powi(2) + (cf - cc).powi(2)).sqrt() / diag);
            let base = if inside { 1.0 } else { 0.0 };
            let n = if spec.intensity_noise > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            channels[3].push(base + n);
        }
    }
    let features = channels
        .into_iter()
        .map(|v| Field::new(h, w, v))
        .collect::<Result<Vec<_>>>()?;

    Ok(SynthSample {
        features,
        gt_instances: masks,
        shapes,
        spec: spec.clone(),
    })
}

pub const PROFILE_BINS: usize = 20;

/// Histogram of per-pixel confidence `pt`, split by ground-truth class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DifficultyProfile {
    pub foreground: [usize; PROFILE_BINS],
    pub background: [usize; PROFILE_BINS],
}

impl DifficultyProfile {
    pub fn total(&self) -> usize {
        self.foreground.iter().chain(&self.background).sum()
    }

    pub fn combined(&self) -> [usize; PROFILE_BINS] {
        std::array::from_fn(|i| self.foreground[i] + self.background[i])
    }
}

/// 20-bin histogram of `pt` for a prediction against one ground-truth mask.
/// Bin `k` covers `[k/20, (k+1)/20)`; `pt = 1` falls in the last bin.
pub fn difficulty_profile(gt: &BinaryMask, pred: &ProbMap) -> Result<DifficultyProfile> {
    ensure_same_shape(gt.shape(), pred.shape())?;
    let pts = pt_map(pred, gt, DEFAULT_EPS_CLIP)?;
    let mut out = DifficultyProfile {
        foreground: [0; PROFILE_BINS],
        background: [0; PROFILE_BINS],
    };
    for (&pt, &y) in pts.values().iter().zip(gt.values()) {
        let bin = ((pt * PROFILE_BINS as f64).floor() as usize).min(PROFILE_BINS - 1);
        if y == 1 {
            out.foreground[bin] += 1;
        } else {
            out.background[bin] += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_without_noise_is_exact_raster() {
        let s = generate(&SynthSpec {
            seed: Seed(11),
            ..Default::default()
        })
        .unwrap();
        let sh = &s.shapes[0];
        let (cr, cc) = sh.center;
        let r = sh.radii.0;
        let expect = BinaryMask::from_fn(64, 64, |y, x| {
            (y as f64 - cr).powi(2) + (x as f64 - cc).powi(2) <= r * r
        })
        .unwrap();
        assert_eq!(s.gt_instances[0], expect);
        assert!(expect.count() > 0);
        assert_eq!(s.features.len(), FEATURE_NAMES.len());
        // intensity is the indicator when there is no noise
        assert_eq!(s.features[3], expect.to_field());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            shape_kind: ShapeKind::Blob,
            boundary_noise: 1.5,
            intensity_noise: 0.2,
            n_instances: 3,
            seed: Seed(5),
            ..Default::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec {
            seed: Seed(6),
            ..spec.clone()
        };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn nesting_gives_strict_subset() {
        for seed in 0..20 {
            for kind in [ShapeKind::Disk, ShapeKind::Ellipse, ShapeKind::Blob] {
                let s = generate(&SynthSpec {
                    n_instances: 2,
                    nesting: true,
                    shape_kind: kind,
                    seed: Seed(seed),
                    ..Default::default()
                })
                .unwrap();
                let (outer, inner) = (&s.gt_instances[0], &s.gt_instances[1]);
                assert!(inner.is_subset_of(outer));
                assert!(inner.count() > 0 && inner.count() < outer.count());
            }
        }
    }

    #[test]
    fn instances_disjoint_and_nonempty() {
        let s = generate(&SynthSpec {
            n_instances: 4,
            shape_kind: ShapeKind::Ellipse,
            seed: Seed(2),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.gt_instances.len(), 4);
        for (i, a) in s.gt_instances.iter().enumerate() {
            assert!(a.count() > 0);
            for b in &s.gt_instances[i + 1..] {
                assert!(a.values().iter().zip(b.values()).all(|(&x, &y)| x & y == 0));
            }
        }
    }

    #[test]
    fn invalid_and_infeasible_specs() {
        assert!(generate(&SynthSpec {
            nesting: true,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            height: 4,
            ..Default::default()
        })
        .is_err());
        let crowded = SynthSpec {
            height: 8,
            width: 8,
            n_instances: 40,
            ..Default::default()
        };
        assert!(matches!(generate(&crowded), Err(Error::Generation { .. })));
    }

    #[test]
    fn profile_examples() {
        let gt = BinaryMask::new(2, 3, vec![1, 1, 0, 0, 0, 1]).unwrap();
        let p = difficulty_profile(&gt, &ProbMap::from_mask(&gt)).unwrap();
        assert_eq!(p.combined()[PROFILE_BINS - 1], 6);
        assert_eq!(p.foreground[PROFILE_BINS - 1], 3);
        let p = difficulty_profile(&gt, &ProbMap::filled(2, 3, 0.5).unwrap()).unwrap();
        assert_eq!(p.combined()[10], 6);
        let p = difficulty_profile(&gt, &ProbMap::new(2, 3, vec![0.1, 0.9, 0.3, 0.77, 0.0, 0.5]).unwrap()).unwrap();
        assert_eq!(p.total(), 6);
    }
}
