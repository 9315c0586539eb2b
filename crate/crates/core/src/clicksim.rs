//! Automated click simulation and number-of-clicks metrics.
//!
//! Protocol (pinned by [`PROTOCOL_VERSION`]):
//!
//! 1. The first click is positive, at the point of the ground truth farthest
//!    (chessboard distance) from its boundary.
//! 2. After every prediction the mask is binarized at 0.5 and scored by IoU.
//! 3. The next click goes to the largest 4-connected error region; false
//!    negatives get positive clicks, false positives negative ones. The click
//!    sits at the region's interior chessboard-distance maximum. Ties: larger
//!    region, then false negative, then smallest `(row, col)`.
//! 4. NoC@t is the first click count reaching IoU ≥ t; traces that never get
//!    there within `max_clicks` count as `max_clicks` and are flagged failed.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{binarize, ensure_same_shape, iou, BinaryMask, Field, ProbMap};
use crate::rng::Seed;
use crate::synthgen::SynthSample;
use crate::trainer::PixelModel;

pub const PROTOCOL_VERSION: &str =
    "clicksim/1: 4-connected regions, chessboard interior maximum, fn-before-fp, disk radius 5, max 20";
pub const DEFAULT_RADIUS: usize = 5;
pub const DEFAULT_MAX_CLICKS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClickRecord {
    pub row: usize,
    pub col: usize,
    pub positive: bool,
    /// 1-based ordinal.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub clicks: Vec<ClickRecord>,
    pub ious: Vec<f64>,
    pub noc85: usize,
    pub noc90: usize,
    pub failed85: bool,
    pub failed90: bool,
}

impl SimTrace {
    /// IoU after `k` clicks; traces that stopped early hold their last value.
    pub fn iou_at(&self, k: usize) -> f64 {
        let idx = k.min(self.ious.len()).max(1) - 1;
        self.ious[idx]
    }
}

/// Disk encodings of positive and negative clicks.
///
/// A disk of radius `r` covers pixels with squared offset `< r²`, so radius 1
/// marks only the clicked pixel.
pub fn encode_clicks(clicks: &[ClickRecord], height: usize, width: usize, radius: usize) -> Result<(ProbMap, ProbMap)> {
    if radius == 0 {
        return Err(Error::Parameter("click radius must be >= 1".into()));
    }
    let mut pos = Field::zeros(height, width)?;
    let mut neg = Field::zeros(height, width)?;
    let r = radius as i64;
    for c in clicks {
        if c.row >= height || c.col >= width {
            return Err(Error::Parameter(format!(
                "click {} at ({}, {}) outside {height}x{width}",
                c.index, c.row, c.col
            )));
        }
        let target = if c.positive { &mut pos } else { &mut neg };
        for dr in -(r - 1)..r {
            for dc in -(r - 1)..r {
                if dr * dr + dc * dc >= r * r {
                    continue;
                }
                let (y, x) = (c.row as i64 + dr, c.col as i64 + dc);
                if y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width {
                    target.set(y as usize, x as usize, 1.0);
                }
            }
        }
    }
    Ok((ProbMap::from_field(pos)?, ProbMap::from_field(neg)?))
}

struct Region {
    pixels: Vec<(usize, usize)>,
    false_negative: bool,
}

fn regions(mask: &[bool], height: usize, width: usize, false_negative: bool) -> Vec<Region> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / width, i % width);
            pixels.push((r, c));
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
        }
        pixels.sort_unstable();
        out.push(Region { pixels, false_negative });
    }
    out
}

/// Chessboard distance from each pixel of `inside` to the nearest pixel
/// outside it, where everything beyond the image border counts as outside.
pub fn chessboard_interior_distance(inside: &[bool], height: usize, width: usize) -> Vec<u32> {
    let (ph, pw) = (height + 2, width + 2);
    let mut d = vec![0u32; ph * pw];
    for r in 0..height {
        for c in 0..width {
            if inside[r * width + c] {
                d[(r + 1) * pw + c + 1] = u32::MAX / 2;
            }
        }
    }
    for r in 1..ph - 1 {
        for c in 1..pw - 1 {
            let i = r * pw + c;
            if d[i] == 0 {
                continue;
            }
            let best = d[i - pw - 1].min(d[i - pw]).min(d[i - pw + 1]).min(d[i - 1]);
            d[i] = d[i].min(best + 1);
        }
    }
    for r in (1..ph - 1).rev() {
        for c in (1..pw - 1).rev() {
            let i = r * pw + c;
            if d[i] == 0 {
                continue;
            }
            let best = d[i + pw + 1].min(d[i + pw]).min(d[i + pw - 1]).min(d[i + 1]);
            d[i] = d[i].min(best + 1);
        }
    }
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        out.extend_from_slice(&d[(r + 1) * pw + 1..(r + 1) * pw + 1 + width]);
    }
    out
}

fn interior_point(region: &Region, height: usize, width: usize) -> (usize, usize) {
    let mut inside = vec![false; height * width];
    for &(r, c) in &region.pixels {
        inside[r * width + c] = true;
    }
    let dist = chessboard_interior_distance(&inside, height, width);
    // pixels are sorted, so the first maximum is the smallest (row, col)
    let mut best = region.pixels[0];
    let mut best_d = 0;
    for &(r, c) in &region.pixels {
        let dv = dist[r * width + c];
        if dv > best_d {
            best_d = dv;
            best = (r, c);
        }
    }
    best
}

/// Corrective click for the current binary prediction.
///
/// Returns [`Error::NoError`] when the prediction already equals the ground truth.
pub fn next_click(pred: &BinaryMask, gt: &BinaryMask, prior: &[ClickRecord]) -> Result<ClickRecord> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    let (h, w) = gt.shape();
    let fn_mask: Vec<bool> = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| g == 1 && p == 0)
        .collect();
    let fp_mask: Vec<bool> = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| g == 0 && p == 1)
        .collect();
    let mut all = regions(&fn_mask, h, w, true);
    all.extend(regions(&fp_mask, h, w, false));
    let region = all
        .iter()
        .min_by_key(|r| (std::cmp::Reverse(r.pixels.len()), !r.false_negative, r.pixels[0]))
        .ok_or(Error::NoError)?;
    let (row, col) = interior_point(region, h, w);
    Ok(ClickRecord {
        row,
        col,
        positive: region.false_negative,
        index: prior.len() + 1,
    })
}

/// Anything that maps clicks on a sample to a probability map.
pub trait Segmenter {
    fn predict(&self, sample: &SynthSample, gt: &BinaryMask, clicks: &[ClickRecord]) -> Result<ProbMap>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictor {
    /// Returns the ground truth itself.
    Oracle,
    /// Ground truth with pixels near the object boundary flipped at a rate
    /// of `error_rate / clicks`, except inside click disks.
    NoisyOracle { error_rate: f64, seed: Seed },
    /// Trained per-pixel logistic model.
    Trained(PixelModel),
}

impl Predictor {
    /// Parses `oracle`, `noisy:<rate>` or `trained:<model.json>`.
    pub fn parse(s: &str, seed: Seed) -> Result<Predictor> {
        if s == "oracle" {
            return Ok(Predictor::Oracle);
        }
        if let Some(rate) = s.strip_prefix("noisy:") {
            let error_rate: f64 = rate
                .parse()
                .map_err(|_| Error::Parameter(format!("bad noisy rate {rate:?}")))?;
            if !(0.0..=1.0).contains(&error_rate) {
                return Err(Error::Parameter(format!(
                    "noisy rate must be in [0, 1], got {error_rate}"
                )));
            }
            return Ok(Predictor::NoisyOracle { error_rate, seed });
        }
        if let Some(path) = s.strip_prefix("trained:") {
            let text = std::fs::read_to_string(path)?;
            return Ok(Predictor::Trained(serde_json::from_str(&text)?));
        }
        Err(Error::Parameter(format!(
            "unknown predictor {s:?}; expected oracle, noisy:<rate> or trained:<file>"
        )))
    }
}

fn near_boundary(gt: &BinaryMask, r: usize, c: usize, band: usize) -> bool {
    let (h, w) = gt.shape();
    let v = gt.get(r, c);
    let (r0, r1) = (r.saturating_sub(band), (r + band).min(h - 1));
    let (c0, c1) = (c.saturating_sub(band), (c + band).min(w - 1));
    (r0..=r1).any(|y| (c0..=c1).any(|x| gt.get(y, x) != v))
}

impl Segmenter for Predictor {
    fn predict(&self, sample: &SynthSample, gt: &BinaryMask, clicks: &[ClickRecord]) -> Result<ProbMap> {
        match self {
            Predictor::Oracle => Ok(ProbMap::from_mask(gt)),
            Predictor::NoisyOracle { error_rate, seed } => {
                let (h, w) = gt.shape();
                let (pos, neg) = encode_clicks(clicks, h, w, DEFAULT_RADIUS)?;
                let rate = error_rate / clicks.len().max(1) as f64;
                let mut out = gt.to_field();
                for r in 0..h {
                    for c in 0..w {
                        if pos.get(r, c) > 0.0 || neg.get(r, c) > 0.0 || !near_boundary(gt, r, c, 2) {
                            continue;
                        }
                        let u = seed.hash_unit((r * w + c) as u64, clicks.len() as u64, 0x6e6f);
                        if u < rate {
                            out.set(r, c, 1.0 - out.get(r, c));
                        }
                    }
                }
                ProbMap::from_field(out)
            }
            Predictor::Trained(model) => model.predict_with_clicks(sample, clicks, DEFAULT_RADIUS),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NocConfig {
    pub max_clicks: usize,
    pub threshold_low: f64,
    pub threshold_high: f64,
}

impl Default for NocConfig {
    fn default() -> Self {
        Self {
            max_clicks: DEFAULT_MAX_CLICKS,
            threshold_low: 0.85,
            threshold_high: 0.90,
        }
    }
}

/// Runs the click loop against one ground-truth instance.
pub fn run_noc(
    predictor: &dyn Segmenter,
    sample: &SynthSample,
    gt: &BinaryMask,
    config: &NocConfig,
) -> Result<SimTrace> {
    if gt.count() == 0 {
        return Err(Error::Parameter("ground truth for click simulation is empty".into()));
    }
    if config.max_clicks == 0
        || config
            .threshold_low
            .partial_cmp(&config.threshold_high)
            .is_none_or(|o| o.is_gt())
    {
        return Err(Error::Parameter(format!("invalid NoC config {config:?}")));
    }
    let empty = BinaryMask::zeros(gt.height(), gt.width())?;
    let mut clicks = vec![next_click(&empty, gt, &[])?];
    let mut ious = Vec::new();
    loop {
        let k = clicks.len();
        let prob = predictor.predict(sample, gt, &clicks).map_err(|e| Error::Predictor {
            click: k,
            source: Box::new(e),
        })?;
        ensure_same_shape(prob.shape(), gt.shape())?;
        let mask = binarize(&prob, 0.5)?;
        let score = iou(&mask, gt)?;
        if !score.is_finite() {
            return Err(Error::Internal(format!("non-finite IoU at click {k}")));
        }
        ious.push(score);
        if score >= config.threshold_high || k == config.max_clicks {
            break;
        }
        clicks.push(next_click(&mask, gt, &clicks)?);
    }
    let noc = |t: f64| match ious.iter().position(|&v| v >= t) {
        Some(i) => (i + 1, false),
        None => (config.max_clicks, true),
    };
    let (noc85, failed85) = noc(config.threshold_low);
    let (noc90, failed90) = noc(config.threshold_high);
    Ok(SimTrace {
        clicks,
        ious,
        noc85,
        noc90,
        failed85,
        failed90,
    })
}

/// Mean IoU after `k` clicks over a set of traces.
pub fn miou_at_k(traces: &[SimTrace], k: usize) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Parameter("mIoU@k needs at least one trace".into()));
    }
    if !(1..=DEFAULT_MAX_CLICKS).contains(&k) {
        return Err(Error::Parameter(format!("k must be in [1, 20], got {k}")));
    }
    Ok(traces.iter().map(|t| t.iou_at(k)).sum::<f64>() / traces.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NocSummary {
    pub samples: usize,
    pub noc85: f64,
    pub noc90: f64,
    pub failures85: usize,
    pub failures90: usize,
    /// `(k, mIoU@k)` for k = 1..=20.
    pub miou: Vec<(usize, f64)>,
}

pub fn summarize(traces: &[SimTrace]) -> Result<NocSummary> {
    if traces.is_empty() {
        return Err(Error::Parameter("no traces to summarize".into()));
    }
    let n = traces.len() as f64;
    Ok(NocSummary {
        samples: traces.len(),
        noc85: traces.iter().map(|t| t.noc85 as f64).sum::<f64>() / n,
        noc90: traces.iter().map(|t| t.noc90 as f64).sum::<f64>() / n,
        failures85: traces.iter().filter(|t| t.failed85).count(),
        failures90: traces.iter().filter(|t| t.failed90).count(),
        miou: (1..=DEFAULT_MAX_CLICKS)
            .map(|k| miou_at_k(traces, k).map(|v| (k, v)))
            .collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthSpec};

    fn square(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| {
            (r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c)
        })
        .unwrap()
    }

    fn click(row: usize, col: usize, positive: bool) -> ClickRecord {
        ClickRecord {
            row,
            col,
            positive,
            index: 1,
        }
    }

    #[test]
    fn encode_examples() {
        let (p, n) = encode_clicks(&[], 5, 5, 3).unwrap();
        assert!(p.values().iter().chain(n.values()).all(|&v| v == 0.0));
        let (p, _) = encode_clicks(&[click(2, 2, true)], 5, 5, 1).unwrap();
        assert_eq!(p.values().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(p.get(2, 2), 1.0);
        let (p, n) = encode_clicks(&[click(3, 3, true), click(3, 4, true), click(0, 0, false)], 8, 8, 2).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.0 || v == 1.0));
        // radius 2 covers a 3x3 block; the two blocks overlap in 6 pixels
        assert_eq!(p.values().iter().filter(|&&v| v == 1.0).count(), 12);
        assert_eq!(n.values().iter().filter(|&&v| v == 1.0).count(), 4);
        assert!(encode_clicks(&[click(9, 0, true)], 5, 5, 1).is_err());
        assert!(encode_clicks(&[], 5, 5, 0).is_err());
    }

    #[test]
    fn first_click_at_square_center() {
        let gt = square(15, 15, 5, 5, 5);
        let c = next_click(&BinaryMask::zeros(15, 15).unwrap(), &gt, &[]).unwrap();
        assert_eq!((c.row, c.col, c.positive, c.index), (7, 7, true, 1));
    }

    #[test]
    fn extra_pixel_gets_negative_click() {
        let gt = square(12, 12, 2, 2, 4);
        let mut pred = gt.clone();
        pred.set(10, 10, true);
        let c = next_click(&pred, &gt, &[click(3, 3, true)]).unwrap();
        assert_eq!((c.row, c.col, c.positive, c.index), (10, 10, false, 2));
    }

    #[test]
    fn equal_regions_prefer_false_negative() {
        let gt = square(10, 10, 6, 6, 2);
        let pred = square(10, 10, 0, 0, 2);
        let c = next_click(&pred, &gt, &[]).unwrap();
        assert!(c.positive);
        assert!(gt.get(c.row, c.col));
    }

    #[test]
    fn no_error_signal() {
        let gt = square(6, 6, 1, 1, 2);
        assert!(matches!(next_click(&gt, &gt, &[]), Err(Error::NoError)));
    }

    #[test]
    fn chessboard_distance_small() {
        let inside = vec![true; 9];
        assert_eq!(
            chessboard_interior_distance(&inside, 3, 3),
            vec![1, 1, 1, 1, 2, 1, 1, 1, 1]
        );
    }

    struct Never;
    impl Segmenter for Never {
        fn predict(&self, _: &SynthSample, gt: &BinaryMask, _: &[ClickRecord]) -> Result<ProbMap> {
            ProbMap::filled(gt.height(), gt.width(), 0.0)
        }
    }

    #[test]
    fn oracle_and_never_improving() {
        let sample = generate(&SynthSpec {
            seed: Seed(4),
            ..Default::default()
        })
        .unwrap();
        let gt = &sample.gt_instances[0];
        let t = run_noc(&Predictor::Oracle, &sample, gt, &NocConfig::default()).unwrap();
        assert_eq!((t.noc85, t.noc90, t.failed85, t.failed90), (1, 1, false, false));
        assert_eq!(t.ious, vec![1.0]);
        let t = run_noc(&Never, &sample, gt, &NocConfig::default()).unwrap();
        assert_eq!((t.noc85, t.noc90, t.failed85, t.failed90), (20, 20, true, true));
        assert_eq!(t.ious.len(), 20);
        assert_eq!(t.clicks.len(), 20);
    }

    #[test]
    fn noisy_oracle_deterministic_and_monotone_thresholds() {
        for seed in 0..10 {
            let sample = generate(&SynthSpec {
                seed: Seed(seed),
                ..Default::default()
            })
            .unwrap();
            let p = Predictor::NoisyOracle {
                error_rate: 0.6,
                seed: Seed(seed),
            };
            let a = run_noc(&p, &sample, &sample.gt_instances[0], &NocConfig::default()).unwrap();
            let b = run_noc(&p, &sample, &sample.gt_instances[0], &NocConfig::default()).unwrap();
            assert_eq!(a, b);
            assert!(a.noc85 <= a.noc90);
            assert_eq!(a.clicks.len(), a.ious.len());
        }
    }

    #[test]
    fn miou_examples() {
        let t = SimTrace {
            clicks: vec![],
            ious: vec![0.5, 0.9],
            noc85: 2,
            noc90: 2,
            failed85: false,
            failed90: false,
        };
        assert_eq!(miou_at_k(std::slice::from_ref(&t), 1).unwrap(), 0.5);
        assert_eq!(miou_at_k(std::slice::from_ref(&t), 7).unwrap(), 0.9);
        assert!(miou_at_k(&[], 1).is_err());
        assert!(miou_at_k(&[t], 21).is_err());
    }

    #[test]
    fn predictor_parsing() {
        assert_eq!(Predictor::parse("oracle", Seed(1)).unwrap(), Predictor::Oracle);
        assert_eq!(
            Predictor::parse("noisy:0.3", Seed(1)).unwrap(),
            Predictor::NoisyOracle {
                error_rate: 0.3,
                seed: Seed(1)
            }
        );
        assert!(Predictor::parse("noisy:3", Seed(1)).is_err());
        assert!(Predictor::parse("human", Seed(1)).is_err());
    }
}
