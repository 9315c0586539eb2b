//! Toy clicks-aware masked attention decoder.
//!
//! One decoder layer at scale `l`:
//!
//! 1. `Q = X f_Q`, `K = F f_k`, `V = F f_v` for the scale's pixel features `F`.
//! 2. Attention mask `M`: 0 where the previous mask prediction (resized to
//!    this scale, threshold 0.5) is foreground, `-∞` elsewhere. A query row
//!    with no foreground is reset to all zeros.
//! 3. Click matrix `Ψ = ψ(ω_f(C) [Q]₊ᵀ)`, with `-∞` copied from `M`. `ω_f`
//!    max-pools the click map (3×3) and lifts each pixel to `d` dims; `ψ` is a
//!    scalar affine map.
//! 4. `X ← softmax(Ψ + Q Kᵀ) V + X`, then query self-attention and a two-layer
//!    feed-forward block, each with a residual connection.
//!
//! Layers cycle over the three coarse scales; the heads read the finest
//! pixel embedding. All weights are drawn from a seeded stream.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng as _;
use serde::Serialize;

use crate::clicksim::{encode_clicks, ClickRecord, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::field::{Field, ProbMap};
use crate::matching::InstancePrediction;
use crate::rng::{stream, Rng, Seed};
use crate::synthgen::SynthSample;
use crate::trainer::sigmoid;

/// Downsampling factors of the three decoder scales and the pixel embedding.
pub const SCALE_FACTORS: [usize; 3] = [32, 16, 8];
pub const EMBED_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub n_queries: usize,
    pub dim: usize,
    pub f_q: Array2<f64>,
    pub f_k: Array2<f64>,
    pub f_v: Array2<f64>,
    /// Lift of the pooled click value to `dim` features.
    pub omega_f: Array1<f64>,
    pub psi_scale: f64,
    pub psi_bias: f64,
    pub self_q: Array2<f64>,
    pub self_k: Array2<f64>,
    pub self_v: Array2<f64>,
    pub ffn: [Array2<f64>; 2],
    pub mask_head: [(Array2<f64>, Array1<f64>); 3],
    pub click_head: (Array2<f64>, Array1<f64>),
    /// Initial queries `X_0`.
    pub query_init: Array2<f64>,
    pub seed: Seed,
}

fn uniform_matrix(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

fn uniform_vector(rng: &mut Rng, n: usize, bound: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-bound..=bound))
}

impl AttentionParams {
    /// Weights drawn uniformly from `[-1/√d, 1/√d]`.
    pub fn seeded(n_queries: usize, dim: usize, seed: Seed) -> Result<Self> {
        if n_queries == 0 || dim == 0 {
            return Err(Error::Parameter("n_queries and dim must be >= 1".into()));
        }
        let mut rng = seed.rng(stream::ATTENTION);
        let b = 1.0 / (dim as f64).sqrt();
        let d = dim;
        let mut m = |r, c| uniform_matrix(&mut rng, r, c, b);
        let (f_q, f_k, f_v) = (m(d, d), m(d, d), m(d, d));
        let (self_q, self_k, self_v) = (m(d, d), m(d, d), m(d, d));
        let ffn = [m(d, d), m(d, d)];
        let heads = [m(d, d), m(d, d), m(d, d)];
        let click_w = m(d, 2);
        let query_init = m(n_queries, d);
        let mask_head = heads.map(|w| (w, uniform_vector(&mut rng, d, b)));
        Ok(Self {
            n_queries,
            dim,
            f_q,
            f_k,
            f_v,
            omega_f: uniform_vector(&mut rng, d, b),
            psi_scale: rng.random_range(0.5..1.5),
            psi_bias: rng.random_range(-b..=b),
            self_q,
            self_k,
            self_v,
            ffn,
            mask_head,
            click_head: (click_w, uniform_vector(&mut rng, 2, b)),
            query_init,
            seed,
        })
    }

    /// All weights zero.
    pub fn zeros(n_queries: usize, dim: usize) -> Self {
        let z = || Array2::zeros((dim, dim));
        let zb = || Array1::zeros(dim);
        Self {
            n_queries,
            dim,
            f_q: z(),
            f_k: z(),
            f_v: z(),
            omega_f: zb(),
            psi_scale: 0.0,
            psi_bias: 0.0,
            self_q: z(),
            self_k: z(),
            self_v: z(),
            ffn: [z(), z()],
            mask_head: [(z(), zb()), (z(), zb()), (z(), zb())],
            click_head: (Array2::zeros((dim, 2)), Array1::zeros(2)),
            query_init: Array2::zeros((n_queries, dim)),
            seed: Seed(0),
        }
    }
}

/// Pixel features and click map at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFeatures {
    pub h: usize,
    pub w: usize,
    /// `(h·w) × d`, row-major pixels.
    pub features: Array2<f64>,
    /// Signed click encoding: +1 positive disk, -1 negative disk.
    pub click_map: Field,
}

impl ScaleFeatures {
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.features.dim() != (self.pixels(), dim) || self.click_map.shape() != (self.h, self.w) {
            return Err(Error::Dimension(format!(
                "scale features {:?} / click map {:?} inconsistent with {}x{} and dim {dim}",
                self.features.dim(),
                self.click_map.shape(),
                self.h,
                self.w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    /// Coarse to fine: 1/32, 1/16, 1/8.
    pub scales: [ScaleFeatures; 3],
    /// 1/4 resolution pixel embedding read by the mask head.
    pub embed: ScaleFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub x: Array2<f64>,
    pub psi_matrix: Array2<f64>,
    pub attn_mask: Array2<f64>,
    pub layer_index: usize,
}

fn pooled(input: &[Field], factor: usize) -> (usize, usize, Vec<Vec<f64>>) {
    let (h, w) = input[0].shape();
    let (hs, ws) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = vec![vec![0.0; input.len()]; hs * ws];
    for (r, row) in out.chunks_mut(ws).enumerate() {
        for (c, px) in row.iter_mut().enumerate() {
            let (r0, r1) = (r * factor, ((r + 1) * factor).min(h));
            let (c0, c1) = (c * factor, ((c + 1) * factor).min(w));
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            for (k, ch) in input.iter().enumerate() {
                let mut acc = 0.0;
                for y in r0..r1 {
                    for x in c0..c1 {
                        acc += ch.get(y, x);
                    }
                }
                px[k] = acc / n;
            }
        }
    }
    (hs, ws, out)
}

fn block_max(map: &Field, factor: usize) -> Field {
    let (h, w) = map.shape();
    let (hs, ws) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = Field::zeros(hs, ws).expect("nonzero pooled size");
    for r in 0..hs {
        for c in 0..ws {
            let mut m: f64 = 0.0;
            for y in r * factor..((r + 1) * factor).min(h) {
                for x in c * factor..((c + 1) * factor).min(w) {
                    m = m.max(map.get(y, x));
                }
            }
            out.set(r, c, m);
        }
    }
    out
}

/// Fixed multi-scale stand-in for a learned pixel decoder: block-averaged
/// input channels (features + click disks) under a seeded linear projection.
pub fn toy_pyramid(sample: &SynthSample, clicks: &[ClickRecord], dim: usize, seed: Seed) -> Result<FeaturePyramid> {
    let (h, w) = (sample.height(), sample.width());
    let (pos, neg) = encode_clicks(clicks, h, w, DEFAULT_RADIUS)?;
    let mut channels = sample.features.clone();
    channels.push(pos.field().clone());
    channels.push(neg.field().clone());
    let mut rng = seed.derive(0x7079).rng(stream::ATTENTION);
    let bound = 1.0 / (channels.len() as f64).sqrt();
    let proj = uniform_matrix(&mut rng, channels.len(), dim, bound);

    let build = |factor: usize| -> Result<ScaleFeatures> {
        let (hs, ws, px) = pooled(&channels, factor);
        let raw = Array2::from_shape_fn((hs * ws, channels.len()), |(i, k)| px[i][k]);
        let pos_s = block_max(pos.field(), factor);
        let neg_s = block_max(neg.field(), factor);
        let click = Field::new(
            hs,
            ws,
            pos_s.values().iter().zip(neg_s.values()).map(|(p, n)| p - n).collect(),
        )?;
        Ok(ScaleFeatures {
            h: hs,
            w: ws,
            features: raw.dot(&proj),
            click_map: click,
        })
    };
    Ok(FeaturePyramid {
        scales: [
            build(SCALE_FACTORS[0])?,
            build(SCALE_FACTORS[1])?,
            build(SCALE_FACTORS[2])?,
        ],
        embed: build(EMBED_FACTOR)?,
    })
}

/// `{0, -∞}` attention mask from per-query foreground probabilities (`N × HW`).
///
/// Returns the mask and the number of rows that had no foreground and were
/// reset to all zeros.
pub fn attn_mask_from_pred(mask_pred: &Array2<f64>, threshold: f64) -> Result<(Array2<f64>, usize)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!(
            "threshold must be in (0, 1), got {threshold}"
        )));
    }
    let mut mask = mask_pred.mapv(|p| if p >= threshold { 0.0 } else { f64::NEG_INFINITY });
    let mut resets = 0;
    for mut row in mask.rows_mut() {
        if row.iter().all(|v| *v == f64::NEG_INFINITY) {
            row.fill(0.0);
            resets += 1;
        }
    }
    Ok((mask, resets))
}

fn max_pool3(map: &Field) -> Vec<f64> {
    let (h, w) = map.shape();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut m = f64::NEG_INFINITY;
            for y in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for x in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    m = m.max(map.get(y, x));
                }
            }
            out.push(m);
        }
    }
    out
}

/// Click attention matrix `Ψ` (`N × HW`) for the given queries and mask.
pub fn click_attention_matrix(
    clicks: &ScaleFeatures,
    x_prev: &Array2<f64>,
    params: &AttentionParams,
    attn_mask: &Array2<f64>,
) -> Result<Array2<f64>> {
    clicks.check(params.dim)?;
    let n = x_prev.nrows();
    if x_prev.ncols() != params.dim || attn_mask.dim() != (n, clicks.pixels()) {
        return Err(Error::Dimension(format!(
            "queries {:?} / mask {:?} inconsistent with {} pixels and dim {}",
            x_prev.dim(),
            attn_mask.dim(),
            clicks.pixels(),
            params.dim
        )));
    }
    let q_pos = x_prev.dot(&params.f_q).mapv(|v| v.max(0.0));
    let pooled = Array1::from(max_pool3(&clicks.click_map));
    // ω_f(C)[Q]₊ᵀ, transposed to N × HW: (q_pos · ω_f) ⊗ pooled
    let q_proj = q_pos.dot(&params.omega_f);
    let mut psi = Array2::from_shape_fn((n, clicks.pixels()), |(i, j)| {
        params.psi_scale * (q_proj[i] * pooled[j]) + params.psi_bias
    });
    psi.zip_mut_with(attn_mask, |p, &m| {
        if m == f64::NEG_INFINITY {
            *p = f64::NEG_INFINITY;
        }
    });
    Ok(psi)
}

/// Row-wise softmax. A row whose entries are all `-∞` is an error.
pub fn softmax_rows(logits: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = logits.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || !max.is_finite() {
            return Err(Error::Internal(format!("attention row {i} has no finite logit")));
        }
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}

/// Masked click-aware attention step `softmax(Ψ + Q Kᵀ) V + X`.
///
/// Returns the updated queries and the attention distribution.
pub fn masked_attention(
    x: &Array2<f64>,
    psi: &Array2<f64>,
    scale: &ScaleFeatures,
    params: &AttentionParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    scale.check(params.dim)?;
    if psi.dim() != (x.nrows(), scale.pixels()) {
        return Err(Error::Dimension(format!(
            "psi {:?} does not match {} queries x {} pixels",
            psi.dim(),
            x.nrows(),
            scale.pixels()
        )));
    }
    let q = x.dot(&params.f_q);
    let k = scale.features.dot(&params.f_k);
    let v = scale.features.dot(&params.f_v);
    let logits = psi + &q.dot(&k.t());
    let attn = softmax_rows(&logits)?;
    Ok((attn.dot(&v) + x, attn))
}

fn relu(a: Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

/// One decoder layer: masked click-aware attention, query self-attention,
/// feed-forward. Returns the new state and the masked attention weights.
pub fn camd_layer(
    state: &AttentionState,
    scale: &ScaleFeatures,
    params: &AttentionParams,
) -> Result<(AttentionState, Array2<f64>)> {
    if state.attn_mask.dim() != state.psi_matrix.dim() {
        return Err(Error::Dimension("psi and attention mask differ in shape".into()));
    }
    let (x1, attn) = masked_attention(&state.x, &state.psi_matrix, scale, params)?;

    let scale_sa = 1.0 / (params.dim as f64).sqrt();
    let sq = x1.dot(&params.self_q);
    let sk = x1.dot(&params.self_k);
    let sv = x1.dot(&params.self_v);
    let sa = softmax_rows(&(sq.dot(&sk.t()) * scale_sa))?;
    let x2 = sa.dot(&sv) + &x1;

    let x3 = relu(x2.dot(&params.ffn[0])).dot(&params.ffn[1]) + &x2;
    if x3.iter().any(|v| !v.is_finite()) {
        return Err(Error::Internal(format!(
            "non-finite query features after layer {}",
            state.layer_index
        )));
    }
    Ok((
        AttentionState {
            x: x3,
            psi_matrix: state.psi_matrix.clone(),
            attn_mask: state.attn_mask.clone(),
            layer_index: state.layer_index,
        },
        attn,
    ))
}

fn mask_logits(x: &Array2<f64>, embed: &ScaleFeatures, params: &AttentionParams) -> Array2<f64> {
    let [(w1, b1), (w2, b2), (w3, b3)] = &params.mask_head;
    let e = relu(x.dot(w1) + b1);
    let e = relu(e.dot(w2) + b2);
    let e = e.dot(w3) + b3;
    e.dot(&embed.features.t())
}

/// Mask and click-class heads. Returns one prediction per query with masks
/// at the embedding resolution.
pub fn predict_heads(
    x: &Array2<f64>,
    embed: &ScaleFeatures,
    params: &AttentionParams,
) -> Result<Vec<InstancePrediction>> {
    embed.check(params.dim)?;
    if x.ncols() != params.dim {
        return Err(Error::Dimension(format!(
            "queries have {} features, expected {}",
            x.ncols(),
            params.dim
        )));
    }
    let probs = mask_logits(x, embed, params).mapv(sigmoid);
    let class_logits = x.dot(&params.click_head.0) + &params.click_head.1;
    let class = softmax_rows(&class_logits)?;
    probs
        .axis_iter(Axis(0))
        .zip(class.axis_iter(Axis(0)))
        .map(|(row, c)| {
            let map = ProbMap::new(embed.h, embed.w, row.to_vec())?;
            let (a, b) = (c[0], c[1]);
            InstancePrediction::new(map, [a, 1.0 - a]).or_else(|_| {
                InstancePrediction::new(
                    ProbMap::new(embed.h, embed.w, row.to_vec())?,
                    [a / (a + b), b / (a + b)],
                )
            })
        })
        .collect()
}

/// Nearest-neighbour resize of per-query masks to `h × w`, as `N × (h·w)`.
pub fn resize_masks(preds: &[InstancePrediction], h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::zeros((preds.len(), h * w));
    for (i, p) in preds.iter().enumerate() {
        let (sh, sw) = p.mask_probs.shape();
        for r in 0..h {
            let sr = ((2 * r + 1) * sh / (2 * h)).min(sh - 1);
            for c in 0..w {
                let sc = ((2 * c + 1) * sw / (2 * w)).min(sw - 1);
                out[[i, r * w + c]] = p.mask_probs.get(sr, sc);
            }
        }
    }
    out
}

/// Per-layer invariant measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub scale: usize,
    /// `max_i |Σ_j A_ij - 1|`.
    pub max_row_sum_error: f64,
    /// Total attention weight on masked (`-∞`) pixels.
    pub masked_weight: f64,
    pub reset_rows: usize,
    pub finite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub predictions: Vec<InstancePrediction>,
    pub x: Array2<f64>,
    pub layers: Vec<LayerCheck>,
}

/// Runs `blocks` rounds over the three scales (`3 · blocks` layers) and the
/// prediction heads.
pub fn camd_forward(pyramid: &FeaturePyramid, params: &AttentionParams, blocks: usize) -> Result<ForwardOutput> {
    if blocks == 0 {
        return Err(Error::Parameter("blocks must be >= 1".into()));
    }
    for s in pyramid.scales.iter().chain([&pyramid.embed]) {
        s.check(params.dim)?;
    }
    let mut x = params.query_init.clone();
    let mut preds = predict_heads(&x, &pyramid.embed, params)?;
    let mut layers = Vec::with_capacity(3 * blocks);
    for l in 0..3 * blocks {
        let si = l % 3;
        let scale = &pyramid.scales[si];
        let probs = resize_masks(&preds, scale.h, scale.w);
        let (mask, reset_rows) = attn_mask_from_pred(&probs, 0.5)?;
        let psi = click_attention_matrix(scale, &x, params, &mask)?;
        let state = AttentionState {
            x,
            psi_matrix: psi,
            attn_mask: mask,
            layer_index: l + 1,
        };
        let (next, attn) = camd_layer(&state, scale, params)?;
        let max_row_sum_error = attn
            .sum_axis(Axis(1))
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max);
        let mut masked_weight = 0.0;
        ndarray::Zip::from(&attn).and(&state.attn_mask).for_each(|&a, &m| {
            if m == f64::NEG_INFINITY {
                masked_weight += a;
            }
        });
        layers.push(LayerCheck {
            layer: l + 1,
            scale: si,
            max_row_sum_error,
            masked_weight,
            reset_rows,
            finite: next.x.iter().all(|v| v.is_finite()),
        });
        x = next.x;
        preds = predict_heads(&x, &pyramid.embed, params)?;
    }
    Ok(ForwardOutput {
        predictions: preds,
        x,
        layers,
    })
}

/// Slice helper used by callers that inspect a single query row.
pub fn query_row(x: &Array2<f64>, i: usize) -> Vec<f64> {
    x.slice(s![i, ..]).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicksim::next_click;
    use crate::field::BinaryMask;
    use crate::synthgen::{generate, SynthSpec};

    fn pyramid(seed: u64, dim: usize) -> FeaturePyramid {
        let sample = generate(&SynthSpec {
            seed: Seed(seed),
            ..Default::default()
        })
        .unwrap();
        let gt = &sample.gt_instances[0];
        let c = next_click(&BinaryMask::zeros(64, 64).unwrap(), gt, &[]).unwrap();
        toy_pyramid(&sample, &[c], dim, Seed(seed)).unwrap()
    }

    #[test]
    fn pyramid_shapes() {
        let p = pyramid(1, 16);
        let dims: Vec<(usize, usize)> = p.scales.iter().map(|s| (s.h, s.w)).collect();
        assert_eq!(dims, vec![(2, 2), (4, 4), (8, 8)]);
        assert_eq!((p.embed.h, p.embed.w), (16, 16));
        assert_eq!(p.embed.features.dim(), (256, 16));
        assert!(p.embed.click_map.values().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn mask_examples() {
        let all_fg = Array2::from_elem((2, 4), 0.7);
        let (m, resets) = attn_mask_from_pred(&all_fg, 0.5).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert_eq!(resets, 0);
        let all_bg = Array2::from_elem((2, 4), 0.2);
        let (m, resets) = attn_mask_from_pred(&all_bg, 0.5).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert_eq!(resets, 2);
        let half = ndarray::arr2(&[[0.9, 0.1, 0.6, 0.4]]);
        let (m, _) = attn_mask_from_pred(&half, 0.5).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![0.0, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]);
        assert!(attn_mask_from_pred(&half, 0.0).is_err());
    }

    #[test]
    fn psi_examples() {
        let params = AttentionParams::seeded(4, 8, Seed(3)).unwrap();
        let mut p = pyramid(2, 8);
        let scale = &mut p.scales[2];
        let x = params.query_init.clone();
        let open = Array2::zeros((4, scale.pixels()));

        // zero clicks: constant ψ bias field
        let saved = scale.click_map.clone();
        scale.click_map = Field::zeros(scale.h, scale.w).unwrap();
        let psi = click_attention_matrix(scale, &x, &params, &open).unwrap();
        assert!(psi.iter().all(|&v| v == params.psi_bias));
        scale.click_map = saved;

        // rectified queries all zero: constant again
        let mut ident = params.clone();
        ident.f_q = Array2::eye(8);
        let neg = Array2::from_elem((4, 8), -1.0);
        let psi = click_attention_matrix(scale, &neg, &ident, &open).unwrap();
        assert!(psi.iter().all(|&v| v == params.psi_bias));

        // mask only adds -inf
        let psi_open = click_attention_matrix(scale, &x, &params, &open).unwrap();
        let mut mask = open.clone();
        mask[[0, 0]] = f64::NEG_INFINITY;
        let psi_masked = click_attention_matrix(scale, &x, &params, &mask).unwrap();
        assert_eq!(psi_masked[[0, 0]], f64::NEG_INFINITY);
        assert_eq!(psi_masked.slice(s![1.., ..]), psi_open.slice(s![1.., ..]));
    }

    #[test]
    fn plain_attention_when_unmasked() {
        let d = 4;
        let mut params = AttentionParams::zeros(2, d);
        params.f_q = Array2::eye(d);
        params.f_k = Array2::eye(d);
        params.f_v = Array2::eye(d);
        let feats = Array2::eye(d); // orthonormal rows, K = V
        let scale = ScaleFeatures {
            h: 2,
            w: 2,
            features: feats.clone(),
            click_map: Field::zeros(2, 2).unwrap(),
        };
        let x = ndarray::arr2(&[[1.0, 0.0, 0.5, 0.0], [0.0, 2.0, 0.0, 0.0]]);
        let psi = Array2::zeros((2, 4));
        let (out, attn) = masked_attention(&x, &psi, &scale, &params).unwrap();
        let expect_attn = softmax_rows(&x.dot(&feats.t())).unwrap();
        assert_eq!(attn, expect_attn);
        let expect = expect_attn.dot(&feats) + &x;
        assert!((out - expect).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn identical_queries_stay_identical() {
        let mut params = AttentionParams::seeded(5, 8, Seed(9)).unwrap();
        let row = params.query_init.row(0).to_owned();
        for mut r in params.query_init.rows_mut() {
            r.assign(&row);
        }
        let out = camd_forward(&pyramid(4, 8), &params, 2).unwrap();
        for i in 1..5 {
            assert_eq!(query_row(&out.x, i), query_row(&out.x, 0));
        }
    }

    #[test]
    fn reset_row_matches_unmasked() {
        let params = AttentionParams::seeded(3, 8, Seed(1)).unwrap();
        let p = pyramid(5, 8);
        let scale = &p.scales[1];
        let x = params.query_init.clone();
        let probs = Array2::from_elem((3, scale.pixels()), 0.1);
        let (mask, resets) = attn_mask_from_pred(&probs, 0.5).unwrap();
        assert_eq!(resets, 3);
        let open = Array2::zeros((3, scale.pixels()));
        let a = click_attention_matrix(scale, &x, &params, &mask).unwrap();
        let b = click_attention_matrix(scale, &x, &params, &open).unwrap();
        let sa = AttentionState {
            x: x.clone(),
            psi_matrix: a,
            attn_mask: mask,
            layer_index: 1,
        };
        let sb = AttentionState {
            x,
            psi_matrix: b,
            attn_mask: open,
            layer_index: 1,
        };
        assert_eq!(
            camd_layer(&sa, scale, &params).unwrap().0.x,
            camd_layer(&sb, scale, &params).unwrap().0.x
        );
    }

    #[test]
    fn heads_examples() {
        let params = AttentionParams::zeros(3, 4);
        let embed = ScaleFeatures {
            h: 2,
            w: 3,
            features: Array2::from_elem((6, 4), 0.3),
            click_map: Field::zeros(2, 3).unwrap(),
        };
        let x = Array2::from_elem((3, 4), 1.0);
        let preds = predict_heads(&x, &embed, &params).unwrap();
        assert_eq!(preds.len(), 3);
        for p in &preds {
            assert!(p.mask_probs.values().iter().all(|&v| v == 0.5));
            assert_eq!(p.click_class_probs, [0.5, 0.5]);
        }
        let seeded = AttentionParams::seeded(3, 4, Seed(2)).unwrap();
        for p in predict_heads(&x, &embed, &seeded).unwrap() {
            assert!((p.click_class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_contract() {
        let params = AttentionParams::seeded(10, 16, Seed(7)).unwrap();
        let p = pyramid(7, 16);
        let a = camd_forward(&p, &params, 1).unwrap();
        assert_eq!(a.layers.len(), 3);
        assert_eq!(a.predictions.len(), 10);
        assert!(a.predictions.iter().all(|q| q.mask_probs.shape() == (16, 16)));
        let b = camd_forward(&p, &params, 1).unwrap();
        assert_eq!(a, b);
        assert!(camd_forward(&p, &params, 0).is_err());
    }

    #[test]
    fn clicks_change_output() {
        let params = AttentionParams::seeded(10, 16, Seed(8)).unwrap();
        let p = pyramid(8, 16);
        let mut q = p.clone();
        for s in q.scales.iter_mut() {
            s.click_map = Field::zeros(s.h, s.w).unwrap();
        }
        let a = camd_forward(&p, &params, 3).unwrap();
        let b = camd_forward(&q, &params, 3).unwrap();
        assert_ne!(a.x, b.x);
    }
}
