//! Mask-adaptive set matching: per-pair costs, minimum-cost assignment, and
//! the assembled training objective over a set of query predictions.

use serde::{Deserialize, Serialize};

use crate::adaptive::{afl, AflParams};
use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, BinaryMask, ProbMap};
use crate::losses::dice;

/// Index of the object class in click-class vectors.
pub const OBJECT: usize = 0;
/// Index of the "unclick" (no object) class.
pub const UNCLICK: usize = 1;

const SIMPLEX_TOL: f64 = 1e-9;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub mask_probs: ProbMap,
    /// `[p(object), p(unclick)]`.
    pub click_class_probs: [f64; 2],
}

impl InstancePrediction {
    pub fn new(mask_probs: ProbMap, click_class_probs: [f64; 2]) -> Result<Self> {
        let [a, b] = click_class_probs;
        if !(a >= 0.0 && b >= 0.0 && ((a + b) - 1.0).abs() <= SIMPLEX_TOL) {
            return Err(Error::Parameter(format!(
                "click class probabilities {click_class_probs:?} are not on the simplex"
            )));
        }
        Ok(Self {
            mask_probs,
            click_class_probs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub mask: BinaryMask,
    /// One-hot click class.
    pub click_class: [u8; 2],
}

impl GroundTruthInstance {
    pub fn new(mask: BinaryMask, click_class: [u8; 2]) -> Result<Self> {
        if click_class != [1, 0] && click_class != [0, 1] {
            return Err(Error::Parameter(format!("{click_class:?} is not one-hot")));
        }
        Ok(Self { mask, click_class })
    }

    /// Ground-truth object instance.
    pub fn object(mask: BinaryMask) -> Self {
        Self {
            mask,
            click_class: [1, 0],
        }
    }

    pub fn class_index(&self) -> usize {
        if self.click_class[OBJECT] == 1 {
            OBJECT
        } else {
            UNCLICK
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_cli: f64,
    pub lambda_afl: f64,
    pub lambda_dice: f64,
    pub unclick_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mask: 1.0,
            lambda_cli: 2.0,
            lambda_afl: 5.0,
            lambda_dice: 5.0,
            unclick_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_mask,
            self.lambda_cli,
            self.lambda_afl,
            self.lambda_dice,
            self.unclick_weight,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Parameter(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction index, ground-truth index)` pairs, sorted by prediction index.
    pub assignment: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub pair_costs: Vec<f64>,
    pub total_cost: f64,
}

/// Components of one matched pair's cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairTerms {
    pub afl: f64,
    pub dice: f64,
    pub click: f64,
    pub total: f64,
}

fn neg_log(p: f64) -> f64 {
    -p.max(LOG_FLOOR).ln()
}

pub fn pair_terms(
    pred: &InstancePrediction,
    gt: &GroundTruthInstance,
    weights: &LossWeights,
    afl_params: &AflParams,
) -> Result<PairTerms> {
    ensure_same_shape(pred.mask_probs.shape(), gt.mask.shape())?;
    let (a, _) = afl(&pred.mask_probs, &gt.mask, afl_params)?;
    let d = dice(&pred.mask_probs, &gt.mask, 1.0)?;
    let click = neg_log(pred.click_class_probs[gt.class_index()]);
    let mask_loss = weights.lambda_afl * a.value + weights.lambda_dice * d.value;
    Ok(PairTerms {
        afl: a.value,
        dice: d.value,
        click,
        total: weights.lambda_mask * mask_loss + weights.lambda_cli * click,
    })
}

/// Matching cost `λ_mask (λ_afl afl + λ_dice dice) + λ_cli (-ln p[class])`.
pub fn pair_cost(
    pred: &InstancePrediction,
    gt: &GroundTruthInstance,
    weights: &LossWeights,
    afl_params: &AflParams,
) -> Result<f64> {
    Ok(pair_terms(pred, gt, weights, afl_params)?.total)
}

/// Minimum-cost injective assignment of size `min(N, M)` for an N×M matrix.
///
/// Runs the shortest-augmenting-path Hungarian method on the orientation with
/// fewer rows. Ties resolve toward lower indices: rows are inserted in index
/// order and the first column reaching the minimum slack wins.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    if n == 0 {
        return Err(Error::Dimension("cost matrix has no rows".into()));
    }
    let m = cost[0].len();
    if m == 0 {
        return Err(Error::Dimension("cost matrix has no columns".into()));
    }
    for (i, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(Error::Dimension(format!(
                "row {i} has {} entries, expected {m}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("cost matrix row {i} contains {v}")));
        }
    }

    let pairs: Vec<(usize, usize)> = if n <= m {
        solve_rows(n, m, |i, j| cost[i][j])
    } else {
        let mut t = solve_rows(m, n, |i, j| cost[j][i]);
        t.iter_mut().for_each(|p| *p = (p.1, p.0));
        t.sort_unstable();
        t
    };

    let pair_costs: Vec<f64> = pairs.iter().map(|&(i, j)| cost[i][j]).collect();
    let matched: Vec<bool> = {
        let mut v = vec![false; n];
        pairs.iter().for_each(|&(i, _)| v[i] = true);
        v
    };
    Ok(MatchResult {
        unmatched_predictions: (0..n).filter(|&i| !matched[i]).collect(),
        total_cost: pair_costs.iter().sum(),
        pair_costs,
        assignment: pairs,
    })
}

/// Hungarian method for `rows <= cols`; returns `(row, col)` sorted by row.
fn solve_rows(rows: usize, cols: usize, c: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Weighted mask term `Σ λ_mask (λ_afl afl + λ_dice dice)` over matched pairs.
    pub mask: f64,
    /// Weighted click term over matched pairs.
    pub click_matched: f64,
    /// Weighted "unclick" term over unmatched predictions.
    pub click_unmatched: f64,
    pub pairs: Vec<PairTerms>,
}

/// Set objective over all predictions.
///
/// Matched pairs contribute their [`pair_cost`]; each unmatched prediction
/// contributes `unclick_weight · λ_cli · (-ln p[unclick])`. The assignment is
/// chosen to minimise this full objective, so each row of the cost matrix is
/// offset by the cost of leaving that prediction unmatched.
pub fn total_loss(
    preds: &[InstancePrediction],
    gts: &[GroundTruthInstance],
    weights: &LossWeights,
    afl_params: &AflParams,
) -> Result<(f64, MatchResult, LossBreakdown)> {
    if preds.is_empty() {
        return Err(Error::Dimension("need at least one prediction".into()));
    }
    weights.validate()?;
    let shape = preds[0].mask_probs.shape();
    for p in preds {
        ensure_same_shape(shape, p.mask_probs.shape())?;
    }
    for g in gts {
        ensure_same_shape(shape, g.mask.shape())?;
    }
    let unclick: Vec<f64> = preds
        .iter()
        .map(|p| weights.unclick_weight * weights.lambda_cli * neg_log(p.click_class_probs[UNCLICK]))
        .collect();

    let mut breakdown = LossBreakdown {
        mask: 0.0,
        click_matched: 0.0,
        click_unmatched: 0.0,
        pairs: Vec::new(),
    };

    let result = if gts.is_empty() {
        MatchResult {
            assignment: Vec::new(),
            unmatched_predictions: (0..preds.len()).collect(),
            pair_costs: Vec::new(),
            total_cost: 0.0,
        }
    } else {
        let terms: Vec<Vec<PairTerms>> = preds
            .iter()
            .map(|p| gts.iter().map(|g| pair_terms(p, g, weights, afl_params)).collect())
            .collect::<Result<_>>()?;
        let adjusted: Vec<Vec<f64>> = terms
            .iter()
            .zip(&unclick)
            .map(|(row, &uc)| row.iter().map(|t| t.total - uc).collect())
            .collect();
        let mut r = hungarian(&adjusted)?;
        r.pair_costs = r.assignment.iter().map(|&(i, j)| terms[i][j].total).collect();
        r.total_cost = r.pair_costs.iter().sum();
        for &(i, j) in &r.assignment {
            let t = terms[i][j];
            breakdown.mask += weights.lambda_mask * (weights.lambda_afl * t.afl + weights.lambda_dice * t.dice);
            breakdown.click_matched += weights.lambda_cli * t.click;
            breakdown.pairs.push(t);
        }
        r
    };
    breakdown.click_unmatched = result.unmatched_predictions.iter().map(|&i| unclick[i]).sum();
    let total = result.total_cost + breakdown.click_unmatched;
    Ok((total, result, breakdown))
}
