//! Per-pixel logistic model trained by gradient descent under any loss.
//!
//! The model sees the synthetic feature channels plus the positive and
//! negative click disks, so a trained model can drive the click simulator.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clicksim::{encode_clicks, next_click, ClickRecord, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::field::{binarize, iou, BinaryMask, Field, ProbMap, DEFAULT_EPS_CLIP};
use crate::losses::{LossOutput, LossSpec, Reduction};
use crate::rng::Seed;
use crate::synthgen::{SynthSample, FEATURE_NAMES};

/// Number of model inputs: feature channels plus two click channels.
pub const INPUT_DIM: usize = FEATURE_NAMES.len() + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Default for PixelModel {
    fn default() -> Self {
        Self::zeros(INPUT_DIM)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl PixelModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    pub fn predict(&self, inputs: &[Field]) -> Result<ProbMap> {
        if inputs.len() != self.weights.len() {
            return Err(Error::Dimension(format!(
                "model has {} weights but {} input channels were given",
                self.weights.len(),
                inputs.len()
            )));
        }
        let first = inputs
            .first()
            .ok_or_else(|| Error::Dimension("no input channels".into()))?;
        let (h, w) = first.shape();
        if inputs.iter().any(|f| f.shape() != (h, w)) {
            return Err(Error::Dimension("input channels differ in shape".into()));
        }
        let probs = (0..h * w)
            .map(|i| {
                let z = self.bias
                    + self
                        .weights
                        .iter()
                        .zip(inputs)
                        .map(|(wk, f)| wk * f.values()[i])
                        .sum::<f64>();
                sigmoid(z)
            })
            .collect();
        ProbMap::new(h, w, probs)
    }

    pub fn predict_with_clicks(&self, sample: &SynthSample, clicks: &[ClickRecord], radius: usize) -> Result<ProbMap> {
        self.predict(&model_inputs(sample, clicks, radius)?)
    }
}

/// Feature channels of `sample` followed by the positive and negative click disks.
pub fn model_inputs(sample: &SynthSample, clicks: &[ClickRecord], radius: usize) -> Result<Vec<Field>> {
    let (pos, neg) = encode_clicks(clicks, sample.height(), sample.width(), radius)?;
    let mut inputs = sample.features.clone();
    inputs.push(pos.into_field());
    inputs.push(neg.into_field());
    Ok(inputs)
}

/// Chain rule through the logistic: `∂L/∂z = ∂L/∂p · p (1 - p)`.
pub fn logit_chain(grad_wrt_prob: &Field, probs: &ProbMap) -> Result<Field> {
    crate::field::ensure_same_shape(grad_wrt_prob.shape(), probs.shape())?;
    let values = grad_wrt_prob
        .values()
        .iter()
        .zip(probs.values())
        .map(|(g, p)| g * p * (1.0 - p))
        .collect();
    Field::new(probs.height(), probs.width(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: Seed,
    #[serde(default)]
    pub reduction: Reduction,
    /// Ground-truth instance the model is trained to segment.
    #[serde(default)]
    pub target: usize,
}

impl TrainConfig {
    pub fn new(loss: LossSpec, steps: usize, learning_rate: f64) -> Self {
        Self {
            loss,
            steps,
            learning_rate,
            optimizer: Optimizer::adam(),
            seed: Seed(0),
            reduction: Reduction::Sum,
            target: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Parameter("steps must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub iou: f64,
    pub gamma_a: Option<f64>,
    pub gamma_d: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub model: PixelModel,
    pub log: Vec<LogRow>,
}

impl TrainRun {
    pub fn final_iou(&self) -> f64 {
        self.log.last().map_or(0.0, |r| r.iou)
    }

    /// CSV with header `step,loss,iou,gamma_a,gamma_d,mu`; absent diagnostics are empty cells.
    pub fn log_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from("step,loss,iou,gamma_a,gamma_d,mu\n");
        for r in &self.log {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{},{},{}",
                r.step,
                r.loss,
                r.iou,
                opt(r.gamma_a),
                opt(r.gamma_d),
                opt(r.mu)
            );
        }
        out
    }
}

/// Loss and its gradient with respect to the model parameters
/// (`weights` then `bias`) for fixed inputs.
pub fn loss_and_param_grad(
    model: &PixelModel,
    inputs: &[Field],
    gt: &BinaryMask,
    loss: &LossSpec,
    reduction: Reduction,
) -> Result<(LossOutput, ProbMap, Vec<f64>)> {
    let probs = model.predict(inputs)?;
    let out = loss.evaluate(&probs, gt, DEFAULT_EPS_CLIP, reduction)?;
    let dz = logit_chain(&out.grad, &probs)?;
    let mut grad = vec![0.0; model.weights.len() + 1];
    for (k, f) in inputs.iter().enumerate() {
        grad[k] = dz.values().iter().zip(f.values()).map(|(d, x)| d * x).sum();
    }
    grad[model.weights.len()] = dz.values().iter().sum();
    Ok((out, probs, grad))
}

/// Clicks used as model input during training: the protocol's first click.
pub fn training_clicks(gt: &BinaryMask) -> Result<Vec<ClickRecord>> {
    let empty = BinaryMask::zeros(gt.height(), gt.width())?;
    Ok(vec![next_click(&empty, gt, &[])?])
}

/// Trains from a zero initialization. The log has one row per step, taken
/// before that step's update.
pub fn train(sample: &SynthSample, config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    let gt = sample.gt_instances.get(config.target).ok_or_else(|| {
        Error::Parameter(format!(
            "target instance {} out of range ({} instances)",
            config.target,
            sample.gt_instances.len()
        ))
    })?;
    let inputs = model_inputs(sample, &training_clicks(gt)?, DEFAULT_RADIUS)?;
    let mut model = PixelModel::zeros(inputs.len());
    let n_params = inputs.len() + 1;
    let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let (out, probs, grad) = loss_and_param_grad(&model, &inputs, gt, &config.loss, config.reduction)?;
        if !out.value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                msg: format!("non-finite loss {} or gradient", out.value),
            });
        }
        let score = iou(&binarize(&probs, 0.5)?, gt)?;
        log.push(LogRow {
            step,
            loss: out.value,
            iou: score,
            gamma_a: out.diagnostics.get("gamma_a").copied(),
            gamma_d: out.diagnostics.get("gamma_d").copied(),
            mu: out.diagnostics.get("mu").copied(),
        });

        let lr = config.learning_rate;
        let update: Vec<f64> = match config.optimizer {
            Optimizer::Sgd => grad.iter().map(|g| lr * g).collect(),
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                grad.iter()
                    .enumerate()
                    .map(|(k, &g)| {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                        lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps)
                    })
                    .collect()
            }
        };
        let (wu, bu) = update.split_at(model.weights.len());
        model.weights.iter_mut().zip(wu).for_each(|(w, u)| *w -= u);
        model.bias -= bu[0];
        if !model.is_finite() {
            return Err(Error::Training {
                step,
                msg: "parameters became non-finite".into(),
            });
        }
    }
    Ok(TrainRun { model, log })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub loss: String,
    pub final_iou: f64,
    pub final_loss: f64,
    pub run: TrainRun,
}

/// Trains one model per loss from the same (zero) initialization.
pub fn compare_losses(sample: &SynthSample, losses: &[LossSpec], config: &TrainConfig) -> Result<Vec<ComparisonRow>> {
    let runs: Vec<Result<TrainRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = losses
            .iter()
            .map(|loss| {
                let cfg = TrainConfig {
                    loss: loss.clone(),
                    ..config.clone()
                };
                scope.spawn(move || train(sample, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Internal("training thread panicked".into())))
            })
            .collect()
    });
    losses
        .iter()
        .zip(runs)
        .map(|(loss, run)| {
            let run = run?;
            Ok(ComparisonRow {
                loss: loss.name().to_string(),
                final_iou: run.final_iou(),
                final_loss: run.log.last().map_or(f64::NAN, |r| r.loss),
                run,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptive::AflParams;
    use crate::synthgen::{generate, SynthSpec};

    fn disk(seed: u64) -> SynthSample {
        generate(&SynthSpec {
            height: 24,
            width: 24,
            seed: Seed(seed),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn logit_chain_examples() {
        let g = Field::filled(1, 2, 2.0).unwrap();
        let p = ProbMap::filled(1, 2, 0.5).unwrap();
        assert_eq!(logit_chain(&g, &p).unwrap().values(), &[0.5, 0.5]);
        let p1 = ProbMap::filled(1, 2, 1.0).unwrap();
        assert_eq!(logit_chain(&g, &p1).unwrap().values(), &[0.0, 0.0]);
        let z = Field::zeros(1, 2).unwrap();
        assert_eq!(logit_chain(&z, &p).unwrap().values(), &[0.0, 0.0]);
        assert!(logit_chain(&Field::zeros(2, 1).unwrap(), &p).is_err());
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let s = disk(1);
        let cfg = TrainConfig::new(LossSpec::Afl(AflParams::default()), 1, 0.0);
        let run = train(&s, &cfg).unwrap();
        assert_eq!(run.model, PixelModel::default());
        assert_eq!(run.log.len(), 1);
        // zero init predicts 0.5 everywhere, so every foreground pt is 0.5
        assert_eq!(run.log[0].gamma_a, Some(0.5));
    }

    #[test]
    fn deterministic_logs() {
        let s = disk(2);
        let cfg = TrainConfig::new(LossSpec::Focal { gamma: 2.0 }, 30, 0.1);
        let a = train(&s, &cfg).unwrap();
        let b = train(&s, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 30);
        assert!(a.log_csv().starts_with("step,loss,iou,gamma_a,gamma_d,mu\n0,"));
        assert_eq!(a.log_csv().lines().count(), 31);
    }

    #[test]
    fn compare_rows() {
        let s = disk(3);
        let cfg = TrainConfig::new(LossSpec::Bce, 10, 0.1);
        let rows = compare_losses(&s, &[LossSpec::Bce], &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        let rows = compare_losses(
            &s,
            &[LossSpec::Dice { smooth: 1.0 }, LossSpec::Dice { smooth: 1.0 }],
            &cfg,
        )
        .unwrap();
        assert_eq!(rows[0].run, rows[1].run);
    }

    #[test]
    fn invalid_config() {
        let s = disk(4);
        assert!(train(&s, &TrainConfig::new(LossSpec::Bce, 0, 0.1)).is_err());
        assert!(train(&s, &TrainConfig::new(LossSpec::Bce, 1, f64::NAN)).is_err());
        let cfg = TrainConfig {
            target: 3,
            ..TrainConfig::new(LossSpec::Bce, 1, 0.1)
        };
        assert!(train(&s, &cfg).is_err());
    }

    #[test]
    fn model_input_shape_checked() {
        let m = PixelModel::zeros(3);
        assert!(m.predict(&[Field::zeros(2, 2).unwrap()]).is_err());
        let p = PixelModel::zeros(1).predict(&[Field::zeros(2, 2).unwrap()]).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.5));
    }
}
