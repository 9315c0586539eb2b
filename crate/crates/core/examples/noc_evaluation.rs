//! NoC85 / NoC90 / mIoU@k for oracle, noisy and trained predictors.

use adafocal::clicksim::{run_noc, summarize, NocConfig, Predictor, Segmenter};
use adafocal::losses::LossSpec;
use adafocal::synthgen::{generate, ShapeKind, SynthSample, SynthSpec};
use adafocal::trainer::{train, TrainConfig};
use adafocal::{AflParams, Result, Seed};

fn evaluate(name: &str, predictor: &dyn Segmenter, samples: &[SynthSample]) -> Result<()> {
    let traces = samples
        .iter()
        .map(|s| run_noc(predictor, s, &s.gt_instances[0], &NocConfig::default()))
        .collect::<Result<Vec<_>>>()?;
    let sum = summarize(&traces)?;
    println!(
        "{name:<10} NoC85 {:>5.2} NoC90 {:>5.2} failed@90 {:>2} mIoU@1 {:.3} mIoU@5 {:.3}",
        sum.noc85, sum.noc90, sum.failures90, sum.miou[0].1, sum.miou[4].1
    );
    Ok(())
}

fn main() -> Result<()> {
    let samples = (0..30)
        .map(|i| {
            generate(&SynthSpec {
                shape_kind: ShapeKind::Ellipse,
                boundary_noise: 1.0,
                intensity_noise: 0.25,
                seed: Seed(100).derive(i),
                ..Default::default()
            })
        })
        .collect::<Result<Vec<_>>>()?;

    evaluate("oracle", &Predictor::Oracle, &samples)?;
    evaluate("noisy:0.5", &Predictor::parse("noisy:0.5", Seed(3))?, &samples)?;

    let run = train(
        &samples[0],
        &TrainConfig::new(LossSpec::Afl(AflParams::default()), 200, 0.5),
    )?;
    evaluate("trained", &Predictor::Trained(run.model), &samples)?;
    Ok(())
}
