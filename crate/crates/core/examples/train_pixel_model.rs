//! Trains the per-pixel logistic model under several losses.

use adafocal::losses::LossSpec;
use adafocal::synthgen::{generate, SynthSpec};
use adafocal::trainer::{compare_losses, train, TrainConfig};
use adafocal::{AflParams, Result, Seed};

fn main() -> Result<()> {
    let sample = generate(&SynthSpec {
        intensity_noise: 0.3,
        seed: Seed(1),
        ..Default::default()
    })?;
    let config = TrainConfig::new(LossSpec::Afl(AflParams::default()), 300, 0.5);
    let run = train(&sample, &config)?;
    for row in run.log.iter().step_by(50).chain(run.log.last()) {
        println!(
            "step {:>3} loss {:>10.4} iou {:.4} gamma_a {:.4} mu {:.3}",
            row.step,
            row.loss,
            row.iou,
            row.gamma_a.unwrap_or(0.0),
            row.mu.unwrap_or(1.0)
        );
    }

    let losses: Vec<LossSpec> = ["bce", "focal", "poly", "dice", "afl"]
        .iter()
        .map(|n| LossSpec::by_name(n))
        .collect::<Result<_>>()?;
    println!("\n{:<8} {:>10} {:>12}", "loss", "final iou", "final loss");
    for row in compare_losses(&sample, &losses, &config)? {
        println!("{:<8} {:>10.4} {:>12.4}", row.loss, row.final_iou, row.final_loss);
    }
    Ok(())
}
