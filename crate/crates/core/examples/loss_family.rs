//! Evaluates every loss in the family on one small prediction.

use adafocal::losses::{LossSpec, Reduction};
use adafocal::{BinaryMask, ProbMap, Result};

fn main() -> Result<()> {
    let gt = BinaryMask::new(3, 3, vec![0, 1, 0, 1, 1, 1, 0, 1, 0])?;
    let pred = ProbMap::new(3, 3, vec![0.1, 0.7, 0.3, 0.55, 0.9, 0.6, 0.2, 0.4, 0.05])?;

    println!("{:<12} {:>12} {:>12} {:>12}", "loss", "sum", "mean", "|grad|");
    for name in LossSpec::NAMES {
        let spec = LossSpec::by_name(name)?;
        let sum = spec.evaluate(&pred, &gt, 1e-7, Reduction::Sum)?;
        let mean = spec.evaluate(&pred, &gt, 1e-7, Reduction::Mean)?;
        println!(
            "{name:<12} {:>12.6} {:>12.6} {:>12.6}",
            sum.value,
            mean.value,
            sum.grad.l2()
        );
    }

    let poly = LossSpec::Poly { gamma: 1.0, alpha: 2.0 };
    let out = poly.evaluate(&pred, &gt, 1e-7, Reduction::Sum)?;
    println!("\npoly(gamma=1, alpha=2) per-pixel gradient:");
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{:>9.4}", out.grad.get(r, c))).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
