//! Hungarian assignment and the set loss over click-predicted instances.

use adafocal::matching::{hungarian, total_loss, GroundTruthInstance, InstancePrediction, LossWeights};
use adafocal::{AflParams, BinaryMask, ProbMap, Result};

fn square(r0: usize, c0: usize) -> Result<BinaryMask> {
    BinaryMask::from_fn(12, 12, |r, c| (r0..r0 + 4).contains(&r) && (c0..c0 + 4).contains(&c))
}

fn soften(mask: &BinaryMask, hi: f64) -> Result<ProbMap> {
    ProbMap::new(
        12,
        12,
        mask.values()
            .iter()
            .map(|&v| if v == 1 { hi } else { 1.0 - hi })
            .collect(),
    )
}

fn main() -> Result<()> {
    let costs = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    let m = hungarian(&costs)?;
    println!("square: {:?} total {}", m.assignment, m.total_cost);
    let wide = hungarian(&[vec![7.0, 2.0, 9.0, 4.0], vec![3.0, 8.0, 1.0, 6.0]])?;
    println!("2x4:    {:?} total {}", wide.assignment, wide.total_cost);

    let gts = vec![
        GroundTruthInstance::object(square(1, 1)?),
        GroundTruthInstance::object(square(6, 7)?),
    ];
    let preds = vec![
        InstancePrediction::new(soften(&square(6, 7)?, 0.9)?, [0.8, 0.2])?,
        InstancePrediction::new(soften(&square(0, 5)?, 0.6)?, [0.1, 0.9])?,
        InstancePrediction::new(soften(&square(1, 1)?, 0.8)?, [0.7, 0.3])?,
    ];
    let (loss, result, parts) = total_loss(&preds, &gts, &LossWeights::default(), &AflParams::default())?;
    println!(
        "\nassignment {:?}, unmatched {:?}",
        result.assignment, result.unmatched_predictions
    );
    println!(
        "total {loss:.4} = mask {:.4} + click {:.4} + unclick {:.4}",
        parts.mask, parts.click_matched, parts.click_unmatched
    );
    for (pair, t) in result.assignment.iter().zip(&parts.pairs) {
        println!(
            "  pred {} -> gt {}: afl {:.4} dice {:.4} click {:.4}",
            pair.0, pair.1, t.afl, t.dice, t.click
        );
    }
    Ok(())
}
