//! Forward pass of the toy clicks-aware masked attention decoder.

use adafocal::attention::{camd_forward, toy_pyramid, AttentionParams};
use adafocal::clicksim::next_click;
use adafocal::synthgen::{generate, SynthSpec};
use adafocal::{BinaryMask, Result, Seed};

fn main() -> Result<()> {
    let seed = Seed(17);
    let sample = generate(&SynthSpec {
        n_instances: 2,
        seed,
        ..Default::default()
    })?;
    let gt = &sample.gt_instances[0];
    let click = next_click(&BinaryMask::zeros(64, 64)?, gt, &[])?;
    println!("click at ({}, {})", click.row, click.col);

    let pyramid = toy_pyramid(&sample, &[click], 16, seed)?;
    let params = AttentionParams::seeded(10, 16, seed)?;
    let out = camd_forward(&pyramid, &params, 3)?;

    println!(
        "{:>5} {:>5} {:>12} {:>10} {:>6}",
        "layer", "scale", "row err", "masked", "reset"
    );
    for l in &out.layers {
        let s = &pyramid.scales[l.scale];
        println!(
            "{:>5} {:>2}x{:<2} {:>12.2e} {:>10} {:>6}",
            l.layer, s.h, s.w, l.max_row_sum_error, l.masked_weight, l.reset_rows
        );
    }
    for (i, p) in out.predictions.iter().enumerate() {
        let fg = p.mask_probs.values().iter().filter(|&&v| v >= 0.5).count();
        println!("query {i}: object {:.3}, {fg} foreground cells", p.click_class_probs[0]);
    }
    Ok(())
}
