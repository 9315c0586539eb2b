//! Adaptive focal loss: difficulty adjustment, gradient normalization and the
//! series view of its gradient.

use adafocal::adaptive::{
    afl, afl_grad_series, bce_grad_series, chebyshev_residual, gradient_decomposition, mu, AflParams,
};
use adafocal::{pt_map, BinaryMask, ProbMap, PtMap, Result};

fn main() -> Result<()> {
    // single foreground pixel at p = 0.5
    let (out, d) = afl(
        &ProbMap::new(1, 1, vec![0.5])?,
        &BinaryMask::ones(1, 1)?,
        &AflParams::default(),
    )?;
    println!(
        "single pixel: gamma_a={} gamma_d={} mu={:.7} loss={:.7}",
        d.gamma_a, d.gamma_d, d.mu, out.value
    );

    // a prediction that is confident on the background but unsure on the object
    let gt = BinaryMask::from_fn(8, 8, |r, c| (2..6).contains(&r) && (2..6).contains(&c))?;
    let pred = ProbMap::new(
        8,
        8,
        (0..64).map(|i| if gt.values()[i] == 1 { 0.6 } else { 0.05 }).collect(),
    )?;
    for (label, params) in [
        ("afl", AflParams::default()),
        (
            "no ada",
            AflParams {
                ada_enabled: false,
                ..Default::default()
            },
        ),
        (
            "no agr",
            AflParams {
                agr_enabled: false,
                ..Default::default()
            },
        ),
        ("poly", AflParams::static_poly(2.0, 1.0)),
    ] {
        let (out, d) = afl(&pred, &gt, &params)?;
        println!(
            "{label:<7} loss={:>9.5} gamma_a={:.3} gamma_d={:.3} mu={:>9.3} hard={}",
            out.value, d.gamma_a, d.gamma_d, d.mu, d.hard_count
        );
    }

    let pt = pt_map(&pred, &gt, 1e-7)?;
    let m = mu(&pt, 2.4, 0.4)?;
    let mean: f64 = pt.values().iter().map(|p| m * (1.0 - p).powf(2.4) * 1.96).sum::<f64>() / 64.0;
    println!("\nmean of mu-weighted modifiers = {mean}");

    let grid = PtMap::from_values(1, 4, vec![0.6, 0.75, 0.9, 0.99], 1e-7)?;
    let bce = bce_grad_series(&grid, 200)?;
    let focal = afl_grad_series(&grid, 2.0, 1.0, 200)?;
    let dec = gradient_decomposition(&grid, 2.0, 1.0, 0.4, 200)?;
    println!("\n{:>6} {:>10} {:>10} {:>10} {:>10}", "pt", "bce", "afl", "nu", "mixed");
    for (i, p) in grid.values().iter().enumerate() {
        println!(
            "{p:>6} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
            bce.values()[i],
            focal.values()[i],
            dec.nu.values()[i],
            dec.mixed.values()[i]
        );
    }
    println!(
        "\nchebyshev residual on the grid: {:.6}",
        chebyshev_residual(&grid, 2.0)
    );
    Ok(())
}
