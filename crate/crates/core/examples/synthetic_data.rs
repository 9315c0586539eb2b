//! Synthetic samples, their files on disk and the pt difficulty profile.

use adafocal::commands::{load_sample, write_sample};
use adafocal::synthgen::{difficulty_profile, generate, ShapeKind, SynthSpec};
use adafocal::{ProbMap, Result, Seed};

fn main() -> Result<()> {
    let spec = SynthSpec {
        height: 32,
        width: 48,
        n_instances: 2,
        shape_kind: ShapeKind::Blob,
        boundary_noise: 1.5,
        intensity_noise: 0.2,
        nesting: true,
        seed: Seed(5),
    };
    let sample = generate(&spec)?;
    let (outer, inner) = (&sample.gt_instances[0], &sample.gt_instances[1]);
    println!(
        "outer {} px, inner {} px, nested {}",
        outer.count(),
        inner.count(),
        inner.is_subset_of(outer)
    );
    for r in (0..32).step_by(2) {
        let line: String = (0..48)
            .map(|c| match (outer.get(r, c), inner.get(r, c)) {
                (_, true) => '#',
                (true, false) => '+',
                _ => '.',
            })
            .collect();
        println!("{line}");
    }

    let dir = std::env::temp_dir().join("adafocal_synthetic_example");
    write_sample(&dir, &sample)?;
    assert_eq!(load_sample(&dir)?, sample);
    println!("written to {}", dir.display());

    // treat the noisy intensity channel as a prediction
    let pred = ProbMap::from_field(sample.features[3].map(|v| v.clamp(0.0, 1.0)))?;
    let profile = difficulty_profile(outer, &pred)?;
    println!("\npt bin   foreground background");
    for (k, (f, b)) in profile.foreground.iter().zip(&profile.background).enumerate() {
        println!("{:.2}-{:.2} {f:>10} {b:>10}", k as f64 / 20.0, (k + 1) as f64 / 20.0);
    }
    Ok(())
}
