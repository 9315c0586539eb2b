//! Focal-component loss against pt for several difficulty exponents, and
//! the hard/easy ratio as the exponent grows.

use adafocal::commands::curve_point;
use adafocal::verify::{focal_component, reweighting_violations};

fn main() {
    let gammas = [0.0, 0.5, 1.0, 2.0, 3.0];
    print!("{:>5}", "pt");
    for g in gammas {
        print!(" {:>10}", format!("gd={g}"));
    }
    println!();
    for k in 1..10 {
        let pt = k as f64 / 10.0;
        print!("{pt:>5.1}");
        for g in gammas {
            print!(" {:>10.5}", curve_point(pt, g, 0.0).0);
        }
        println!();
    }

    println!("\nratio loss(0.2) / loss(0.8):");
    for g in gammas {
        println!(
            "  gamma_d {g:>3}: {:>10.2}",
            focal_component(0.2, g) / focal_component(0.8, g)
        );
    }
    println!(
        "monotonicity violations on the 9-point grid: {}",
        reweighting_violations()
    );
}
