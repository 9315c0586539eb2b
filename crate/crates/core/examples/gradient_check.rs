//! Finite-difference gradient check and derivation identities.

use adafocal::losses::LossSpec;
use adafocal::verify::{grad_check, identity_checks, FD_TOLERANCE};
use adafocal::{Result, Seed};

fn main() -> Result<()> {
    for r in grad_check(&LossSpec::NAMES, 100, Seed(2024))? {
        println!(
            "{:<12} max rel err {:.3e} (tol {FD_TOLERANCE:e}) {}",
            r.loss,
            r.max_relative_error,
            pass(r.pass)
        );
    }
    println!();
    for c in identity_checks(100, Seed(2024))? {
        println!(
            "{:<28} {:.3e} <= {:e} {}",
            c.name,
            c.measured,
            c.tolerance,
            pass(c.pass)
        );
    }
    Ok(())
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}
