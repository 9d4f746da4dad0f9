//! Runs every finite-difference suite: per-primitive checks, the full
//! two-head network, the corrected loss with respect to T, the mixed second
//! derivative on a micro model, and the end-to-end meta gradient.
//!
//! Run with: cargo run --release --example gradient_check

use metacorr::gradcheck;

fn main() {
    let checks = gradcheck::run_all(42).unwrap();
    print!("{}", gradcheck::render_report(&checks));
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed == 0 {
        println!("all {} checks passed", checks.len());
    } else {
        println!("{failed} checks FAILED");
        std::process::exit(2);
    }
}
