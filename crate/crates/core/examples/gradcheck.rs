//! Finite-difference check of every registered layer, as a table.
//!
//! `cargo run --release --example gradcheck -- [seeds] [elements-per-tensor]`

use std::time::Instant;

use t3d::gradcheck::{check_all, TOLERANCE};

fn main() -> t3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let per_tensor = args.next().and_then(|a| a.parse().ok()).unwrap_or(16);
    let t0 = Instant::now();
    let report = check_all(seeds, per_tensor)?;
    print!("{report}");
    println!("tolerance {TOLERANCE:e}, {:.1?}", t0.elapsed());
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}
