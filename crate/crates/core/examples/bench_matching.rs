//! Times the disentangled matcher against Hungarian over growing proposal
//! counts and prints the fitted log-log slopes.
//!
//! `cargo run --release --example bench_matching -- [trials]`

use of3d::matching::bench_matchers;

fn main() -> of3d::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let report = bench_matchers(&[64, 128, 256, 512, 1024], trials, 0)?;
    print!("{}", report.to_text());
    Ok(())
}
