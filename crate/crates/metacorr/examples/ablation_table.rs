//! The full ablation: every method over several seeds on the noisy
//! benchmark, rendered as the summary CSV the `ablation` subcommand writes.
//!
//! Run with: cargo run --release --example ablation_table [seeds]

use metacorr::harness::{ablation_csv, presets, run_ablation};
use metacorr::synth::Dataset;
use metacorr::train::Method;

fn main() {
    let n_seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let cfg = presets::ablation_benchmark();
    let data = Dataset::generate(&cfg.dataset_config()).unwrap();
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let cells = run_ablation(&cfg, &data, &Method::ALL, &seeds).unwrap();
    print!("{}", ablation_csv(&cells, &Method::ALL));
}
