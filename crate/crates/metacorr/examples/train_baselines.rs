//! Trains every baseline on the noisy benchmark and prints the comparison:
//! source-only, plain self-training, confidence-threshold self-training,
//! single-level correction, and full multi-level correction.
//!
//! Run with: cargo run --release --example train_baselines [seeds]

use rayon::prelude::*;

use metacorr::harness::{presets, run_training};
use metacorr::synth::Dataset;
use metacorr::train::Method;

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let cfg = presets::ablation_benchmark();
    let data = Dataset::generate(&cfg.dataset_config()).unwrap();
    println!("ablation benchmark: pseudo labels from the warm-started model; {seeds} seed(s)");
    println!("{:>26} {:>12} {:>12}", "method", "clean_acc", "miou");

    for method in Method::ALL {
        let results: Vec<(f64, f64)> = (0..seeds)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.noise_seed = seed;
                let art = run_training(&c, &data, method, seed).unwrap();
                let miou = art.outcome.history.last().map(|r| r.miou_target).unwrap_or(0.0);
                (art.clean_target_accuracy, miou)
            })
            .collect();
        let acc = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        let miou = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
        println!("{:>26} {:>12.4} {:>12.4}", method.name(), acc, miou);
    }
}
