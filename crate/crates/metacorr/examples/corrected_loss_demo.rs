//! Tour of the transition-matrix machinery: the corrected posterior, the
//! corrected loss and its identity reduction, and the projection back to the
//! row-stochastic set.
//!
//! Run with: cargo run --release --example corrected_loss_demo

use metacorr::autodiff::Array;
use metacorr::ntm::{
    corrected_loss, corrected_posterior, project_row_stochastic, NoiseTransitionMatrix,
};
use metacorr::synth::Labels;

fn main() {
    // corrected posterior: p(noisy | x) = p(clean | x) T
    let probs = Array::from_vec(&[1, 2], vec![0.8, 0.2]).unwrap();
    let t = Array::from_vec(&[2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
    let posterior = corrected_posterior(&probs, &t).unwrap();
    println!(
        "posterior of (0.8, 0.2) through T = [[0.9,0.1],[0.2,0.8]]: ({:.2}, {:.2})",
        posterior.data()[0],
        posterior.data()[1]
    );

    // corrected loss against noisy label 0: -ln 0.76
    let labels = Labels::new(1, 1, vec![0]);
    let loss = corrected_loss(&probs, &labels, &t).unwrap();
    println!("corrected loss at noisy label 0: {loss:.6} (-ln 0.76 = {:.6})", -(0.76f64).ln());

    // identity T reduces to plain cross-entropy
    let identity = NoiseTransitionMatrix::identity_init(2, 0);
    let plain = corrected_loss(&probs, &labels, &identity.t).unwrap();
    println!("identity correction: {plain:.6} (-ln 0.8 = {:.6})", -(0.8f64).ln());

    // uniform rows absorb everything: loss = ln C no matter the probabilities
    let uniform = Array::filled(&[2, 2], 0.5);
    let absorbed = corrected_loss(&probs, &labels, &uniform).unwrap();
    println!("uniform-row correction: {absorbed:.6} (ln 2 = {:.6})", 2.0f64.ln());

    // projection: clamp negatives, renormalize rows, identity fallback
    let raw = Array::from_vec(&[3, 3], vec![
        0.5, -0.2, 0.7,
        -1.0, -2.0, -0.5,
        0.25, 0.25, 0.5,
    ])
    .unwrap();
    let (projected, diag) = project_row_stochastic(&raw);
    println!("projection of a raw update:");
    for j in 0..3 {
        println!(
            "  row {j}: ({:.4}, {:.4}, {:.4})",
            projected.at(j, 0),
            projected.at(j, 1),
            projected.at(j, 2)
        );
    }
    println!("  identity-row fallbacks: {}", diag.identity_row_fallbacks);

    let (again, _) = project_row_stochastic(&projected);
    let drift = projected.frobenius_distance(&again);
    println!("  idempotence drift after re-projection: {drift:.2e}");
}
