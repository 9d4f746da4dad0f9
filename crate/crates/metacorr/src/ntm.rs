//! Noise transition matrices and the corrected self-training loss.
//!
//! A transition matrix T is row-stochastic with T[j,k] the probability that a
//! clean label j shows up as noisy label k. Multiplying per-pixel class
//! probabilities by T turns the clean posterior into the noisy-label
//! posterior, so cross-entropy against noisy labels trains the clean model.

use crate::autodiff::{Array, Graph, GraphError, NodeId};
use crate::synth::Labels;

/// Floor applied inside the log of the corrected loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-stochastic C x C matrix attached to one supervision level
/// (0 = deep output head, 1 = shallow auxiliary head).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTransitionMatrix {
    pub t: Array,
    pub level: usize,
}

impl NoiseTransitionMatrix {
    /// Identity initialization: the corrected loss then starts as plain
    /// self-training.
    pub fn identity_init(classes: usize, level: usize) -> Self {
        assert!(classes >= 2, "need at least 2 classes, got {classes}");
        NoiseTransitionMatrix { t: Array::eye(classes), level }
    }

    pub fn classes(&self) -> usize {
        self.t.rows()
    }

    pub fn frobenius_vs_identity(&self) -> f64 {
        self.t.frobenius_distance(&Array::eye(self.classes()))
    }
}

/// Outcome of a projection onto the row-stochastic set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionDiag {
    /// Rows that clamped to all zeros and were replaced by identity rows.
    pub identity_row_fallbacks: usize,
}

/// Clamps negatives to zero, then divides each row by its sum.
///
/// A row with no positive mass is replaced by the corresponding identity row
/// (no correction for that class). Idempotent up to roundoff.
pub fn project_row_stochastic(raw: &Array) -> (Array, ProjectionDiag) {
    let c = raw.rows();
    let mut out = Array::zeros(&[c, raw.cols()]);
    let mut diag = ProjectionDiag::default();
    for j in 0..c {
        let mut sum = 0.0;
        for k in 0..raw.cols() {
            let v = raw.at(j, k).max(0.0);
            out.set(j, k, v);
            sum += v;
        }
        if sum <= 0.0 {
            for k in 0..raw.cols() {
                out.set(j, k, if k == j { 1.0 } else { 0.0 });
            }
            diag.identity_row_fallbacks += 1;
        } else {
            for k in 0..raw.cols() {
                out.set(j, k, out.at(j, k) / sum);
            }
        }
    }
    (out, diag)
}

/// Corrected posterior on plain arrays: probs (n,C) times T.
pub fn corrected_posterior(probs: &Array, t: &Array) -> Result<Array, GraphError> {
    if probs.shape().len() != 2 || t.shape().len() != 2 || probs.cols() != t.rows() {
        return Err(GraphError::BadShape(format!(
            "corrected_posterior: probs {:?} vs T {:?}",
            probs.shape(),
            t.shape()
        )));
    }
    Ok(probs.matmul(t))
}

/// Corrected cross-entropy on plain arrays, averaged over pixels.
pub fn corrected_loss(probs: &Array, labels: &Labels, t: &Array) -> Result<f64, GraphError> {
    let posterior = corrected_posterior(probs, t)?;
    if labels.len() != posterior.rows() {
        return Err(GraphError::BadShape(format!(
            "corrected_loss: {} labels vs {} rows",
            labels.len(),
            posterior.rows()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in labels.ids.iter().enumerate() {
        total -= posterior.at(p, y as usize).max(LOG_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

// ── graph builders ───────────────────────────────────────────────────

/// One-hot rows for a label map, (n, classes).
pub fn one_hot(labels: &Labels, classes: usize) -> Array {
    let n = labels.len();
    let mut out = Array::zeros(&[n, classes]);
    for (p, &y) in labels.ids.iter().enumerate() {
        out.data_mut()[p * classes + y as usize] = 1.0;
    }
    out
}

/// One-hot rows zeroed wherever the mask is false.
pub fn one_hot_masked(labels: &Labels, classes: usize, mask: &[bool]) -> Array {
    let mut out = one_hot(labels, classes);
    for (p, &keep) in mask.iter().enumerate() {
        if !keep {
            for k in 0..classes {
                out.data_mut()[p * classes + k] = 0.0;
            }
        }
    }
    out
}

/// Sum over pixels of `-log p[label]` with masked-out rows contributing zero,
/// divided by `normalizer`.
///
/// `targets` must be one-hot rows (possibly masked to all-zero); `row_offsets`
/// is 1.0 on masked-out rows so their log argument is exactly 1.
pub fn masked_ce_graph(
    g: &mut Graph,
    probs: NodeId,
    targets: &Array,
    row_offsets: &Array,
    normalizer: f64,
) -> Result<NodeId, GraphError> {
    let y = g.constant(targets.clone())?;
    let picked = g.mul(y, probs)?;
    let row = g.sum_last(picked)?;
    let offs = g.constant(row_offsets.clone())?;
    let shifted = g.add(row, offs)?;
    let clamped = g.clamp_min(shifted, LOG_FLOOR)?;
    let logs = g.log(clamped)?;
    let total = g.sum_all(logs)?;
    g.scalar_mul(total, -1.0 / normalizer)
}

/// Mean cross-entropy of probabilities against labels, built on the graph.
pub fn ce_graph(
    g: &mut Graph,
    probs: NodeId,
    labels: &Labels,
    classes: usize,
) -> Result<NodeId, GraphError> {
    let n = labels.len();
    let targets = one_hot(labels, classes);
    let offsets = Array::zeros(&[n, 1]);
    masked_ce_graph(g, probs, &targets, &offsets, n as f64)
}

/// Mean corrected cross-entropy: probabilities are multiplied by T before the
/// log. Gradients flow to both the probabilities and T.
pub fn corrected_ce_graph(
    g: &mut Graph,
    probs: NodeId,
    t: NodeId,
    labels: &Labels,
    classes: usize,
) -> Result<NodeId, GraphError> {
    let posterior = g.matmul(probs, t)?;
    ce_graph(g, posterior, labels, classes)
}
