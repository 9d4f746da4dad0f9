//! Desk-scale laboratory for self-training unsupervised domain adaptation
//! with a learnable noise transition matrix estimated by domain-aware
//! meta-learning, exercised on synthetic segmentation tasks with controllable
//! domain shift and known injected label noise.
//!
//! The crate is organized around the pipeline:
//!
//! - [`autodiff`] — reverse-mode differentiation engine with exact mixed
//!   second derivatives (the meta step differentiates through a gradient
//!   step).
//! - [`synth`] — paired source/target synthetic segmentation datasets plus
//!   label-noise injection with a known transition matrix.
//! - [`models`] — tiny two-head segmentation network and per-pixel domain
//!   predictor, with pretraining routines and checkpoint IO.
//! - [`ntm`] — noise transition matrices, the corrected posterior/loss, and
//!   projection back to the row-stochastic set.
//! - [`train`] — the alternating virtual/meta/actual optimization and the
//!   baseline trainers.
//! - [`metrics`] — segmentation and noise-estimation metrics; the only module
//!   that may read quarantined target ground truth.
//! - [`harness`] — experiment configs, dataset/run commands, CSV/PGM output.
//!
//! See the `examples/` directory for a runnable tour of each capability; the
//! `metacorr` binary exposes the same operations as subcommands.

pub mod autodiff;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod models;
pub mod ntm;
pub mod rng;
pub mod synth;
pub mod train;

pub use autodiff::{Array, Graph, GraphError, NodeId, ParamSet};
