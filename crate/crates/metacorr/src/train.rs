//! Alternating optimization for meta-learned loss correction, plus the
//! baseline trainers.
//!
//! One training iteration runs three phases in order:
//!
//! 1. **virtual step** — a hypothetical gradient step on the corrected target
//!    loss, recorded so the updated weights stay differentiable in T;
//! 2. **meta step** — descend the clean meta-set loss at the virtual weights
//!    with respect to T (an exact second-order gradient), then project T back
//!    onto the row-stochastic set;
//! 3. **actual step** — a momentum SGD step on source cross-entropy plus the
//!    corrected target losses, with T held constant.
//!
//! Baselines reuse the same loop with the meta machinery switched off, so a
//! correction-free run is bit-identical to plain self-training.


use crate::autodiff::{Array, Graph, GraphError, NodeId, ParamSet};
use crate::metrics::{self, MetricError};
use crate::models::{forward_seg, seg_forward_graph, DomainPredictor, SegNet};
use crate::ntm::{self, NoiseTransitionMatrix, ProjectionDiag};
use crate::rng::{self, Purpose};
use crate::synth::{DataError, Dataset, Labels};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("source data is empty")]
    EmptySource,
    #[error("stale virtual record: {0}")]
    StaleVirtualRecord(String),
    #[error("method '{0}' needs a pretrained domain predictor")]
    MissingDomainPredictor(String),
    #[error("unknown method '{0}' (valid: {1})")]
    UnknownMethod(String, String),
}

// ── configuration ────────────────────────────────────────────────────

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Learning rate of the virtual (recorded) step.
    pub virtual_lr: f64,
    /// Learning rate of the transition-matrix update.
    pub meta_lr: f64,
    /// Learning rate of the actual weight update.
    pub actual_lr: f64,
    /// Momentum of the actual step only.
    pub momentum: f64,
    /// Weight decay of the actual step only.
    pub weight_decay: f64,
    /// Per-level weights (deep head, shallow head).
    pub alpha0: f64,
    pub alpha1: f64,
    /// Meta-set selection threshold on domain scores.
    pub tau: f64,
    /// Iteration budget.
    pub steps: usize,
    /// Iterations between pseudo-label regeneration; 0 = never refresh.
    pub pseudo_refresh_every: usize,
    /// Pixels per meta batch.
    pub meta_batch_pixels: usize,
    /// Iterations of plain (identity-T) training before the first virtual and
    /// meta steps; lets the weights fit the labels before T starts moving.
    pub meta_warmup_steps: usize,
    /// Images per source/target batch.
    pub batch_images: usize,
    /// Confidence cut of the threshold self-training baseline.
    pub confidence_cut: f64,
    /// Iterations between history rows.
    pub eval_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            virtual_lr: 1e-4,
            meta_lr: 0.11,
            actual_lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-3,
            alpha0: 1.0,
            alpha1: 0.1,
            tau: 0.5,
            steps: 2000,
            pseudo_refresh_every: 0,
            meta_batch_pixels: 256,
            meta_warmup_steps: 0,
            batch_images: 4,
            confidence_cut: 0.9,
            eval_every: 50,
        }
    }
}

impl OptimizerConfig {
    /// Zero virtual/meta rates are the documented off-switch for the meta
    /// machinery; the actual rate must be positive.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.actual_lr <= 0.0 {
            return Err(TrainError::InvalidConfig(format!("actual_lr must be > 0, got {}", self.actual_lr)));
        }
        if self.virtual_lr < 0.0 || self.meta_lr < 0.0 {
            return Err(TrainError::InvalidConfig("virtual_lr and meta_lr must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(TrainError::InvalidConfig(format!("tau must be in [0,1], got {}", self.tau)));
        }
        if self.alpha0 < 0.0 || self.alpha1 < 0.0 {
            return Err(TrainError::InvalidConfig("level weights must be >= 0".into()));
        }
        if self.batch_images == 0 || self.meta_batch_pixels == 0 {
            return Err(TrainError::InvalidConfig("batch sizes must be > 0".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_cut) {
            return Err(TrainError::InvalidConfig("confidence_cut must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn alpha(&self) -> [f64; 2] {
        [self.alpha0, self.alpha1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    SelfTraining,
    ThresholdSelfTraining,
    SingleDmlc,
    MetaCorrection,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SourceOnly,
        Method::SelfTraining,
        Method::ThresholdSelfTraining,
        Method::SingleDmlc,
        Method::MetaCorrection,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::SelfTraining => "self_training",
            Method::ThresholdSelfTraining => "threshold_self_training",
            Method::SingleDmlc => "single_dmlc",
            Method::MetaCorrection => "metacorrection",
        }
    }

    pub fn parse(s: &str) -> Result<Method, TrainError> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                let valid = Method::ALL.map(|m| m.name()).join(", ");
                TrainError::UnknownMethod(s.to_string(), valid)
            })
    }

    pub fn uses_correction(&self) -> bool {
        matches!(self, Method::SingleDmlc | Method::MetaCorrection)
    }
}

pub fn ntm_leaf_name(level: usize) -> String {
    format!("ntm.level{level}")
}

// ── pseudo labels ────────────────────────────────────────────────────

/// Pseudo labels of every target image, plus the generating model's
/// confidence in each assigned class.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    pub maps: Vec<Labels>,
    pub confidence: Vec<Vec<f64>>,
    pub generated_at: usize,
}

/// Deep-head argmax labels for every target image; ties break toward the
/// lowest class index.
pub fn generate_pseudo_labels(
    net: &SegNet,
    target_pixels: &[&Array],
    h: usize,
    w: usize,
    step: usize,
) -> Result<PseudoLabels, TrainError> {
    let mut maps = Vec::with_capacity(target_pixels.len());
    let mut confidence = Vec::with_capacity(target_pixels.len());
    for pixels in target_pixels {
        let (deep, _) = forward_seg(&net.params, pixels, h, w)?;
        let labels = crate::models::argmax_labels(&deep, h, w);
        let conf = labels
            .ids
            .iter()
            .enumerate()
            .map(|(p, &y)| deep.at(p, y as usize))
            .collect();
        maps.push(labels);
        confidence.push(conf);
    }
    Ok(PseudoLabels { maps, confidence, generated_at: step })
}

/// Wraps externally supplied labels (an oracle noise draw) as pseudo labels;
/// confidence is the given model's probability of the injected class.
pub fn injected_pseudo_labels(
    net: &SegNet,
    target_pixels: &[&Array],
    injected: &[Labels],
    h: usize,
    w: usize,
) -> Result<PseudoLabels, TrainError> {
    let mut confidence = Vec::with_capacity(injected.len());
    for (pixels, labels) in target_pixels.iter().zip(injected.iter()) {
        let (deep, _) = forward_seg(&net.params, pixels, h, w)?;
        confidence.push(
            labels
                .ids
                .iter()
                .enumerate()
                .map(|(p, &y)| deep.at(p, y as usize))
                .collect(),
        );
    }
    Ok(PseudoLabels { maps: injected.to_vec(), confidence, generated_at: 0 })
}

// ── meta set ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct MetaEntry {
    pub image: usize,
    pub pixel: usize,
    pub label: u8,
    pub score: f64,
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct MetaSet {
    pub entries: Vec<MetaEntry>,
    pub fallback_used: bool,
}

impl MetaSet {
    pub fn fallback_count(&self) -> usize {
        self.entries.iter().filter(|e| e.fallback).count()
    }
}

/// Selects clean-labeled source pixels whose domain score exceeds `tau`.
///
/// If fewer than `min_pixels` qualify, falls back to the top 5% of all source
/// pixels by score, flagged as fallback entries.
pub fn select_meta_set(
    predictor: &DomainPredictor,
    source: &[crate::synth::LabeledImage],
    tau: f64,
    min_pixels: usize,
    h: usize,
    w: usize,
) -> Result<MetaSet, TrainError> {
    if source.is_empty() {
        return Err(TrainError::EmptySource);
    }
    let mut scored: Vec<MetaEntry> = Vec::with_capacity(source.len() * h * w);
    for (i, img) in source.iter().enumerate() {
        let scores = crate::models::forward_domain(&predictor.params, &img.pixels, h, w)?;
        for p in 0..h * w {
            scored.push(MetaEntry {
                image: i,
                pixel: p,
                label: img.labels.ids[p],
                score: scores.data()[p],
                fallback: false,
            });
        }
    }
    let qualified: Vec<MetaEntry> =
        scored.iter().filter(|e| e.score > tau).cloned().collect();
    if qualified.len() >= min_pixels {
        return Ok(MetaSet { entries: qualified, fallback_used: false });
    }
    // top 5% by score, deterministic tie-break on (image, pixel)
    let take = ((scored.len() as f64 * 0.05).ceil() as usize).max(1);
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .score
            .partial_cmp(&scored[a].score)
            .unwrap()
            .then(scored[a].image.cmp(&scored[b].image))
            .then(scored[a].pixel.cmp(&scored[b].pixel))
    });
    let entries = order[..take]
        .iter()
        .map(|&i| MetaEntry { fallback: true, ..scored[i].clone() })
        .collect();
    Ok(MetaSet { entries, fallback_used: true })
}

/// Uniformly samples a meta batch: up to `batch_images` distinct images that
/// hold meta entries, then up to `max_pixels` of their entries.
pub fn sample_meta_batch(
    meta_set: &MetaSet,
    batch_images: usize,
    max_pixels: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<MetaEntry> {
    let mut images: Vec<usize> = meta_set.entries.iter().map(|e| e.image).collect();
    images.sort_unstable();
    images.dedup();
    let chosen: Vec<usize> = if images.len() <= batch_images {
        images
    } else {
        rng::sample_distinct(rng, images.len(), batch_images)
            .into_iter()
            .map(|i| images[i])
            .collect()
    };
    let pool: Vec<&MetaEntry> = meta_set
        .entries
        .iter()
        .filter(|e| chosen.contains(&e.image))
        .collect();
    if pool.len() <= max_pixels {
        return pool.into_iter().cloned().collect();
    }
    rng::sample_distinct(rng, pool.len(), max_pixels)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

// ── virtual step ─────────────────────────────────────────────────────

/// Recorded virtual step: keeps the corrected-loss graph alive so the meta
/// step can differentiate the virtual weights with respect to T.
pub struct VirtualRecord {
    graph: Graph,
    t_names: Vec<String>,
    /// Gradient node of the corrected loss per weight leaf; shared between
    /// the virtual update and the meta step's second differentiation.
    grad_nodes: Vec<(String, Option<NodeId>)>,
    /// Virtually updated weights, `w - virtual_lr * grad`.
    pub w_hat: ParamSet,
    pub loss_value: f64,
    virtual_lr: f64,
    base_checksum: u64,
    consumed: bool,
}

/// One recorded gradient step on the weighted corrected target losses.
///
/// The caller's parameters are not modified; the returned record holds the
/// virtual weights and the dependency of the step on every active T.
pub fn virtual_step(
    params: &ParamSet,
    target_batch: &[(&Array, &Labels)],
    ntms: &[NoiseTransitionMatrix; 2],
    alpha: [f64; 2],
    virtual_lr: f64,
    h: usize,
    w: usize,
    classes: usize,
) -> Result<VirtualRecord, TrainError> {
    if target_batch.is_empty() {
        return Err(TrainError::InvalidConfig("virtual step needs a non-empty batch".into()));
    }
    let mut g = Graph::new();
    let leaves = g.leaves_from(params)?;
    let mut t_nodes = [None, None];
    let mut t_names = Vec::new();
    for level in 0..2 {
        if alpha[level] != 0.0 {
            let name = ntm_leaf_name(level);
            t_nodes[level] = Some(g.leaf(&name, ntms[level].t.clone())?);
            t_names.push(name);
        }
    }

    let mut total: Option<NodeId> = None;
    for (pixels, pseudo) in target_batch {
        let heads = seg_forward_graph(&mut g, &leaves, pixels, h, w)?;
        for (level, probs) in [(0, heads.deep_probs), (1, heads.shallow_probs)] {
            if let Some(t) = t_nodes[level] {
                let ce = ntm::corrected_ce_graph(&mut g, probs, t, pseudo, classes)?;
                let weighted = g.scalar_mul(ce, alpha[level])?;
                total = Some(match total {
                    Some(acc) => g.add(acc, weighted)?,
                    None => weighted,
                });
            }
        }
    }
    let total = match total {
        Some(t) => t,
        // all level weights zero: a constant loss with zero gradient
        None => g.constant(Array::scalar(0.0))?,
    };
    let loss_root = g.scalar_mul(total, 1.0 / target_batch.len() as f64)?;
    let loss_value = g.value(loss_root).item();

    let names: Vec<String> = params.names().cloned().collect();
    let ids: Vec<NodeId> = names.iter().map(|n| g.leaf_id(n).expect("leaf exists")).collect();
    let emitted = g.gradient_nodes(loss_root, &ids)?;
    let mut grads = ParamSet::new();
    for ((name, id), gn) in names.iter().zip(ids.iter()).zip(emitted.iter()) {
        let arr = match gn {
            Some(node) => g.value(*node).clone(),
            None => Array::zeros(g.value(*id).shape()),
        };
        grads.insert(name, arr)?;
    }
    let mut w_hat = params.clone();
    w_hat.axpy(-virtual_lr, &grads);

    Ok(VirtualRecord {
        graph: g,
        t_names,
        grad_nodes: names.into_iter().zip(emitted).collect(),
        w_hat,
        loss_value,
        virtual_lr,
        base_checksum: params.checksum(),
        consumed: false,
    })
}

// ── meta step ────────────────────────────────────────────────────────

/// Builds the meta loss (mean deep-head CE on meta pixels) at the given
/// weights and returns the graph with its scalar root.
fn meta_loss_graph(
    w_hat: &ParamSet,
    meta_batch: &[MetaEntry],
    source_pixels: &[&Array],
    h: usize,
    w: usize,
    classes: usize,
) -> Result<(Graph, NodeId), TrainError> {
    if meta_batch.is_empty() {
        return Err(TrainError::InvalidConfig("meta batch is empty".into()));
    }
    let mut g = Graph::new();
    let leaves = g.leaves_from(w_hat)?;
    let mut images: Vec<usize> = meta_batch.iter().map(|e| e.image).collect();
    images.sort_unstable();
    images.dedup();

    let total_pixels = meta_batch.len();
    let mut total: Option<NodeId> = None;
    for img in images {
        let entries: Vec<&MetaEntry> = meta_batch.iter().filter(|e| e.image == img).collect();
        let heads = seg_forward_graph(&mut g, &leaves, source_pixels[img], h, w)?;
        let rows: Vec<usize> = entries.iter().map(|e| e.pixel).collect();
        let picked = g.gather_rows(heads.deep_probs, rows)?;
        let mut onehot = Array::zeros(&[entries.len(), classes]);
        for (i, e) in entries.iter().enumerate() {
            onehot.data_mut()[i * classes + e.label as usize] = 1.0;
        }
        let y = g.constant(onehot)?;
        let sel = g.mul(y, picked)?;
        let row = g.sum_last(sel)?;
        let clamped = g.clamp_min(row, ntm::LOG_FLOOR)?;
        let logs = g.log(clamped)?;
        let s = g.sum_all(logs)?;
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let root = g.scalar_mul(total.expect("non-empty meta batch"), -1.0 / total_pixels as f64)?;
    Ok((g, root))
}

/// Mean clean-label CE at the given weights (no gradients). Used by the
/// end-to-end finite-difference oracle.
pub fn meta_loss_value(
    w_hat: &ParamSet,
    meta_batch: &[MetaEntry],
    source_pixels: &[&Array],
    h: usize,
    w: usize,
    classes: usize,
) -> Result<f64, TrainError> {
    let (g, root) = meta_loss_graph(w_hat, meta_batch, source_pixels, h, w, classes)?;
    Ok(g.value(root).item())
}

/// Exact gradient of the meta loss at the virtual weights with respect to
/// every active T, via the mixed second derivative through the recorded
/// virtual step. Returns the gradient set (keyed by T leaf name) and the
/// meta loss value.
pub fn meta_gradient(
    params: &ParamSet,
    record: &mut VirtualRecord,
    meta_batch: &[MetaEntry],
    source_pixels: &[&Array],
    h: usize,
    w: usize,
    classes: usize,
) -> Result<(ParamSet, f64), TrainError> {
    if record.consumed {
        return Err(TrainError::StaleVirtualRecord("record already consumed by a meta step".into()));
    }
    if params.checksum() != record.base_checksum {
        return Err(TrainError::StaleVirtualRecord(
            "weights changed since the virtual step".into(),
        ));
    }
    record.consumed = true;

    let (mut mg, meta_root) = meta_loss_graph(&record.w_hat, meta_batch, source_pixels, h, w, classes)?;
    let meta_loss = mg.value(meta_root).item();
    let names: Vec<&str> = record.w_hat.names().map(|s| s.as_str()).collect();
    let v = mg.gradient(meta_root, &names)?;

    // d meta / d T = -virtual_lr * d/dT <grad_w corrected, v>, where the
    // gradient nodes emitted by the virtual step are differentiated a second
    // time with respect to the T leaves.
    let rg = &mut record.graph;
    let mut dot: Option<NodeId> = None;
    for (name, gn) in &record.grad_nodes {
        if let Some(g_node) = gn {
            let vc = rg.constant(v.get(name).expect("same parameter names").clone())?;
            let prod = rg.mul(*g_node, vc)?;
            let s = rg.sum_all(prod)?;
            dot = Some(match dot {
                Some(acc) => rg.add(acc, s)?,
                None => s,
            });
        }
    }
    let dot = match dot {
        Some(d) => d,
        None => rg.constant(Array::scalar(0.0))?,
    };
    let t_names: Vec<&str> = record.t_names.iter().map(|s| s.as_str()).collect();
    let mixed = rg.gradient(dot, &t_names)?;
    let mut grad = ParamSet::new();
    for (name, m) in mixed.iter() {
        let mut scaled = m.clone();
        for x in scaled.data_mut() {
            *x *= -record.virtual_lr;
        }
        grad.insert(name, scaled)?;
    }
    Ok((grad, meta_loss))
}

#[derive(Clone, Debug)]
pub struct MetaStepOutcome {
    pub ntms: [NoiseTransitionMatrix; 2],
    pub meta_loss: f64,
    pub projection: [ProjectionDiag; 2],
}

/// Descends the meta loss with respect to each active T and projects back
/// onto the row-stochastic set. Consumes the virtual record.
pub fn meta_step(
    params: &ParamSet,
    record: &mut VirtualRecord,
    meta_batch: &[MetaEntry],
    source_pixels: &[&Array],
    ntms: &[NoiseTransitionMatrix; 2],
    meta_lr: f64,
    h: usize,
    w: usize,
    classes: usize,
) -> Result<MetaStepOutcome, TrainError> {
    let (grad, meta_loss) = meta_gradient(params, record, meta_batch, source_pixels, h, w, classes)?;
    let mut out = ntms.clone();
    let mut projection = [ProjectionDiag::default(), ProjectionDiag::default()];
    for level in 0..2 {
        if let Some(gt) = grad.get(&ntm_leaf_name(level)) {
            let mut raw = out[level].t.clone();
            for (x, g) in raw.data_mut().iter_mut().zip(gt.data().iter()) {
                *x -= meta_lr * g;
            }
            let (projected, diag) = ntm::project_row_stochastic(&raw);
            out[level].t = projected;
            projection[level] = diag;
        }
    }
    Ok(MetaStepOutcome { ntms: out, meta_loss, projection })
}

// ── actual step ──────────────────────────────────────────────────────

/// Momentum SGD with weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    velocity: ParamSet,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl MomentumSgd {
    pub fn new(like: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        MomentumSgd { velocity: like.zeros_like(), momentum, weight_decay }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        for (name, value) in params.iter_mut() {
            let g = grads.get(name).expect("gradient for every parameter");
            let v = self.velocity.get(name).expect("velocity for every parameter");
            let mut new_v = v.clone();
            for ((nv, &gx), &px) in new_v.data_mut().iter_mut().zip(g.data()).zip(value.data().iter()) {
                *nv = self.momentum * *nv + gx + self.weight_decay * px;
            }
            for (px, &nv) in value.data_mut().iter_mut().zip(new_v.data()) {
                *px -= lr * nv;
            }
            self.velocity.set(name, new_v).expect("shapes fixed");
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub source: f64,
    pub target_corrected: f64,
}

/// One momentum SGD step on source CE plus the weighted corrected target
/// losses; T is treated as a constant. Returns the updated weights.
#[allow(clippy::too_many_arguments)]
pub fn actual_step(
    params: &ParamSet,
    opt: &mut MomentumSgd,
    source_batch: &[(&Array, &Labels)],
    target_batch: &[(&Array, &Labels, Option<&[bool]>)],
    t_values: [&Array; 2],
    alpha: [f64; 2],
    lr: f64,
    h: usize,
    w: usize,
    classes: usize,
) -> Result<(ParamSet, StepLosses), TrainError> {
    let n = h * w;
    let mut g = Graph::new();
    let leaves = g.leaves_from(params)?;

    let mut source_loss: Option<NodeId> = None;
    for (pixels, labels) in source_batch {
        let heads = seg_forward_graph(&mut g, &leaves, pixels, h, w)?;
        let ce = ntm::ce_graph(&mut g, heads.deep_probs, labels, classes)?;
        source_loss = Some(match source_loss {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    let source_loss = match source_loss {
        Some(s) => Some(g.scalar_mul(s, 1.0 / source_batch.len() as f64)?),
        None => None,
    };

    let mut target_loss: Option<NodeId> = None;
    if !target_batch.is_empty() {
        let t_nodes = [g.constant(t_values[0].clone())?, g.constant(t_values[1].clone())?];
        for (pixels, pseudo, mask) in target_batch {
            let heads = seg_forward_graph(&mut g, &leaves, pixels, h, w)?;
            let all_true = vec![true; n];
            let mask: &[bool] = mask.unwrap_or(&all_true);
            let kept = mask.iter().filter(|&&m| m).count();
            let targets = ntm::one_hot_masked(pseudo, classes, mask);
            let offsets = Array::from_vec(
                &[n, 1],
                mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect(),
            )
            .expect("mask length");
            let normalizer = kept.max(1) as f64;
            for (level, probs) in [(0, heads.deep_probs), (1, heads.shallow_probs)] {
                if alpha[level] != 0.0 {
                    let posterior = g.matmul(probs, t_nodes[level])?;
                    let ce = ntm::masked_ce_graph(&mut g, posterior, &targets, &offsets, normalizer)?;
                    let weighted = g.scalar_mul(ce, alpha[level])?;
                    target_loss = Some(match target_loss {
                        Some(acc) => g.add(acc, weighted)?,
                        None => weighted,
                    });
                }
            }
        }
        target_loss = match target_loss {
            Some(t) => Some(g.scalar_mul(t, 1.0 / target_batch.len() as f64)?),
            None => None,
        };
    }

    let root = match (source_loss, target_loss) {
        (Some(s), Some(t)) => g.add(s, t)?,
        (Some(s), None) => s,
        (None, Some(t)) => t,
        (None, None) => {
            return Err(TrainError::InvalidConfig("actual step needs a non-empty batch".into()))
        }
    };

    let losses = StepLosses {
        source: source_loss.map(|s| g.value(s).item()).unwrap_or(0.0),
        target_corrected: target_loss.map(|t| g.value(t).item()).unwrap_or(0.0),
    };

    let names: Vec<&str> = params.names().map(|s| s.as_str()).collect();
    let grads = g.gradient(root, &names)?;
    let mut updated = params.clone();
    opt.step(&mut updated, &grads, lr);
    Ok((updated, losses))
}

// ── training loop ────────────────────────────────────────────────────

/// Where the pseudo labels come from: the warm-started model itself, or an
/// externally injected label set (oracle experiments with known noise).
#[derive(Clone, Debug)]
pub enum PseudoSource {
    FromModel,
    Injected(Vec<Labels>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss_source: f64,
    pub loss_target_corrected: f64,
    pub meta_loss: f64,
    pub miou_target: f64,
    pub pseudo_noise_rate: f64,
    pub ntm_frob_t0_vs_identity: f64,
    pub ntm_frob_t1_vs_identity: f64,
    pub fallback_count: usize,
}

#[derive(Clone, Debug)]
pub struct NtmSnapshot {
    pub iteration: usize,
    pub t: [Array; 2],
}

pub struct TrainOutcome {
    pub net: SegNet,
    pub ntms: [NoiseTransitionMatrix; 2],
    pub history: Vec<HistoryRow>,
    pub ntm_snapshots: Vec<NtmSnapshot>,
    pub meta_set: Option<MetaSet>,
    pub pseudo: PseudoLabels,
}

/// Evaluates target mIoU and pseudo-label disagreement of the current model.
fn evaluate_target(
    net: &SegNet,
    data: &Dataset,
    pseudo: &PseudoLabels,
) -> Result<(f64, f64), TrainError> {
    let (h, w, classes) = (data.config.h, data.config.w, data.config.classes);
    let mut cm = metrics::ConfusionMatrix::zero(classes);
    let mut noise_total = 0.0;
    for (i, img) in data.target.iter().enumerate() {
        let (deep, _) = forward_seg(&net.params, &img.pixels, h, w)?;
        let pred = crate::models::argmax_labels(&deep, h, w);
        cm.merge(&metrics::confusion_vs_truth(&pred, &img.truth, classes)?);
        noise_total += metrics::pseudo_noise_rate_vs_truth(&pseudo.maps[i], &img.truth)?;
    }
    let miou = metrics::miou(&cm)?;
    Ok((miou, noise_total / data.target.len() as f64))
}

/// Clean-label pixel accuracy of the deep head on target data.
pub fn clean_target_accuracy(net: &SegNet, data: &Dataset) -> Result<f64, TrainError> {
    let (h, w, classes) = (data.config.h, data.config.w, data.config.classes);
    let mut cm = metrics::ConfusionMatrix::zero(classes);
    for img in &data.target {
        let (deep, _) = forward_seg(&net.params, &img.pixels, h, w)?;
        let pred = crate::models::argmax_labels(&deep, h, w);
        cm.merge(&metrics::confusion_vs_truth(&pred, &img.truth, classes)?);
    }
    Ok(cm.accuracy())
}

/// Runs the selected method. `domain` is only consulted by the correction
/// methods; `seed` drives every batch draw.
pub fn train(
    method: Method,
    cfg: &OptimizerConfig,
    data: &Dataset,
    w0: &SegNet,
    domain: Option<&DomainPredictor>,
    pseudo_source: &PseudoSource,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.source.is_empty() {
        return Err(TrainError::EmptySource);
    }
    let (h, w, classes) = (data.config.h, data.config.w, data.config.classes);
    let target_pixels: Vec<&Array> = data.target.iter().map(|t| &t.pixels).collect();
    let source_pixels: Vec<&Array> = data.source.iter().map(|s| &s.pixels).collect();

    let mut pseudo = match pseudo_source {
        PseudoSource::FromModel => generate_pseudo_labels(w0, &target_pixels, h, w, 0)?,
        PseudoSource::Injected(labels) => injected_pseudo_labels(w0, &target_pixels, labels, h, w)?,
    };

    // Meta machinery is active only for correction methods with a positive
    // meta rate; with meta_lr = 0 the loop is the plain self-training loop.
    let meta_active = method.uses_correction() && cfg.meta_lr > 0.0;
    let meta_set = if meta_active {
        let predictor = domain.ok_or_else(|| TrainError::MissingDomainPredictor(method.name().into()))?;
        Some(select_meta_set(predictor, &data.source, cfg.tau, cfg.meta_batch_pixels, h, w)?)
    } else {
        None
    };

    let alpha = match method {
        Method::SourceOnly => [0.0, 0.0],
        Method::SelfTraining | Method::ThresholdSelfTraining => [cfg.alpha0, 0.0],
        Method::SingleDmlc => [cfg.alpha0, 0.0],
        Method::MetaCorrection => cfg.alpha(),
    };

    let mut ntms = [
        NoiseTransitionMatrix::identity_init(classes, 0),
        NoiseTransitionMatrix::identity_init(classes, 1),
    ];
    let mut net = w0.clone();
    let mut opt = MomentumSgd::new(&net.params, cfg.momentum, cfg.weight_decay);

    let mut src_rng = rng::stream(seed, Purpose::SourceBatches, 0);
    let mut tgt_rng = rng::stream(seed, Purpose::TargetBatches, 0);
    let mut meta_rng = rng::stream(seed, Purpose::MetaBatches, 0);

    let mut history = Vec::new();
    let mut snapshots = Vec::new();
    let mut last_meta_loss = 0.0;

    for iter in 0..cfg.steps {
        if cfg.pseudo_refresh_every > 0
            && iter > 0
            && iter % cfg.pseudo_refresh_every == 0
            && matches!(pseudo_source, PseudoSource::FromModel)
        {
            pseudo = generate_pseudo_labels(&net, &target_pixels, h, w, iter)?;
        }

        let source_idx = rng::sample_distinct(&mut src_rng, data.source.len(), cfg.batch_images);
        let source_batch: Vec<(&Array, &Labels)> = source_idx
            .iter()
            .map(|&i| (&data.source[i].pixels, &data.source[i].labels))
            .collect();

        let target_idx = if matches!(method, Method::SourceOnly) {
            Vec::new()
        } else {
            rng::sample_distinct(&mut tgt_rng, data.target.len(), cfg.batch_images)
        };

        if meta_active && iter >= cfg.meta_warmup_steps {
            let virtual_batch: Vec<(&Array, &Labels)> = target_idx
                .iter()
                .map(|&i| (&data.target[i].pixels, &pseudo.maps[i]))
                .collect();
            let mut record =
                virtual_step(&net.params, &virtual_batch, &ntms, alpha, cfg.virtual_lr, h, w, classes)?;
            let meta_set = meta_set.as_ref().expect("meta set exists when meta is active");
            let batch = sample_meta_batch(meta_set, cfg.batch_images, cfg.meta_batch_pixels, &mut meta_rng);
            let outcome = meta_step(
                &net.params,
                &mut record,
                &batch,
                &source_pixels,
                &ntms,
                cfg.meta_lr,
                h,
                w,
                classes,
            )?;
            ntms = outcome.ntms;
            last_meta_loss = outcome.meta_loss;
        }

        // Threshold baseline: mask pixels whose pseudo-class confidence under
        // the generating model is below the cut.
        let masks: Vec<Option<Vec<bool>>> = target_idx
            .iter()
            .map(|&i| {
                if matches!(method, Method::ThresholdSelfTraining) {
                    Some(
                        pseudo.confidence[i]
                            .iter()
                            .map(|&c| c >= cfg.confidence_cut)
                            .collect(),
                    )
                } else {
                    None
                }
            })
            .collect();
        let target_batch: Vec<(&Array, &Labels, Option<&[bool]>)> = target_idx
            .iter()
            .zip(masks.iter())
            .map(|(&i, m)| {
                (
                    &data.target[i].pixels,
                    &pseudo.maps[i],
                    m.as_deref(),
                )
            })
            .collect();

        let (updated, losses) = actual_step(
            &net.params,
            &mut opt,
            &source_batch,
            &target_batch,
            [&ntms[0].t, &ntms[1].t],
            alpha,
            cfg.actual_lr,
            h,
            w,
            classes,
        )?;
        net.params = updated;
        let last_losses = losses;

        if (iter + 1) % cfg.eval_every == 0 {
            let (miou, noise_rate) = evaluate_target(&net, data, &pseudo)?;
            history.push(HistoryRow {
                iteration: iter + 1,
                loss_source: last_losses.source,
                loss_target_corrected: last_losses.target_corrected,
                meta_loss: last_meta_loss,
                miou_target: miou,
                pseudo_noise_rate: noise_rate,
                ntm_frob_t0_vs_identity: ntms[0].frobenius_vs_identity(),
                ntm_frob_t1_vs_identity: ntms[1].frobenius_vs_identity(),
                fallback_count: meta_set.as_ref().map(|m| m.fallback_count()).unwrap_or(0),
            });
            snapshots.push(NtmSnapshot { iteration: iter + 1, t: [ntms[0].t.clone(), ntms[1].t.clone()] });
        }
    }

    Ok(TrainOutcome { net, ntms, history, ntm_snapshots: snapshots, meta_set, pseudo })
}

/// The full method with multi-level correction.
pub fn train_metacorrection(
    cfg: &OptimizerConfig,
    data: &Dataset,
    w0: &SegNet,
    domain: &DomainPredictor,
    pseudo_source: &PseudoSource,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    train(Method::MetaCorrection, cfg, data, w0, Some(domain), pseudo_source, seed)
}

/// Baseline trainers share the loop; `kind` picks the objective.
pub fn train_baseline(
    kind: Method,
    cfg: &OptimizerConfig,
    data: &Dataset,
    w0: &SegNet,
    domain: Option<&DomainPredictor>,
    pseudo_source: &PseudoSource,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    train(kind, cfg, data, w0, domain, pseudo_source, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DatasetConfig;
    use approx::assert_relative_eq;

    fn small_data() -> Dataset {
        let cfg = DatasetConfig { images_per_domain: 6, h: 8, w: 8, ..DatasetConfig::default() };
        Dataset::generate(&cfg).unwrap()
    }

    #[test]
    fn pseudo_labels_tie_break_to_lowest_class() {
        // zero weights -> uniform probabilities -> class 0 everywhere
        let data = small_data();
        let mut net = SegNet::with_defaults(4, 0);
        net.params = net.params.zeros_like();
        let pixels: Vec<&Array> = data.target.iter().map(|t| &t.pixels).collect();
        let pseudo = generate_pseudo_labels(&net, &pixels, 8, 8, 0).unwrap();
        for map in &pseudo.maps {
            assert!(map.ids.iter().all(|&x| x == 0));
        }
    }

    #[test]
    fn warm_model_pseudo_noise_rate_is_interior() {
        // on shifted data the warm-started model's pseudo labels are neither
        // perfect nor useless
        let cfg = crate::synth::DatasetConfig { images_per_domain: 8, ..Default::default() };
        let data = Dataset::generate(&cfg).unwrap();
        let net = SegNet::with_defaults(4, 0);
        let warm = crate::models::pretrain_source(&net, &data.source, 200, 0.3, 4, 0).unwrap();
        let pixels: Vec<&Array> = data.target.iter().map(|t| &t.pixels).collect();
        let pseudo = generate_pseudo_labels(&warm, &pixels, 16, 16, 0).unwrap();
        let mut rate = 0.0;
        for (map, img) in pseudo.maps.iter().zip(data.target.iter()) {
            rate += crate::metrics::pseudo_noise_rate_vs_truth(map, &img.truth).unwrap();
        }
        rate /= data.target.len() as f64;
        assert!(rate > 0.0 && rate < 1.0, "noise rate {rate}");
    }

    #[test]
    fn argmax_picks_the_peak() {
        let probs = Array::from_vec(&[1, 3], vec![0.1, 0.7, 0.2]).unwrap();
        let labels = crate::models::argmax_labels(&probs, 1, 1);
        assert_eq!(labels.ids, vec![1]);
    }

    #[test]
    fn meta_set_threshold_zero_takes_every_pixel() {
        let data = small_data();
        let dom = DomainPredictor::init(1);
        let set = select_meta_set(&dom, &data.source, 0.0, 16, 8, 8).unwrap();
        assert_eq!(set.entries.len(), data.source.len() * 64);
        assert!(!set.fallback_used);
        // purity: labels are genuine source ground truth
        for e in &set.entries {
            assert_eq!(e.label, data.source[e.image].labels.ids[e.pixel]);
        }
    }

    #[test]
    fn meta_set_threshold_one_falls_back_to_top_five_percent() {
        let data = small_data();
        let dom = DomainPredictor::init(1);
        let set = select_meta_set(&dom, &data.source, 1.0, 16, 8, 8).unwrap();
        assert!(set.fallback_used);
        let expect = ((data.source.len() * 64) as f64 * 0.05).ceil() as usize;
        assert_eq!(set.entries.len(), expect);
        assert!(set.entries.iter().all(|e| e.fallback));
    }

    #[test]
    fn empty_source_is_error() {
        let data = small_data();
        let dom = DomainPredictor::init(1);
        assert!(matches!(
            select_meta_set(&dom, &data.source[..0], 0.5, 16, 8, 8),
            Err(TrainError::EmptySource)
        ));
    }

    #[test]
    fn virtual_step_zero_rate_is_identity_and_never_mutates() {
        let data = small_data();
        let net = SegNet::with_defaults(4, 2);
        let checksum = net.params.checksum();
        let ntms = [
            NoiseTransitionMatrix::identity_init(4, 0),
            NoiseTransitionMatrix::identity_init(4, 1),
        ];
        let pseudo = Labels::new(8, 8, vec![1; 64]);
        let batch = [(&data.target[0].pixels, &pseudo)];
        let record = virtual_step(&net.params, &batch, &ntms, [1.0, 0.1], 0.0, 8, 8, 4).unwrap();
        assert_eq!(record.w_hat, net.params);
        assert_eq!(net.params.checksum(), checksum);
    }

    #[test]
    fn virtual_step_matches_hand_computed_update_on_zero_net() {
        // zero weights -> uniform deep probs; with identity T and pseudo
        // labels all class 0, d(mean CE)/d(head bias) = p - y = (0.25-1, .25, .25, .25)
        let data = small_data();
        let mut net = SegNet::with_defaults(4, 0);
        net.params = net.params.zeros_like();
        let ntms = [
            NoiseTransitionMatrix::identity_init(4, 0),
            NoiseTransitionMatrix::identity_init(4, 1),
        ];
        let pseudo = Labels::new(8, 8, vec![0; 64]);
        let batch = [(&data.target[0].pixels, &pseudo)];
        let lr = 0.5;
        let record = virtual_step(&net.params, &batch, &ntms, [1.0, 0.0], lr, 8, 8, 4).unwrap();
        let b = record.w_hat.get("seg.head_deep.b").unwrap();
        assert_relative_eq!(b.data()[0], -lr * (0.25 - 1.0), max_relative = 1e-9);
        for k in 1..4 {
            assert_relative_eq!(b.data()[k], -lr * 0.25, max_relative = 1e-9);
        }
    }

    #[test]
    fn meta_step_with_zero_virtual_rate_leaves_t_unchanged() {
        let data = small_data();
        let net = SegNet::with_defaults(4, 2);
        let ntms = [
            NoiseTransitionMatrix::identity_init(4, 0),
            NoiseTransitionMatrix::identity_init(4, 1),
        ];
        let pseudo = Labels::new(8, 8, vec![1; 64]);
        let batch = [(&data.target[0].pixels, &pseudo)];
        let mut record = virtual_step(&net.params, &batch, &ntms, [1.0, 0.1], 0.0, 8, 8, 4).unwrap();
        let entries: Vec<MetaEntry> = (0..16)
            .map(|p| MetaEntry {
                image: 0,
                pixel: p * 4,
                label: data.source[0].labels.ids[p * 4],
                score: 0.9,
                fallback: false,
            })
            .collect();
        let src: Vec<&Array> = data.source.iter().map(|s| &s.pixels).collect();
        let out = meta_step(&net.params, &mut record, &entries, &src, &ntms, 0.11, 8, 8, 4).unwrap();
        assert_eq!(out.ntms[0].t, ntms[0].t);
        assert_eq!(out.ntms[1].t, ntms[1].t);
        // rows stay stochastic
        for level in 0..2 {
            for j in 0..4 {
                let sum: f64 = (0..4).map(|k| out.ntms[level].t.at(j, k)).sum();
                assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn meta_step_rejects_stale_records() {
        let data = small_data();
        let net = SegNet::with_defaults(4, 2);
        let ntms = [
            NoiseTransitionMatrix::identity_init(4, 0),
            NoiseTransitionMatrix::identity_init(4, 1),
        ];
        let pseudo = Labels::new(8, 8, vec![1; 64]);
        let batch = [(&data.target[0].pixels, &pseudo)];
        let mut record = virtual_step(&net.params, &batch, &ntms, [1.0, 0.1], 1e-4, 8, 8, 4).unwrap();
        let entries = vec![MetaEntry { image: 0, pixel: 3, label: data.source[0].labels.ids[3], score: 0.9, fallback: false }];
        let src: Vec<&Array> = data.source.iter().map(|s| &s.pixels).collect();
        meta_step(&net.params, &mut record, &entries, &src, &ntms, 0.11, 8, 8, 4).unwrap();
        // second use of the same record
        let err = meta_step(&net.params, &mut record, &entries, &src, &ntms, 0.11, 8, 8, 4);
        assert!(matches!(err, Err(TrainError::StaleVirtualRecord(_))));

        // changed weights invalidate the record
        let mut record = virtual_step(&net.params, &batch, &ntms, [1.0, 0.1], 1e-4, 8, 8, 4).unwrap();
        let mut other = net.clone();
        let delta = other.params.zeros_like();
        other.params.axpy(1.0, &delta); // no-op keeps checksum; actually change one value
        let mut arr = other.params.get("seg.head_deep.b").unwrap().clone();
        arr.data_mut()[0] += 0.1;
        other.params.set("seg.head_deep.b", arr).unwrap();
        let err = meta_step(&other.params, &mut record, &entries, &src, &ntms, 0.11, 8, 8, 4);
        assert!(matches!(err, Err(TrainError::StaleVirtualRecord(_))));
    }

    #[test]
    fn actual_step_descends_without_momentum() {
        // with momentum 0 and a small rate, one step does not increase the
        // loss on the same batch in >= 95% of random trials
        let mut ok = 0;
        let trials = 100;
        for t in 0..trials {
            let cfg = DatasetConfig {
                images_per_domain: 2,
                h: 8,
                w: 8,
                seed: 1000 + t as u64,
                ..DatasetConfig::default()
            };
            let data = Dataset::generate(&cfg).unwrap();
            let net = SegNet::with_defaults(4, 33 + t as u64);
            let mut opt = MomentumSgd::new(&net.params, 0.0, 0.0);
            let pseudo = Labels::new(8, 8, data.source[1].labels.ids.clone());
            let source_batch = [(&data.source[0].pixels, &data.source[0].labels)];
            let target_batch = [(&data.target[0].pixels, &pseudo, None)];
            let eye = Array::eye(4);
            let loss_at = |p: &ParamSet| -> f64 {
                let mut probe = MomentumSgd::new(p, 0.0, 0.0);
                // zero learning rate: returns the loss without moving
                let (_, l) = actual_step(p, &mut probe, &source_batch, &target_batch, [&eye, &eye], [1.0, 0.0], 0.0, 8, 8, 4).unwrap();
                l.source + l.target_corrected
            };
            let before = loss_at(&net.params);
            let (after_params, _) = actual_step(
                &net.params,
                &mut opt,
                &source_batch,
                &target_batch,
                [&eye, &eye],
                [1.0, 0.0],
                1e-3,
                8,
                8,
                4,
            )
            .unwrap();
            let after = loss_at(&after_params);
            if after <= before {
                ok += 1;
            }
        }
        assert!(ok >= 95, "descent in only {ok}/{trials} trials");
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let data = small_data();
        let net = SegNet::with_defaults(4, 5);
        let cfg = OptimizerConfig { steps: 0, ..OptimizerConfig::default() };
        let out = train(Method::SelfTraining, &cfg, &data, &net, None, &PseudoSource::FromModel, 7).unwrap();
        assert_eq!(out.net.params, net.params);
        assert!(out.history.is_empty());
        assert_eq!(out.ntms[0].t, Array::eye(4));
    }

    #[test]
    fn history_length_matches_eval_epochs() {
        let data = small_data();
        let net = SegNet::with_defaults(4, 5);
        let cfg = OptimizerConfig { steps: 23, eval_every: 5, ..OptimizerConfig::default() };
        let out = train(Method::SelfTraining, &cfg, &data, &net, None, &PseudoSource::FromModel, 7).unwrap();
        assert_eq!(out.history.len(), 4);
        assert_eq!(out.history.last().unwrap().iteration, 20);
    }

    #[test]
    fn source_only_ignores_target_data() {
        let data = small_data();
        let net = SegNet::with_defaults(4, 5);
        let cfg = OptimizerConfig { steps: 12, eval_every: 6, ..OptimizerConfig::default() };
        let a = train(Method::SourceOnly, &cfg, &data, &net, None, &PseudoSource::FromModel, 7).unwrap();

        // a dataset with different target images but identical source
        let mut other = data.clone();
        let donor = Dataset::generate(&DatasetConfig {
            images_per_domain: 6,
            h: 8,
            w: 8,
            seed: 4242,
            ..DatasetConfig::default()
        })
        .unwrap();
        other.target = donor.target;
        let b = train(Method::SourceOnly, &cfg, &other, &net, None, &PseudoSource::FromModel, 7).unwrap();
        assert_eq!(a.net.params, b.net.params);
        // target losses are identically zero
        assert!(a.history.iter().all(|r| r.loss_target_corrected == 0.0));
    }

    #[test]
    fn threshold_zero_equals_plain_self_training() {
        let data = small_data();
        let net = SegNet::with_defaults(4, 5);
        let cfg = OptimizerConfig {
            steps: 10,
            eval_every: 5,
            confidence_cut: 0.0,
            ..OptimizerConfig::default()
        };
        let a = train(Method::SelfTraining, &cfg, &data, &net, None, &PseudoSource::FromModel, 7).unwrap();
        let b = train(Method::ThresholdSelfTraining, &cfg, &data, &net, None, &PseudoSource::FromModel, 7).unwrap();
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn unknown_method_lists_valid_names() {
        let err = Method::parse("adversarial").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("metacorrection") && msg.contains("source_only"));
    }
}
