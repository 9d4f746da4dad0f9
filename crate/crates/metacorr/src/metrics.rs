//! Segmentation and noise-estimation metrics.
//!
//! This is the only module permitted to read quarantined target ground truth:
//! [`Quarantined`] has no public accessor, so training code can carry target
//! labels around but cannot act on them.

use thiserror::Error;

use crate::autodiff::Array;
use crate::synth::{inject_label_noise, DataError, Labels, NoiseSpec};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid class id {0} for {1} classes")]
    BadClass(u8, usize),
    #[error("every class is absent from both prediction and truth")]
    AllClassesAbsent,
}

/// Sealed value readable only inside this module.
#[derive(Clone, Debug)]
pub struct Quarantined<T>(T);

impl<T> Quarantined<T> {
    pub fn seal(value: T) -> Self {
        Quarantined(value)
    }
}

impl Quarantined<Labels> {
    /// Serializes the sealed labels without exposing them to the caller.
    pub fn write_ids_to(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        out.write_all(&self.0.ids)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.h, self.0.w)
    }
}

/// counts[j][k] = number of pixels with true class j predicted as k.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zero(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    /// Rows divided by their sums; all-zero rows become identity rows.
    pub fn row_normalized(&self) -> Array {
        let c = self.classes;
        let mut out = Array::zeros(&[c, c]);
        for j in 0..c {
            let sum: u64 = (0..c).map(|k| self.count(j, k)).sum();
            if sum == 0 {
                out.set(j, j, 1.0);
            } else {
                for k in 0..c {
                    out.set(j, k, self.count(j, k) as f64 / sum as f64);
                }
            }
        }
        out
    }

    /// Overall pixel accuracy (diagonal mass).
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|j| self.count(j, j)).sum();
        diag as f64 / total as f64
    }
}

fn check_label_pair(pred: &Labels, truth: &Labels, classes: usize) -> Result<(), MetricError> {
    if pred.h != truth.h || pred.w != truth.w {
        return Err(MetricError::ShapeMismatch(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.h, pred.w, truth.h, truth.w
        )));
    }
    for &id in pred.ids.iter().chain(truth.ids.iter()) {
        if id as usize >= classes {
            return Err(MetricError::BadClass(id, classes));
        }
    }
    Ok(())
}

/// Builds a confusion matrix over however many classes appear (max id + 1),
/// or use [`confusion_with_classes`] to fix the class count.
pub fn confusion(pred: &Labels, truth: &Labels) -> Result<ConfusionMatrix, MetricError> {
    let classes = pred
        .ids
        .iter()
        .chain(truth.ids.iter())
        .map(|&x| x as usize + 1)
        .max()
        .unwrap_or(1);
    confusion_with_classes(pred, truth, classes)
}

pub fn confusion_with_classes(
    pred: &Labels,
    truth: &Labels,
    classes: usize,
) -> Result<ConfusionMatrix, MetricError> {
    check_label_pair(pred, truth, classes)?;
    let mut cm = ConfusionMatrix::zero(classes);
    for (&p, &t) in pred.ids.iter().zip(truth.ids.iter()) {
        cm.add(t as usize, p as usize);
    }
    Ok(cm)
}

/// Per-class intersection over union; `None` for classes absent from both
/// prediction and truth.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let c = cm.classes();
    (0..c)
        .map(|k| {
            let tp = cm.count(k, k);
            let fp: u64 = (0..c).filter(|&j| j != k).map(|j| cm.count(j, k)).sum();
            let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| cm.count(k, j)).sum();
            if tp + fp + fn_ == 0 {
                None
            } else {
                Some(tp as f64 / (tp + fp + fn_) as f64)
            }
        })
        .collect()
}

/// Mean IoU over the classes present in prediction or truth.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64, MetricError> {
    let ious: Vec<f64> = iou_per_class(cm).into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(MetricError::AllClassesAbsent);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Dice overlap of one class; 1 when the class is absent everywhere.
pub fn dice(cm: &ConfusionMatrix, class: usize) -> f64 {
    let c = cm.classes();
    let tp = cm.count(class, class);
    let fp: u64 = (0..c).filter(|&j| j != class).map(|j| cm.count(j, class)).sum();
    let fn_: u64 = (0..c).filter(|&j| j != class).map(|j| cm.count(class, j)).sum();
    if 2 * tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Frobenius norm of the difference of two same-size matrices.
pub fn ntm_frobenius_error(estimate: &Array, reference: &Array) -> Result<f64, MetricError> {
    if estimate.shape() != reference.shape() {
        return Err(MetricError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            estimate.shape(),
            reference.shape()
        )));
    }
    Ok(estimate.frobenius_distance(reference))
}

/// Fraction of pixels where the two label maps disagree.
pub fn pseudo_noise_rate(pseudo: &Labels, truth: &Labels) -> Result<f64, MetricError> {
    if pseudo.h != truth.h || pseudo.w != truth.w {
        return Err(MetricError::ShapeMismatch(format!(
            "pseudo {}x{} vs truth {}x{}",
            pseudo.h, pseudo.w, truth.h, truth.w
        )));
    }
    let disagreements = pseudo
        .ids
        .iter()
        .zip(truth.ids.iter())
        .filter(|(a, b)| a != b)
        .count();
    Ok(disagreements as f64 / pseudo.len() as f64)
}

// ── quarantine-sanctioned evaluation ─────────────────────────────────

pub fn confusion_vs_truth(
    pred: &Labels,
    truth: &Quarantined<Labels>,
    classes: usize,
) -> Result<ConfusionMatrix, MetricError> {
    confusion_with_classes(pred, &truth.0, classes)
}

pub fn pseudo_noise_rate_vs_truth(
    pseudo: &Labels,
    truth: &Quarantined<Labels>,
) -> Result<f64, MetricError> {
    pseudo_noise_rate(pseudo, &truth.0)
}

/// Oracle pseudo labels: the sealed clean labels pushed through a known noise
/// process. The returned (noisy) labels are not quarantined by design; they
/// play the role of pseudo labels in oracle experiments.
pub fn oracle_noisy_labels(
    truth: &Quarantined<Labels>,
    spec: &NoiseSpec,
) -> Result<Labels, DataError> {
    inject_label_noise(&truth.0, spec)
}

/// Per-pixel disagreement between a label map and the sealed truth.
pub fn disagreement_mask(
    labels: &Labels,
    truth: &Quarantined<Labels>,
) -> Result<Vec<bool>, MetricError> {
    if labels.h != truth.0.h || labels.w != truth.0.w {
        return Err(MetricError::ShapeMismatch(format!(
            "labels {}x{} vs truth {}x{}",
            labels.h, labels.w, truth.0.h, truth.0.w
        )));
    }
    Ok(labels
        .ids
        .iter()
        .zip(truth.0.ids.iter())
        .map(|(a, b)| a != b)
        .collect())
}
