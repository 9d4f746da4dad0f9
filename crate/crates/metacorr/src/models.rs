//! Tiny differentiable per-pixel networks.
//!
//! The segmentation net is two 3x3-window linear layers with leaky rectifiers
//! and two softmax heads: the deep head reads the second layer (level 0), the
//! shallow auxiliary head reads the first (level 1). The domain predictor is
//! a single 3x3-window layer with a sigmoid output per pixel. Windows are
//! realized by unfolding 3x3 neighborhoods and matrix-multiplying, so the
//! whole forward pass stays on the graph's primitive set.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Array, Graph, GraphError, NodeId, ParamSet};
use crate::io;
use crate::rng::{self, Purpose};
use crate::synth::{DataError, LabeledImage, Labels};

pub const LRELU_SLOPE: f64 = 0.01;

/// Hard cap on the segmentation parameter count; keeps the second-order meta
/// step cheap.
pub const MAX_SEG_PARAMS: usize = 3000;

/// Two-stage per-pixel feature network with deep and shallow heads.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub params: ParamSet,
    pub classes: usize,
    pub f1: usize,
    pub f2: usize,
}

fn normal_array(shape: &[usize], std: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Array {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Array::from_vec(shape, data).expect("length matches shape")
}

impl SegNet {
    pub fn init(classes: usize, f1: usize, f2: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::ModelInit, 0);
        let mut params = ParamSet::new();
        let fan1 = 9 * 3;
        let fan2 = 9 * f1;
        params.insert("seg.layer1.w", normal_array(&[fan1, f1], 1.0 / (fan1 as f64).sqrt(), &mut rng)).unwrap();
        params.insert("seg.layer1.b", Array::zeros(&[1, f1])).unwrap();
        params.insert("seg.layer2.w", normal_array(&[fan2, f2], 1.0 / (fan2 as f64).sqrt(), &mut rng)).unwrap();
        params.insert("seg.layer2.b", Array::zeros(&[1, f2])).unwrap();
        params.insert("seg.head_deep.w", normal_array(&[f2, classes], 1.0 / (f2 as f64).sqrt(), &mut rng)).unwrap();
        params.insert("seg.head_deep.b", Array::zeros(&[1, classes])).unwrap();
        params.insert("seg.head_shallow.w", normal_array(&[f1, classes], 1.0 / (f1 as f64).sqrt(), &mut rng)).unwrap();
        params.insert("seg.head_shallow.b", Array::zeros(&[1, classes])).unwrap();
        let net = SegNet { params, classes, f1, f2 };
        assert!(
            net.params.total_len() <= MAX_SEG_PARAMS,
            "segmentation net has {} parameters, cap is {}",
            net.params.total_len(),
            MAX_SEG_PARAMS
        );
        net
    }

    pub fn with_defaults(classes: usize, seed: u64) -> Self {
        SegNet::init(classes, 8, 8, seed)
    }

    pub fn param_names() -> [&'static str; 8] {
        [
            "seg.head_deep.b",
            "seg.head_deep.w",
            "seg.head_shallow.b",
            "seg.head_shallow.w",
            "seg.layer1.b",
            "seg.layer1.w",
            "seg.layer2.b",
            "seg.layer2.w",
        ]
    }
}

/// Graph handles for both heads of one forwarded image.
#[derive(Clone, Copy, Debug)]
pub struct SegHeads {
    pub deep_probs: NodeId,
    pub shallow_probs: NodeId,
}

/// Builds the segmentation forward pass for one image on an existing graph.
///
/// `leaves` must contain nodes for every `seg.*` parameter (typically from
/// [`Graph::leaves_from`]); sharing leaves across images batches them.
pub fn seg_forward_graph(
    g: &mut Graph,
    leaves: &BTreeMap<String, NodeId>,
    pixels: &Array,
    h: usize,
    w: usize,
) -> Result<SegHeads, GraphError> {
    if pixels.shape() != [h * w, 3] {
        return Err(GraphError::BadShape(format!(
            "expected ({}, 3) pixels, got {:?}",
            h * w,
            pixels.shape()
        )));
    }
    let n = h * w;
    let leaf = |name: &str| -> Result<NodeId, GraphError> {
        leaves.get(name).copied().ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))
    };
    let x = g.constant(pixels.clone())?;
    let u1 = g.unfold3x3(x, h, w)?;
    let z1 = {
        let wm = g.matmul(u1, leaf("seg.layer1.w")?)?;
        let b = g.broadcast_rows(leaf("seg.layer1.b")?, n)?;
        g.add(wm, b)?
    };
    let a1 = g.leaky_relu(z1, LRELU_SLOPE)?;
    let u2 = g.unfold3x3(a1, h, w)?;
    let z2 = {
        let wm = g.matmul(u2, leaf("seg.layer2.w")?)?;
        let b = g.broadcast_rows(leaf("seg.layer2.b")?, n)?;
        g.add(wm, b)?
    };
    let a2 = g.leaky_relu(z2, LRELU_SLOPE)?;
    let deep_logits = {
        let wm = g.matmul(a2, leaf("seg.head_deep.w")?)?;
        let b = g.broadcast_rows(leaf("seg.head_deep.b")?, n)?;
        g.add(wm, b)?
    };
    let shallow_logits = {
        let wm = g.matmul(a1, leaf("seg.head_shallow.w")?)?;
        let b = g.broadcast_rows(leaf("seg.head_shallow.b")?, n)?;
        g.add(wm, b)?
    };
    Ok(SegHeads {
        deep_probs: g.softmax_rows(deep_logits)?,
        shallow_probs: g.softmax_rows(shallow_logits)?,
    })
}

/// Per-pixel class probabilities of both heads, (h*w, C) each.
pub fn forward_seg(params: &ParamSet, pixels: &Array, h: usize, w: usize) -> Result<(Array, Array), GraphError> {
    let mut g = Graph::new();
    let leaves = g.leaves_from(params)?;
    let heads = seg_forward_graph(&mut g, &leaves, pixels, h, w)?;
    Ok((g.value(heads.deep_probs).clone(), g.value(heads.shallow_probs).clone()))
}

/// Deep-head argmax labels; ties break toward the lowest class index.
pub fn argmax_labels(probs: &Array, h: usize, w: usize) -> Labels {
    let c = probs.cols();
    let ids = (0..probs.rows())
        .map(|p| {
            let row = &probs.data()[p * c..(p + 1) * c];
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Labels::new(h, w, ids)
}

/// Per-pixel domain predictor; output in (0,1).
#[derive(Clone, Debug)]
pub struct DomainPredictor {
    pub params: ParamSet,
    pub hidden: usize,
}

impl DomainPredictor {
    pub fn init(seed: u64) -> Self {
        let hidden = 8;
        let mut rng = rng::stream(seed, Purpose::DomainInit, 0);
        let mut params = ParamSet::new();
        let fan = 9 * 3;
        params.insert("dom.layer1.w", normal_array(&[fan, hidden], 1.0 / (fan as f64).sqrt(), &mut rng)).unwrap();
        params.insert("dom.layer1.b", Array::zeros(&[1, hidden])).unwrap();
        params.insert("dom.head.w", normal_array(&[hidden, 1], 1.0 / (hidden as f64).sqrt(), &mut rng)).unwrap();
        params.insert("dom.head.b", Array::zeros(&[1, 1])).unwrap();
        DomainPredictor { params, hidden }
    }
}

pub fn domain_forward_graph(
    g: &mut Graph,
    leaves: &BTreeMap<String, NodeId>,
    pixels: &Array,
    h: usize,
    w: usize,
) -> Result<NodeId, GraphError> {
    if pixels.shape() != [h * w, 3] {
        return Err(GraphError::BadShape(format!(
            "expected ({}, 3) pixels, got {:?}",
            h * w,
            pixels.shape()
        )));
    }
    let n = h * w;
    let leaf = |name: &str| -> Result<NodeId, GraphError> {
        leaves.get(name).copied().ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))
    };
    let x = g.constant(pixels.clone())?;
    let u1 = g.unfold3x3(x, h, w)?;
    let z1 = {
        let wm = g.matmul(u1, leaf("dom.layer1.w")?)?;
        let b = g.broadcast_rows(leaf("dom.layer1.b")?, n)?;
        g.add(wm, b)?
    };
    let a1 = g.leaky_relu(z1, LRELU_SLOPE)?;
    let logits = {
        let wm = g.matmul(a1, leaf("dom.head.w")?)?;
        let b = g.broadcast_rows(leaf("dom.head.b")?, n)?;
        g.add(wm, b)?
    };
    g.sigmoid(logits)
}

/// Per-pixel target-likeness scores, (h*w, 1) in (0,1).
pub fn forward_domain(params: &ParamSet, pixels: &Array, h: usize, w: usize) -> Result<Array, GraphError> {
    let mut g = Graph::new();
    let leaves = g.leaves_from(params)?;
    let out = domain_forward_graph(&mut g, &leaves, pixels, h, w)?;
    Ok(g.value(out).clone())
}

// ── pretraining ──────────────────────────────────────────────────────

fn sgd_step(params: &mut ParamSet, grads: &ParamSet, lr: f64) {
    params.axpy(-lr, grads);
}

/// Warm-starts the segmentation net on labeled source data by plain SGD on
/// the deep-head cross-entropy.
pub fn pretrain_source(
    net: &SegNet,
    source: &[LabeledImage],
    steps: usize,
    lr: f64,
    batch_images: usize,
    seed: u64,
) -> Result<SegNet, GraphError> {
    let mut net = net.clone();
    if steps == 0 || source.is_empty() {
        return Ok(net);
    }
    let mut batch_rng = rng::stream(seed, Purpose::PretrainBatches, 0);
    for _ in 0..steps {
        let picks = rng::sample_distinct(&mut batch_rng, source.len(), batch_images.max(1));
        let mut g = Graph::new();
        let leaves = g.leaves_from(&net.params)?;
        let mut total: Option<NodeId> = None;
        for &i in &picks {
            let img = &source[i];
            let heads = seg_forward_graph(&mut g, &leaves, &img.pixels, img.labels.h, img.labels.w)?;
            let ce = crate::ntm::ce_graph(&mut g, heads.deep_probs, &img.labels, net.classes)?;
            total = Some(match total {
                Some(acc) => g.add(acc, ce)?,
                None => ce,
            });
        }
        let loss = g.scalar_mul(total.expect("non-empty batch"), 1.0 / picks.len() as f64)?;
        let names: Vec<&str> = leaves.keys().map(|s| s.as_str()).collect();
        let grads = g.gradient(loss, &names)?;
        sgd_step(&mut net.params, &grads, lr);
    }
    Ok(net)
}

/// Mean deep-head cross-entropy over a set of labeled images.
pub fn source_ce(net: &SegNet, images: &[LabeledImage]) -> Result<f64, GraphError> {
    let mut total = 0.0;
    for img in images {
        let (deep, _) = forward_seg(&net.params, &img.pixels, img.labels.h, img.labels.w)?;
        total += crate::ntm::corrected_loss(&deep, &img.labels, &Array::eye(net.classes))?;
    }
    Ok(total / images.len() as f64)
}

/// Trains the domain predictor with binary cross-entropy on domain labels
/// (source 0, target 1). The returned predictor is frozen by convention: the
/// optimizer only ever borrows it immutably.
pub fn pretrain_domain(
    predictor: &DomainPredictor,
    source_pixels: &[&Array],
    target_pixels: &[&Array],
    h: usize,
    w: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<DomainPredictor, GraphError> {
    let mut predictor = predictor.clone();
    if steps == 0 || source_pixels.is_empty() || target_pixels.is_empty() {
        return Ok(predictor);
    }
    let n = h * w;
    let mut batch_rng = rng::stream(seed, Purpose::DomainBatches, 0);
    use rand::Rng;
    for _ in 0..steps {
        let si = batch_rng.gen_range(0..source_pixels.len());
        let ti = batch_rng.gen_range(0..target_pixels.len());
        let mut g = Graph::new();
        let leaves = g.leaves_from(&predictor.params)?;
        let mut loss_terms = Vec::new();
        for (pixels, label) in [(source_pixels[si], 0.0), (target_pixels[ti], 1.0)] {
            let s = domain_forward_graph(&mut g, &leaves, pixels, h, w)?;
            // BCE: -mean[d log s + (1-d) log(1-s)]
            let term = if label > 0.5 {
                let c = g.clamp_min(s, 1e-12)?;
                g.log(c)?
            } else {
                let neg = g.scalar_mul(s, -1.0)?;
                let one_minus = g.scalar_add(neg, 1.0)?;
                let c = g.clamp_min(one_minus, 1e-12)?;
                g.log(c)?
            };
            let total = g.sum_all(term)?;
            loss_terms.push(g.scalar_mul(total, -1.0 / n as f64)?);
        }
        let sum = g.add(loss_terms[0], loss_terms[1])?;
        let loss = g.scalar_mul(sum, 0.5)?;
        let names: Vec<&str> = leaves.keys().map(|s| s.as_str()).collect();
        let grads = g.gradient(loss, &names)?;
        sgd_step(&mut predictor.params, &grads, lr);
    }
    Ok(predictor)
}

/// Mean BCE of the predictor on the given images with known domain labels.
pub fn domain_bce(
    predictor: &DomainPredictor,
    pixels: &[(&Array, f64)],
    h: usize,
    w: usize,
) -> Result<f64, GraphError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (img, d) in pixels {
        let s = forward_domain(&predictor.params, img, h, w)?;
        for &v in s.data() {
            let p = if *d > 0.5 { v } else { 1.0 - v };
            total -= p.max(1e-12).ln();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ── checkpoints ──────────────────────────────────────────────────────

/// Saves a parameter set (optionally including transition matrices) as flat
/// binary arrays plus a JSON manifest.
pub fn save_checkpoint(dir: &Path, params: &ParamSet) -> Result<(), DataError> {
    io::save_params(dir, params)
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamSet, DataError> {
    io::load_params(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Dataset, DatasetConfig};
    use approx::assert_relative_eq;

    fn tiny_dataset() -> Dataset {
        let cfg = DatasetConfig { images_per_domain: 8, ..DatasetConfig::default() };
        Dataset::generate(&cfg).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let mut net = SegNet::with_defaults(4, 0);
        let zeroed = net.params.zeros_like();
        net.params = zeroed;
        let data = tiny_dataset();
        let img = &data.source[0];
        let (deep, shallow) = forward_seg(&net.params, &img.pixels, 16, 16).unwrap();
        for v in deep.data().iter().chain(shallow.data().iter()) {
            assert_relative_eq!(*v, 0.25, max_relative = 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one_per_pixel() {
        let net = SegNet::with_defaults(4, 3);
        let data = tiny_dataset();
        let img = &data.target[0];
        let (deep, shallow) = forward_seg(&net.params, &img.pixels, 16, 16).unwrap();
        for probs in [&deep, &shallow] {
            for p in 0..probs.rows() {
                let sum: f64 = (0..4).map(|k| probs.at(p, k)).sum();
                assert!((sum - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = SegNet::with_defaults(4, 5);
        let data = tiny_dataset();
        let img = &data.source[1];
        let (a, _) = forward_seg(&net.params, &img.pixels, 16, 16).unwrap();
        let (b, _) = forward_seg(&net.params, &img.pixels, 16, 16).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn default_net_is_under_parameter_cap() {
        let net = SegNet::with_defaults(4, 0);
        assert!(net.params.total_len() <= MAX_SEG_PARAMS);
        assert_eq!(net.params.total_len(), 880);
    }

    #[test]
    fn zero_domain_weights_predict_half() {
        let mut dom = DomainPredictor::init(0);
        dom.params = dom.params.zeros_like();
        let data = tiny_dataset();
        let s = forward_domain(&dom.params, &data.source[0].pixels, 16, 16).unwrap();
        for &v in s.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn domain_scores_are_strictly_inside_unit_interval() {
        let dom = DomainPredictor::init(2);
        let data = tiny_dataset();
        let s = forward_domain(&dom.params, &data.target[0].pixels, 16, 16).unwrap();
        for &v in s.data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zero_steps_is_identity_for_both_pretrainers() {
        let data = tiny_dataset();
        let net = SegNet::with_defaults(4, 1);
        let out = pretrain_source(&net, &data.source, 0, 0.3, 4, 9).unwrap();
        assert_eq!(out.params, net.params);

        let dom = DomainPredictor::init(1);
        let src: Vec<&Array> = data.source.iter().map(|i| &i.pixels).collect();
        let tgt: Vec<&Array> = data.target.iter().map(|i| &i.pixels).collect();
        let out = pretrain_domain(&dom, &src, &tgt, 16, 16, 0, 0.5, 9).unwrap();
        assert_eq!(out.params, dom.params);
    }

    #[test]
    fn pretraining_reduces_source_loss_and_beats_chance() {
        let data = tiny_dataset();
        let net = SegNet::with_defaults(4, 1);
        let holdout = &data.source[6..8];
        let loss0 = source_ce(&net, holdout).unwrap();
        let trained = pretrain_source(&net, &data.source[..6], 200, 0.3, 4, 9).unwrap();
        let loss1 = source_ce(&trained, holdout).unwrap();
        assert!(loss1 < loss0, "holdout loss {loss1} not below {loss0}");

        // source pixel accuracy above chance 1/C
        let mut correct = 0usize;
        let mut total = 0usize;
        for img in holdout {
            let (deep, _) = forward_seg(&trained.params, &img.pixels, 16, 16).unwrap();
            let pred = argmax_labels(&deep, 16, 16);
            correct += pred
                .ids
                .iter()
                .zip(img.labels.ids.iter())
                .filter(|(a, b)| a == b)
                .count();
            total += pred.len();
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.25, "accuracy {acc}");
    }

    #[test]
    fn domain_pretraining_learns_shifted_domains() {
        let data = tiny_dataset(); // shift 0.6
        let dom = DomainPredictor::init(4);
        let src: Vec<&Array> = data.source[..6].iter().map(|i| &i.pixels).collect();
        let tgt: Vec<&Array> = data.target[..6].iter().map(|i| &i.pixels).collect();
        let trained = pretrain_domain(&dom, &src, &tgt, 16, 16, 200, 0.5, 9).unwrap();

        let held: Vec<(&Array, f64)> = vec![
            (&data.source[6].pixels, 0.0),
            (&data.source[7].pixels, 0.0),
            (&data.target[6].pixels, 1.0),
            (&data.target[7].pixels, 1.0),
        ];
        let bce0 = domain_bce(&dom, &held, 16, 16).unwrap();
        let bce1 = domain_bce(&trained, &held, 16, 16).unwrap();
        assert!(bce1 < bce0, "held-out BCE {bce1} not below {bce0}");

        // held-out accuracy above 0.5
        let mut correct = 0usize;
        let mut total = 0usize;
        for (pixels, d) in &held {
            let s = forward_domain(&trained.params, pixels, 16, 16).unwrap();
            for &v in s.data() {
                let pred = if v > 0.5 { 1.0 } else { 0.0 };
                if pred == *d {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.5, "domain accuracy {acc}");
    }

    #[test]
    fn target_scores_above_plain_source_after_pretraining() {
        // 5-seed mean target score exceeds the mean score of non-invariant
        // source pixels on shifted data
        let data = tiny_dataset();
        let mut diffs = Vec::new();
        for seed in 0..5 {
            let dom = DomainPredictor::init(seed);
            let src: Vec<&Array> = data.source[..6].iter().map(|i| &i.pixels).collect();
            let tgt: Vec<&Array> = data.target[..6].iter().map(|i| &i.pixels).collect();
            let trained = pretrain_domain(&dom, &src, &tgt, 16, 16, 200, 0.5, seed).unwrap();
            let mut target_mean = 0.0;
            let mut target_n = 0usize;
            for img in &data.target[6..8] {
                let s = forward_domain(&trained.params, &img.pixels, 16, 16).unwrap();
                target_mean += s.data().iter().sum::<f64>();
                target_n += s.numel();
            }
            let mut source_mean = 0.0;
            let mut source_n = 0usize;
            for img in &data.source[6..8] {
                let s = forward_domain(&trained.params, &img.pixels, 16, 16).unwrap();
                let mask = img.invariant_mask.as_ref().unwrap();
                for (p, &v) in s.data().iter().enumerate() {
                    if !mask[p] {
                        source_mean += v;
                        source_n += 1;
                    }
                }
            }
            diffs.push(target_mean / target_n as f64 - source_mean / source_n as f64);
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!(mean > 0.0, "5-seed mean separation {mean}");
    }

    #[test]
    fn indistinguishable_domains_stay_near_chance() {
        let cfg = DatasetConfig {
            images_per_domain: 24,
            shift_strength: 0.0,
            ..DatasetConfig::default()
        };
        let data = Dataset::generate(&cfg).unwrap();
        let dom = DomainPredictor::init(4);
        let src: Vec<&Array> = data.source[..16].iter().map(|i| &i.pixels).collect();
        let tgt: Vec<&Array> = data.target[..16].iter().map(|i| &i.pixels).collect();
        let trained = pretrain_domain(&dom, &src, &tgt, 16, 16, 200, 0.5, 9).unwrap();
        let mut held: Vec<(&Array, f64)> = Vec::new();
        for i in 16..24 {
            held.push((&data.source[i].pixels, 0.0));
            held.push((&data.target[i].pixels, 1.0));
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for (pixels, d) in &held {
            let s = forward_domain(&trained.params, pixels, 16, 16).unwrap();
            for &v in s.data() {
                let pred = if v > 0.5 { 1.0 } else { 0.0 };
                if pred == *d {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!((0.4..=0.6).contains(&acc), "accuracy {acc} should be near chance");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_bits() {
        let net = SegNet::with_defaults(4, 8);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &net.params).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, net.params);
    }
}
