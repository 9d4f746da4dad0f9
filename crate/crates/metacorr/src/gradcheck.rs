//! Central finite-difference oracles for every differentiable path.
//!
//! Each suite compares an analytic gradient against central differences with
//! step 1e-4 in double precision and reports the worst relative error. The
//! same suites back the library tests and the `gradcheck` subcommand.

use rand::Rng;

use crate::autodiff::{Array, Graph, GraphError, ParamSet};
use crate::models::{seg_forward_graph, SegNet};
use crate::ntm::{self, NoiseTransitionMatrix};
use crate::rng::{self, Purpose};
use crate::synth::Labels;
use crate::train;

pub const FD_STEP: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const NETWORK_TOL: f64 = 1e-4;
pub const META_TOL: f64 = 1e-3;

/// Relative error with a small absolute floor so near-zero gradients do not
/// divide by near-zero denominators.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Location of the worst entry, e.g. a parameter name and flat index.
    pub worst: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compares two gradient sets entry by entry.
pub fn compare(name: &str, analytic: &ParamSet, numeric: &ParamSet, tolerance: f64) -> GradCheck {
    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    for (pname, a) in analytic.iter() {
        let b = numeric.get(pname).expect("same parameter names");
        for (idx, (&x, &y)) in a.data().iter().zip(b.data().iter()).enumerate() {
            let rel = relative_error(x, y);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{pname}[{idx}] analytic {x:.6e} vs numeric {y:.6e}");
            }
        }
    }
    GradCheck { name: name.to_string(), max_rel_err: max_rel, tolerance, worst }
}

/// Central finite differences of a scalar function over every entry of `at`.
pub fn finite_difference<F>(mut f: F, at: &ParamSet, step: f64) -> Result<ParamSet, GraphError>
where
    F: FnMut(&ParamSet) -> Result<f64, GraphError>,
{
    let mut out = at.zeros_like();
    let mut point = at.clone();
    let names: Vec<String> = at.names().cloned().collect();
    for name in names {
        let n = at.get(&name).unwrap().numel();
        for idx in 0..n {
            let base = at.get(&name).unwrap().data()[idx];
            let mut arr = at.get(&name).unwrap().clone();
            arr.data_mut()[idx] = base + step;
            point.set(&name, arr.clone())?;
            let plus = f(&point)?;
            arr.data_mut()[idx] = base - step;
            point.set(&name, arr.clone())?;
            let minus = f(&point)?;
            arr.data_mut()[idx] = base;
            point.set(&name, arr)?;
            out.iter_mut()
                .find(|(k, _)| *k == &name)
                .map(|(_, v)| v.data_mut()[idx] = (plus - minus) / (2.0 * step));
        }
    }
    Ok(out)
}

fn uniform_array(shape: &[usize], lo: f64, hi: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen::<f64>() * (hi - lo) + lo).collect();
    Array::from_vec(shape, data).expect("length matches shape")
}

/// Keeps samples away from kinks (rectifier at 0, clamp floors) so central
/// differences stay valid; the kinks have measure zero in training.
fn away_from(value: f64, kink: f64, margin: f64) -> f64 {
    if (value - kink).abs() < margin {
        kink + margin * if value >= kink { 1.0 } else { -1.0 }
    } else {
        value
    }
}

/// Finite-difference checks for every primitive, on random inputs in [-2,2].
pub fn check_primitives(seed: u64) -> Result<Vec<GradCheck>, GraphError> {
    let mut rng = rng::stream(seed, Purpose::GradCheck, 0);
    let mut checks = Vec::new();

    // Weighted-sum readout so the scalar objective exercises every entry.
    fn readout(g: &mut Graph, x: crate::autodiff::NodeId, weights: &Array) -> Result<crate::autodiff::NodeId, GraphError> {
        let w = g.constant(weights.clone())?;
        let p = g.mul(x, w)?;
        g.sum_all(p)
    }

    {
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[3, 4], -2.0, 2.0, &mut rng)).unwrap();
        inputs.insert("b", uniform_array(&[3, 4], -2.0, 2.0, &mut rng)).unwrap();
        let r = uniform_array(&[3, 4], -1.0, 1.0, &mut rng);
        let rc = r.clone();
        let build = move |g: &mut Graph, _p: &ParamSet| -> Result<_, GraphError> {
            let a = g.leaf_id("a").unwrap();
            let b = g.leaf_id("b").unwrap();
            let s = g.add(a, b)?;
            let w = g.constant(rc.clone())?;
            let p = g.mul(s, w)?;
            g.sum_all(p)
        };
        // add
        checks.push(check_closure("add", &inputs, build, PRIMITIVE_TOL)?);
        let rc = r.clone();
        checks.push(check_closure(
            "sub",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let b = g.leaf_id("b").unwrap();
                let s = g.sub(a, b)?;
                readout(g, s, &rc)
            },
            PRIMITIVE_TOL,
        )?);
        let rc = r.clone();
        checks.push(check_closure(
            "mul",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let b = g.leaf_id("b").unwrap();
                let s = g.mul(a, b)?;
                readout(g, s, &rc)
            },
            PRIMITIVE_TOL,
        )?);
        let rc = r.clone();
        checks.push(check_closure(
            "scalar_mul_add",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let s = g.scalar_mul(a, -1.7)?;
                let s = g.scalar_add(s, 0.4)?;
                readout(g, s, &rc)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        // div: denominators bounded away from zero
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[3, 3], -2.0, 2.0, &mut rng)).unwrap();
        let denom = uniform_array(&[3, 3], 0.5, 2.0, &mut rng);
        let sign = uniform_array(&[3, 3], -1.0, 1.0, &mut rng);
        let denom = Array::from_vec(
            &[3, 3],
            denom
                .data()
                .iter()
                .zip(sign.data().iter())
                .map(|(&d, &s)| if s < 0.0 { -d } else { d })
                .collect(),
        )
        .unwrap();
        inputs.insert("b", denom).unwrap();
        let r = uniform_array(&[3, 3], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "div",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let b = g.leaf_id("b").unwrap();
                let s = g.div(a, b)?;
                readout(g, s, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[3, 4], -2.0, 2.0, &mut rng)).unwrap();
        inputs.insert("b", uniform_array(&[4, 2], -2.0, 2.0, &mut rng)).unwrap();
        let r = uniform_array(&[3, 2], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "matmul",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let b = g.leaf_id("b").unwrap();
                let s = g.matmul(a, b)?;
                readout(g, s, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[3, 4], -2.0, 2.0, &mut rng)).unwrap();
        let r = uniform_array(&[4, 3], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "transpose",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let s = g.transpose(a)?;
                readout(g, s, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[2, 5], -2.0, 2.0, &mut rng)).unwrap();
        let r = uniform_array(&[2, 5], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "exp",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let s = g.exp(a)?;
                readout(g, s, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        // log: strictly positive inputs
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[2, 5], 0.2, 2.2, &mut rng)).unwrap();
        let r = uniform_array(&[2, 5], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "log",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let s = g.log(a)?;
                readout(g, s, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[2, 5], -2.0, 2.0, &mut rng)).unwrap();
        let r = uniform_array(&[2, 5], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "sigmoid",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let s = g.sigmoid(a)?;
                readout(g, s, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        // leaky rectifier: keep samples away from the kink at 0
        let raw = uniform_array(&[2, 6], -2.0, 2.0, &mut rng);
        let safe = raw.map(|x| away_from(x, 0.0, 10.0 * FD_STEP));
        let mut inputs = ParamSet::new();
        inputs.insert("a", safe).unwrap();
        let r = uniform_array(&[2, 6], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "leaky_relu",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let s = g.leaky_relu(a, 0.01)?;
                readout(g, s, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        // clamp floor at 0.5, samples away from it
        let raw = uniform_array(&[2, 6], -2.0, 2.0, &mut rng);
        let safe = raw.map(|x| away_from(x, 0.5, 10.0 * FD_STEP));
        let mut inputs = ParamSet::new();
        inputs.insert("a", safe).unwrap();
        let r = uniform_array(&[2, 6], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "clamp_min",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let s = g.clamp_min(a, 0.5)?;
                readout(g, s, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[4, 3], -2.0, 2.0, &mut rng)).unwrap();
        let r = uniform_array(&[4, 3], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "softmax",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let s = g.softmax_rows(a)?;
                readout(g, s, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        // reductions and broadcasts chained together
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[3, 4], -2.0, 2.0, &mut rng)).unwrap();
        inputs.insert("b", uniform_array(&[1, 4], -2.0, 2.0, &mut rng)).unwrap();
        let r = uniform_array(&[3, 1], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "reduce_broadcast",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let b = g.leaf_id("b").unwrap();
                let bb = g.broadcast_rows(b, 3)?;
                let s = g.mul(a, bb)?;
                let rowsum = g.sum_last(s)?;
                let w = g.constant(r.clone())?;
                let p = g.mul(rowsum, w)?;
                let back = g.broadcast_last(p, 4)?;
                let m = g.mean_all(back)?;
                let colsum = g.sum_rows(s)?;
                let t = g.sum_all(colsum)?;
                let combined = g.add(m, t)?;
                let lifted = g.broadcast_scalar(combined, &[2, 2])?;
                g.sum_all(lifted)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[5, 3], -2.0, 2.0, &mut rng)).unwrap();
        let idx = vec![0usize, 2, 2, 4];
        let r = uniform_array(&[4, 3], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "gather_scatter",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let picked = g.gather_rows(a, idx.clone())?;
                let w = g.constant(r.clone())?;
                let p = g.mul(picked, w)?;
                let spread = g.scatter_rows(p, idx.clone(), 5)?;
                g.sum_all(spread)
            },
            PRIMITIVE_TOL,
        )?);
    }

    {
        let (h, w, c) = (4, 5, 2);
        let mut inputs = ParamSet::new();
        inputs.insert("a", uniform_array(&[h * w, c], -2.0, 2.0, &mut rng)).unwrap();
        let r = uniform_array(&[h * w, 9 * c], -1.0, 1.0, &mut rng);
        checks.push(check_closure(
            "unfold3x3",
            &inputs,
            move |g, _| {
                let a = g.leaf_id("a").unwrap();
                let u = g.unfold3x3(a, h, w)?;
                readout(g, u, &r)
            },
            PRIMITIVE_TOL,
        )?);
    }

    Ok(checks)
}

fn check_closure<F>(name: &str, inputs: &ParamSet, build: F, tol: f64) -> Result<GradCheck, GraphError>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<crate::autodiff::NodeId, GraphError>,
{
    let analytic = {
        let mut g = Graph::new();
        g.leaves_from(inputs)?;
        let root = build(&mut g, inputs)?;
        let names: Vec<&str> = inputs.names().map(|s| s.as_str()).collect();
        g.gradient(root, &names)?
    };
    let numeric = finite_difference(
        |p| {
            let mut g = Graph::new();
            g.leaves_from(p)?;
            let root = build(&mut g, p)?;
            Ok(g.value(root).item())
        },
        inputs,
        FD_STEP,
    )?;
    Ok(compare(name, &analytic, &numeric, tol))
}

/// Finite-difference check of the full two-head network: mean deep-head CE
/// plus half the shallow-head CE, over every parameter.
pub fn check_network(seed: u64) -> Result<GradCheck, GraphError> {
    let mut rng = rng::stream(seed, Purpose::GradCheck, 1);
    let (h, w, classes) = (6, 6, 4);
    let net = SegNet::with_defaults(classes, seed);
    let pixels = uniform_array(&[h * w, 3], 0.0, 1.0, &mut rng);
    let labels = Labels::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect());

    let objective = |g: &mut Graph, p: &ParamSet| -> Result<crate::autodiff::NodeId, GraphError> {
        let leaves = g.leaves_from(p)?;
        let heads = seg_forward_graph(g, &leaves, &pixels, h, w)?;
        let deep = ntm::ce_graph(g, heads.deep_probs, &labels, classes)?;
        let shallow = ntm::ce_graph(g, heads.shallow_probs, &labels, classes)?;
        let half = g.scalar_mul(shallow, 0.5)?;
        g.add(deep, half)
    };

    let analytic = {
        let mut g = Graph::new();
        let root = objective(&mut g, &net.params)?;
        let names: Vec<&str> = net.params.names().map(|s| s.as_str()).collect();
        g.gradient(root, &names)?
    };
    let numeric = finite_difference(
        |p| {
            let mut g = Graph::new();
            let root = objective(&mut g, p)?;
            Ok(g.value(root).item())
        },
        &net.params,
        FD_STEP,
    )?;
    Ok(compare("network", &analytic, &numeric, NETWORK_TOL))
}

/// Finite-difference check of the corrected loss with respect to the
/// transition matrix entries.
pub fn check_corrected_loss_wrt_t(seed: u64) -> Result<GradCheck, GraphError> {
    let mut rng = rng::stream(seed, Purpose::GradCheck, 2);
    let (n, c) = (7, 4);
    let mut probs = Array::zeros(&[n, c]);
    for p in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() + 0.05).collect();
        let sum: f64 = row.iter().sum();
        for (k, v) in row.iter().enumerate() {
            probs.set(p, k, v / sum);
        }
    }
    let labels = Labels::new(1, n, (0..n).map(|_| rng.gen_range(0..c as u8)).collect());
    let t0 = {
        let raw = uniform_array(&[c, c], 0.05, 1.0, &mut rng);
        crate::ntm::project_row_stochastic(&raw).0
    };
    let mut inputs = ParamSet::new();
    inputs.insert("t", t0).unwrap();

    let probs_c = probs.clone();
    let labels_c = labels.clone();
    check_closure(
        "corrected_loss_wrt_t",
        &inputs,
        move |g, _| {
            let pn = g.constant(probs_c.clone())?;
            let tn = g.leaf_id("t").unwrap();
            ntm::corrected_ce_graph(g, pn, tn, &labels_c, c)
        },
        NETWORK_TOL,
    )
}

/// Mixed second derivative on a 1-pixel, C=3 softmax model, against finite
/// differences of the directional gradient over T entries.
pub fn check_mixed_micro(seed: u64) -> Result<GradCheck, GraphError> {
    let mut rng = rng::stream(seed, Purpose::GradCheck, 3);
    let c = 3usize;
    let logits = uniform_array(&[1, c], -1.0, 1.0, &mut rng);
    let t0 = crate::ntm::project_row_stochastic(&uniform_array(&[c, c], 0.05, 1.0, &mut rng)).0;
    let label = Labels::new(1, 1, vec![1]);
    let v_arr = uniform_array(&[1, c], -1.0, 1.0, &mut rng);
    let mut v = ParamSet::new();
    v.insert("z", v_arr).unwrap();

    let build = |g: &mut Graph, z0: &Array, t: &Array| -> Result<crate::autodiff::NodeId, GraphError> {
        let z = g.leaf("z", z0.clone())?;
        let tn = g.leaf("t", t.clone())?;
        let probs = g.softmax_rows(z)?;
        ntm::corrected_ce_graph(g, probs, tn, &label, c)
    };

    // analytic mixed gradient
    let analytic = {
        let mut g = Graph::new();
        let loss = build(&mut g, &logits, &t0)?;
        g.mixed_second_gradient(loss, &v, &["t"])?
    };

    // numeric: central differences of <grad_z loss, v> over T entries
    let directional = |t: &Array| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let loss = build(&mut g, &logits, t)?;
        let grad = g.gradient(loss, &["z"])?;
        Ok(grad
            .get("z")
            .unwrap()
            .data()
            .iter()
            .zip(v.get("z").unwrap().data().iter())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut numeric_t = Array::zeros(&[c, c]);
    for j in 0..c {
        for k in 0..c {
            let mut plus = t0.clone();
            plus.set(j, k, t0.at(j, k) + FD_STEP);
            let mut minus = t0.clone();
            minus.set(j, k, t0.at(j, k) - FD_STEP);
            numeric_t.set(j, k, (directional(&plus)? - directional(&minus)?) / (2.0 * FD_STEP));
        }
    }
    let mut numeric = ParamSet::new();
    numeric.insert("t", numeric_t).unwrap();
    Ok(compare("mixed_second_micro", &analytic, &numeric, META_TOL))
}

/// End-to-end meta-gradient check on a 1-image, C=4 instance: the analytic
/// transition-matrix gradient against central differences that re-run the
/// virtual step for every perturbed entry.
pub fn check_meta_end_to_end(seed: u64) -> Result<GradCheck, GraphError> {
    let mut rng = rng::stream(seed, Purpose::GradCheck, 4);
    let (h, w, classes) = (6, 6, 4);
    let net = SegNet::with_defaults(classes, seed.wrapping_add(1));
    let target_pixels = uniform_array(&[h * w, 3], 0.0, 1.0, &mut rng);
    let pseudo = Labels::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect());
    let source_pixels = uniform_array(&[h * w, 3], 0.0, 1.0, &mut rng);
    let meta_labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect();
    let meta_entries: Vec<train::MetaEntry> = (0..h * w)
        .step_by(3)
        .map(|p| train::MetaEntry {
            image: 0,
            pixel: p,
            label: meta_labels[p],
            score: 1.0,
            fallback: false,
        })
        .collect();

    let t0 = crate::ntm::project_row_stochastic(&uniform_array(&[classes, classes], 0.05, 1.0, &mut rng)).0;
    let t1 = crate::ntm::project_row_stochastic(&uniform_array(&[classes, classes], 0.05, 1.0, &mut rng)).0;
    let alpha = [1.0, 0.1];
    let virtual_lr = 1e-2;

    let make_ntms = |t0: &Array, t1: &Array| {
        [
            NoiseTransitionMatrix { t: t0.clone(), level: 0 },
            NoiseTransitionMatrix { t: t1.clone(), level: 1 },
        ]
    };

    // analytic gradient through the recorded virtual step
    let ntms = make_ntms(&t0, &t1);
    let batch = [(&target_pixels, &pseudo)];
    let mut record = train::virtual_step(&net.params, &batch, &ntms, alpha, virtual_lr, h, w, classes)
        .map_err(train_to_graph)?;
    let (grad, _meta_loss) = train::meta_gradient(
        &net.params,
        &mut record,
        &meta_entries,
        &[&source_pixels],
        h,
        w,
        classes,
    )
    .map_err(train_to_graph)?;

    // numeric: fresh virtual step per perturbation
    let meta_loss_for = |t0: &Array, t1: &Array| -> Result<f64, GraphError> {
        let ntms = make_ntms(t0, t1);
        let record = train::virtual_step(&net.params, &batch, &ntms, alpha, virtual_lr, h, w, classes)
            .map_err(train_to_graph)?;
        train::meta_loss_value(&record.w_hat, &meta_entries, &[&source_pixels], h, w, classes)
            .map_err(train_to_graph)
    };

    let mut numeric = ParamSet::new();
    for (level, base) in [(0usize, &t0), (1usize, &t1)] {
        let mut fd = Array::zeros(&[classes, classes]);
        for j in 0..classes {
            for k in 0..classes {
                let mut plus = base.clone();
                plus.set(j, k, base.at(j, k) + FD_STEP);
                let mut minus = base.clone();
                minus.set(j, k, base.at(j, k) - FD_STEP);
                let (lp, lm) = if level == 0 {
                    (meta_loss_for(&plus, &t1)?, meta_loss_for(&minus, &t1)?)
                } else {
                    (meta_loss_for(&t0, &plus)?, meta_loss_for(&t0, &minus)?)
                };
                fd.set(j, k, (lp - lm) / (2.0 * FD_STEP));
            }
        }
        numeric.insert(&train::ntm_leaf_name(level), fd).unwrap();
    }

    Ok(compare("meta_gradient_end_to_end", &grad, &numeric, META_TOL))
}

fn train_to_graph(e: train::TrainError) -> GraphError {
    match e {
        train::TrainError::Graph(g) => g,
        other => GraphError::BadShape(format!("{other}")),
    }
}

/// Every suite in the order the `gradcheck` command reports them.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>, GraphError> {
    let mut checks = check_primitives(seed)?;
    checks.push(check_network(seed)?);
    checks.push(check_corrected_loss_wrt_t(seed)?);
    checks.push(check_mixed_micro(seed)?);
    checks.push(check_meta_end_to_end(seed)?);
    Ok(checks)
}

/// One line per check: name, worst relative error, tolerance, verdict.
pub fn render_report(checks: &[GradCheck]) -> String {
    let mut out = String::new();
    for c in checks {
        let verdict = if c.passed() {
            "pass".to_string()
        } else {
            format!("FAIL ({})", c.worst)
        };
        out.push_str(&format!(
            "{:<28} max_rel_err {:>12.3e}  tol {:>8.0e}  {}\n",
            c.name, c.max_rel_err, c.tolerance, verdict
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_finite_difference() {
        let checks = check_primitives(42).unwrap();
        for c in &checks {
            assert!(c.passed(), "{}: {} ({})", c.name, c.max_rel_err, c.worst);
        }
    }

    #[test]
    fn network_passes_finite_difference() {
        let c = check_network(42).unwrap();
        assert!(c.passed(), "{} ({})", c.max_rel_err, c.worst);
    }

    #[test]
    fn corrected_loss_t_gradient_passes() {
        let c = check_corrected_loss_wrt_t(42).unwrap();
        assert!(c.passed(), "{} ({})", c.max_rel_err, c.worst);
    }

    #[test]
    fn mixed_micro_passes() {
        let c = check_mixed_micro(42).unwrap();
        assert!(c.passed(), "{} ({})", c.max_rel_err, c.worst);
    }

    #[test]
    fn meta_end_to_end_passes() {
        let c = check_meta_end_to_end(42).unwrap();
        assert!(c.passed(), "{} ({})", c.max_rel_err, c.worst);
    }

    #[test]
    fn corrupted_gradient_fails_with_named_entry() {
        // fault injection: scale one analytic entry and expect a named failure
        let mut analytic = ParamSet::new();
        analytic.insert("softmax.z", Array::from_vec(&[1, 3], vec![0.5, -0.25, 0.75]).unwrap()).unwrap();
        let mut numeric = analytic.clone();
        numeric
            .set("softmax.z", Array::from_vec(&[1, 3], vec![0.5, -0.25, 0.75 * 1.01]).unwrap())
            .unwrap();
        let check = compare("softmax_backward", &analytic, &numeric, PRIMITIVE_TOL);
        assert!(!check.passed());
        assert!(check.worst.contains("softmax.z"), "worst: {}", check.worst);
    }
}
