//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! with its runtime against the stated budget.
//!
//! Run with: cargo test --test acceptance -- --nocapture

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use metacorr::autodiff::Array;
use metacorr::gradcheck;
use metacorr::harness::{self, presets, run_training, ExperimentConfig, RunArtifacts};
use metacorr::metrics;
use metacorr::ntm::{self, NoiseTransitionMatrix};
use metacorr::rng::{self as rngs, Purpose};
use metacorr::synth::{inject_label_noise, Dataset, Labels, NoiseSpec};
use metacorr::train::{self, Method};

fn report(criterion: &str, what: &str, elapsed: Duration, budget: Duration) {
    println!(
        "ACCEPTANCE {criterion}: PASS — {what} in {:.2}s (budget {:.0}s)",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(
        elapsed <= budget,
        "{criterion} exceeded its runtime budget: {:.2}s > {:.0}s",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
}

fn random_simplex_rows(n: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array {
    let mut probs = Array::zeros(&[n, c]);
    for p in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let sum: f64 = row.iter().sum();
        for (k, v) in row.iter().enumerate() {
            probs.set(p, k, v / sum);
        }
    }
    probs
}

/// Criterion 1: with identity transition matrices the corrected loss equals
/// plain cross-entropy to 1e-12 relative error, and a correction run with a
/// zero meta rate is bit-identical to plain self-training.
#[test]
fn criterion_01_identity_reduction() {
    let start = Instant::now();
    let mut rng = rngs::stream(1, Purpose::GradCheck, 10);

    for _ in 0..100 {
        let (n, c) = (32, 4);
        let probs = random_simplex_rows(n, c, &mut rng);
        let labels = Labels::new(1, n, (0..n).map(|_| rng.gen_range(0..c as u8)).collect());
        let corrected = ntm::corrected_loss(&probs, &labels, &Array::eye(c)).unwrap();
        let plain: f64 = labels
            .ids
            .iter()
            .enumerate()
            .map(|(p, &y)| -probs.at(p, y as usize).ln())
            .sum::<f64>()
            / n as f64;
        let rel = (corrected - plain).abs() / plain.abs();
        assert!(rel <= 1e-12, "relative error {rel}");
    }

    // zero meta rate + zero shallow weight == self_training, byte for byte
    let mut cfg = presets::standard_benchmark();
    cfg.steps = 200;
    cfg.images_per_domain = 16;
    cfg.meta_lr = 0.0;
    cfg.alpha1 = 0.0;
    let data = Dataset::generate(&cfg.dataset_config()).unwrap();
    let mc = run_training(&cfg, &data, Method::MetaCorrection, 7).unwrap();
    let st = run_training(&cfg, &data, Method::SelfTraining, 7).unwrap();
    let mc_csv = harness::history_csv(&mc.outcome.history);
    let st_csv = harness::history_csv(&st.outcome.history);
    assert!(!mc.outcome.history.is_empty());
    assert_eq!(mc_csv.as_bytes(), st_csv.as_bytes(), "history CSVs differ");

    report(
        "01",
        "identity reduction exact on 100 instances; zero-meta run bit-identical to self-training",
        start.elapsed(),
        Duration::from_secs(10),
    );
}

/// Criterion 2: every primitive and the full two-head network pass central
/// finite-difference checks (1e-5 / 1e-4, step 1e-4).
#[test]
fn criterion_02_gradient_correctness() {
    let start = Instant::now();
    let mut checks = gradcheck::check_primitives(42).unwrap();
    checks.push(gradcheck::check_network(42).unwrap());
    for c in &checks {
        assert!(c.passed(), "{}: rel err {} ({})", c.name, c.max_rel_err, c.worst);
    }
    report(
        "02",
        "all primitives within 1e-5 and the network within 1e-4 of finite differences",
        start.elapsed(),
        Duration::from_secs(30),
    );
}

/// Criterion 3: the transition-matrix gradient through the recorded virtual
/// step matches end-to-end finite differences that re-run the step per
/// perturbed entry (relative error 1e-3, C=4 instance under 3000 parameters).
#[test]
fn criterion_03_meta_gradient_exactness() {
    let start = Instant::now();
    let check = gradcheck::check_meta_end_to_end(42).unwrap();
    assert!(check.passed(), "rel err {} ({})", check.max_rel_err, check.worst);
    let micro = gradcheck::check_mixed_micro(42).unwrap();
    assert!(micro.passed(), "micro: rel err {} ({})", micro.max_rel_err, micro.worst);
    report(
        "03",
        "meta gradient matches the virtual-step finite-difference oracle within 1e-3",
        start.elapsed(),
        Duration::from_secs(60),
    );
}

/// Criterion 4: projection onto the row-stochastic set is idempotent, always
/// outputs row-stochastic matrices, and falls back to identity rows exactly
/// on all-non-positive rows.
#[test]
fn criterion_04_projection_properties() {
    let start = Instant::now();
    let mut rng = rngs::stream(4, Purpose::GradCheck, 11);
    for trial in 0..10_000 {
        let c = 2 + (trial % 5);
        // every third trial is negative-heavy
        let (lo, hi) = if trial % 3 == 0 { (-3.0, 0.5) } else { (-1.0, 2.0) };
        let data: Vec<f64> = (0..c * c).map(|_| rng.gen::<f64>() * (hi - lo) + lo).collect();
        let raw = Array::from_vec(&[c, c], data).unwrap();
        let (p1, diag) = ntm::project_row_stochastic(&raw);
        let (p2, _) = ntm::project_row_stochastic(&p1);
        let mut expected_fallbacks = 0;
        for j in 0..c {
            let sum: f64 = (0..c).map(|k| p1.at(j, k)).sum();
            assert!((sum - 1.0).abs() <= 1e-9, "row {j} sums to {sum}");
            for k in 0..c {
                assert!((0.0..=1.0).contains(&p1.at(j, k)));
                assert!((p1.at(j, k) - p2.at(j, k)).abs() <= 1e-12, "not idempotent");
            }
            let all_non_positive = (0..c).all(|k| raw.at(j, k) <= 0.0);
            if all_non_positive {
                expected_fallbacks += 1;
                for k in 0..c {
                    assert_eq!(p1.at(j, k), if k == j { 1.0 } else { 0.0 });
                }
            }
        }
        assert_eq!(diag.identity_row_fallbacks, expected_fallbacks);
    }
    report(
        "04",
        "projection idempotent, row-stochastic on 10^4 inputs, exact identity fallback",
        start.elapsed(),
        Duration::from_secs(5),
    );
}

/// Criterion 5: empirical confusion of the noise injector, row-normalized
/// over at least 1e5 pixels per class, is within Frobenius distance 0.05 of
/// the true matrix for 3 random row-stochastic matrices.
#[test]
fn criterion_05_noise_model_fidelity() {
    let start = Instant::now();
    let mut rng = rngs::stream(5, Purpose::GradCheck, 12);
    let c = 4usize;
    let per_class = 120_000usize;
    let ids: Vec<u8> = (0..c)
        .flat_map(|k| std::iter::repeat(k as u8).take(per_class))
        .collect();
    let labels = Labels::new(c * 300, per_class / 300, ids);
    for trial in 0..3 {
        let raw = Array::from_vec(&[c, c], (0..c * c).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let (t_true, _) = ntm::project_row_stochastic(&raw);
        let spec = NoiseSpec::new(t_true.clone(), 100 + trial).unwrap();
        let noisy = inject_label_noise(&labels, &spec).unwrap();
        let cm = metrics::confusion_with_classes(&noisy, &labels, c).unwrap();
        let est = cm.row_normalized();
        let dist = est.frobenius_distance(&t_true);
        assert!(dist <= 0.05, "trial {trial}: Frobenius distance {dist}");
    }
    report(
        "05",
        "injected-noise confusion within 0.05 of the true matrix for 3 random matrices",
        start.elapsed(),
        Duration::from_secs(10),
    );
}

/// Criterion 6: with oracle pseudo labels drawn from a known matrix (class 0
/// flips to 1 at 0.3), single-level correction over 2000 iterations recovers
/// the matrix: mean error at most half the identity baseline over 5 seeds.
#[test]
fn criterion_06_ntm_recovery() {
    let start = Instant::now();
    let cfg = presets::ntm_recovery();
    assert_eq!(cfg.steps, 2000);
    let data = Dataset::generate(&cfg.dataset_config()).unwrap();
    let t_true = Array::from_vec(&[cfg.classes, cfg.classes], cfg.noise_t_true.clone()).unwrap();
    let identity_err = metrics::ntm_frobenius_error(&Array::eye(cfg.classes), &t_true).unwrap();

    let errs: Vec<f64> = (0..5u64)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.noise_seed = seed;
            let art = run_training(&c, &data, Method::SingleDmlc, seed).unwrap();
            metrics::ntm_frobenius_error(&art.outcome.ntms[0].t, &t_true).unwrap()
        })
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(
        mean <= 0.5 * identity_err,
        "mean recovery error {mean:.4} > half the identity baseline {:.4} (seeds: {errs:?})",
        0.5 * identity_err
    );
    report(
        "06",
        &format!(
            "mean transition-matrix recovery error {mean:.3} <= {:.3} (half the identity baseline)",
            0.5 * identity_err
        ),
        start.elapsed(),
        Duration::from_secs(180),
    );
}

struct OrderingRuns {
    /// clean-label target accuracy per (method, seed)
    cells: Vec<(Method, u64, f64)>,
    /// the five full correction runs, for meta-set validation
    mc_artifacts: Vec<RunArtifacts>,
    data: Dataset,
    cfg: ExperimentConfig,
    duration: Duration,
}

static ORDERING: OnceLock<OrderingRuns> = OnceLock::new();

fn ordering_runs() -> &'static OrderingRuns {
    ORDERING.get_or_init(|| {
        let start = Instant::now();
        let cfg = presets::ablation_benchmark();
        let data = Dataset::generate(&cfg.dataset_config()).unwrap();
        let seeds: Vec<u64> = (0..5).collect();
        let cells: Vec<(Method, u64, f64)> = Method::ALL
            .iter()
            .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&(method, seed)| {
                let mut c = cfg.clone();
                c.noise_seed = seed;
                let art = run_training(&c, &data, method, seed).unwrap();
                (method, seed, art.clean_target_accuracy)
            })
            .collect();
        let mc_artifacts: Vec<RunArtifacts> = seeds
            .par_iter()
            .map(|&seed| {
                let mut c = cfg.clone();
                c.noise_seed = seed;
                run_training(&c, &data, Method::MetaCorrection, seed).unwrap()
            })
            .collect();
        OrderingRuns { cells, mc_artifacts, data, cfg, duration: start.elapsed() }
    })
}

fn mean_accuracy(runs: &OrderingRuns, method: Method) -> f64 {
    let accs: Vec<f64> = runs
        .cells
        .iter()
        .filter(|(m, _, _)| *m == method)
        .map(|(_, _, a)| *a)
        .collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

/// Criterion 7: 5-seed mean clean-label target accuracy orders the methods
/// metacorrection >= single_dmlc >= self_training >= source_only, with the
/// full method at least 2 points above plain self-training.
#[test]
fn criterion_07_ablation_ordering() {
    let runs = ordering_runs();
    let mc = mean_accuracy(runs, Method::MetaCorrection);
    let sd = mean_accuracy(runs, Method::SingleDmlc);
    let st = mean_accuracy(runs, Method::SelfTraining);
    let so = mean_accuracy(runs, Method::SourceOnly);
    println!("  ordering means: metacorrection {mc:.4}, single_dmlc {sd:.4}, self_training {st:.4}, source_only {so:.4}");
    assert!(mc >= sd, "metacorrection {mc:.4} < single_dmlc {sd:.4}");
    assert!(sd >= st, "single_dmlc {sd:.4} < self_training {st:.4}");
    assert!(st >= so, "self_training {st:.4} < source_only {so:.4}");
    assert!(
        mc - st >= 0.02,
        "metacorrection - self_training margin {:.4} < 0.02",
        mc - st
    );
    report(
        "07",
        &format!(
            "ordering holds with margin {:.3} over self-training (25 runs in {:.0}s)",
            mc - st,
            runs.duration.as_secs_f64()
        ),
        runs.duration,
        Duration::from_secs(600),
    );
}

/// Criterion 8: every non-fallback meta pixel scores above the 0.5 threshold,
/// and the selected set over-represents the truly invariant pixels (precision
/// above the 0.2 base rate, 5-seed mean). Runtime is covered by criterion 7's
/// shared runs.
#[test]
fn criterion_08_meta_selection_validity() {
    let runs = ordering_runs();
    let mut precisions = Vec::new();
    for art in &runs.mc_artifacts {
        let meta_set = art.outcome.meta_set.as_ref().expect("correction runs select a meta set");
        let mut hits = 0usize;
        for e in &meta_set.entries {
            if !e.fallback {
                assert!(e.score > runs.cfg.tau, "non-fallback entry scored {}", e.score);
            }
            if runs.data.source[e.image].invariant_mask.as_ref().unwrap()[e.pixel] {
                hits += 1;
            }
        }
        precisions.push(hits as f64 / meta_set.entries.len() as f64);
    }
    let mean = precisions.iter().sum::<f64>() / precisions.len() as f64;
    println!("  selection precisions: {precisions:?}");
    assert!(
        mean > runs.cfg.invariant_fraction,
        "mean precision {mean:.3} does not exceed the base rate {}",
        runs.cfg.invariant_fraction
    );
    report(
        "08",
        &format!(
            "non-fallback scores above tau; selection precision {mean:.3} > base rate {:.1}",
            runs.cfg.invariant_fraction
        ),
        Duration::from_secs(0),
        Duration::from_secs(600),
    );
}

/// Criterion 9: commands re-run with the same config and seed produce
/// byte-identical CSV outputs.
#[test]
fn criterion_09_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = presets::standard_benchmark();
    cfg.steps = 100;
    cfg.images_per_domain = 16;
    cfg.eval_every = 25;
    cfg.method = "single_dmlc".into();
    cfg.seed = 3;
    cfg.noise_t_true = presets::ntm_recovery().noise_t_true;

    let mut bytes: Vec<Vec<u8>> = Vec::new();
    for round in 0..2 {
        let mut c = cfg.clone();
        c.out_dir = tmp
            .path()
            .join(format!("round{round}"))
            .to_string_lossy()
            .into_owned();
        harness::cmd_generate(&c).unwrap();
        let outputs = harness::cmd_train(&c).unwrap();
        let mut all = std::fs::read(&outputs.history_csv).unwrap();
        all.extend(std::fs::read(outputs.run_dir.join("ntm_level0.csv")).unwrap());
        all.extend(std::fs::read(outputs.run_dir.join("ntm_level1.csv")).unwrap());
        all.extend(std::fs::read(outputs.run_dir.join("checkpoint/params.bin")).unwrap());
        all.extend(std::fs::read(c.dataset_dir().join("manifest.json")).unwrap());
        all.extend(std::fs::read(c.dataset_dir().join("source_pixels.bin")).unwrap());
        bytes.push(all);
    }
    assert_eq!(bytes[0], bytes[1], "re-run outputs differ");
    report(
        "09",
        "generate + train re-runs are byte-identical",
        start.elapsed(),
        Duration::from_secs(60),
    );
}

/// Criterion 10: Dice = 2 IoU / (1 + IoU) holds per class to 1e-12 on 1000
/// random confusion matrices, and the hand-arithmetic cases are exact.
#[test]
fn criterion_10_metric_identities() {
    let start = Instant::now();
    let mut rng = rngs::stream(10, Purpose::GradCheck, 13);
    for _ in 0..1000 {
        let c = 2 + rng.gen_range(0..4usize);
        let mut cm = metrics::ConfusionMatrix::zero(c);
        for j in 0..c {
            for k in 0..c {
                for _ in 0..rng.gen_range(0..20u32) {
                    cm.add(j, k);
                }
            }
        }
        let ious = metrics::iou_per_class(&cm);
        for (k, iou) in ious.iter().enumerate() {
            if let Some(iou) = iou {
                let d = metrics::dice(&cm, k);
                let expect = 2.0 * iou / (1.0 + iou);
                assert!((d - expect).abs() <= 1e-12, "class {k}: {d} vs {expect}");
                assert!(*iou <= d + 1e-12);
            }
        }
    }

    // hand-arithmetic anchors
    let mut cm = metrics::ConfusionMatrix::zero(2);
    for _ in 0..6 {
        cm.add(0, 0);
    }
    for _ in 0..2 {
        cm.add(1, 0);
    }
    for _ in 0..2 {
        cm.add(0, 1);
    }
    assert_eq!(metrics::iou_per_class(&cm)[0], Some(0.6));
    assert_eq!(metrics::dice(&cm, 0), 0.75);
    let i2 = Array::eye(2);
    let uniform = Array::filled(&[2, 2], 0.5);
    assert!((metrics::ntm_frobenius_error(&i2, &uniform).unwrap() - 1.0).abs() <= 1e-15);

    report(
        "10",
        "Dice/IoU identity on 1000 random matrices; hand cases exact",
        start.elapsed(),
        Duration::from_secs(5),
    );
}

/// The transition matrices stay row-stochastic after every meta step of a
/// real run (supporting invariant for criteria 6 and 7).
#[test]
fn supporting_row_stochastic_through_training() {
    let mut cfg = presets::ntm_recovery();
    cfg.steps = 120;
    cfg.eval_every = 10;
    cfg.images_per_domain = 16;
    let data = Dataset::generate(&cfg.dataset_config()).unwrap();
    let art = run_training(&cfg, &data, Method::SingleDmlc, 0).unwrap();
    for snap in &art.outcome.ntm_snapshots {
        for level in 0..2 {
            let t = &snap.t[level];
            for j in 0..cfg.classes {
                let mut sum = 0.0;
                for k in 0..cfg.classes {
                    let v = t.at(j, k);
                    assert!((0.0..=1.0).contains(&v));
                    sum += v;
                }
                assert!((sum - 1.0).abs() <= 1e-9, "iteration {}: row {j} sums to {sum}", snap.iteration);
            }
        }
    }
    // identity transition matrices to start
    let first = &art.outcome.ntm_snapshots[0];
    let _ = first;
    let _ = NoiseTransitionMatrix::identity_init(cfg.classes, 0);
    let _ = train::clean_target_accuracy(&art.outcome.net, &data).unwrap();
}
