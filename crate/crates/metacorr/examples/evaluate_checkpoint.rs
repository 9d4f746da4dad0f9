//! Trains briefly, saves a checkpoint with its transition matrices, reloads
//! it and evaluates the deep head on the target split, writing PGM prediction
//! maps next to the metrics.
//!
//! Run with: cargo run --release --example evaluate_checkpoint

use metacorr::harness::{labels_to_pgm, presets, run_training};
use metacorr::metrics;
use metacorr::models;
use metacorr::synth::Dataset;
use metacorr::train::Method;
use metacorr::ParamSet;

fn main() {
    let mut cfg = presets::standard_benchmark();
    cfg.steps = 400;
    let data = Dataset::generate(&cfg.dataset_config()).unwrap();
    let art = run_training(&cfg, &data, Method::SelfTraining, 0).unwrap();

    let dir = std::env::temp_dir().join("metacorr_example_checkpoint");
    let mut params = art.outcome.net.params.clone();
    params.insert("ntm.level0", art.outcome.ntms[0].t.clone()).unwrap();
    params.insert("ntm.level1", art.outcome.ntms[1].t.clone()).unwrap();
    models::save_checkpoint(&dir, &params).unwrap();
    println!("checkpoint written to {}", dir.display());

    let loaded = models::load_checkpoint(&dir).unwrap();
    let mut seg = ParamSet::new();
    for (name, value) in loaded.iter() {
        if name.starts_with("seg.") {
            seg.insert(name, value.clone()).unwrap();
        }
    }

    let (h, w, classes) = (cfg.h, cfg.w, cfg.classes);
    let mut cm = metrics::ConfusionMatrix::zero(classes);
    for (i, img) in data.target.iter().enumerate() {
        let (deep, _) = models::forward_seg(&seg, &img.pixels, h, w).unwrap();
        let pred = models::argmax_labels(&deep, h, w);
        cm.merge(&metrics::confusion_vs_truth(&pred, &img.truth, classes).unwrap());
        if i < 4 {
            let path = dir.join(format!("pred_{i:03}.pgm"));
            std::fs::write(&path, labels_to_pgm(&pred, classes)).unwrap();
        }
    }

    println!("target evaluation of the reloaded checkpoint:");
    for (k, iou) in metrics::iou_per_class(&cm).iter().enumerate() {
        match iou {
            Some(v) => println!("  class {k}: IoU {v:.4}, Dice {:.4}", metrics::dice(&cm, k)),
            None => println!("  class {k}: absent"),
        }
    }
    println!("  mIoU {:.4}", metrics::miou(&cm).unwrap());
    println!("  pixel accuracy {:.4}", cm.accuracy());
    println!("wrote 4 PGM prediction maps next to the checkpoint");
}
