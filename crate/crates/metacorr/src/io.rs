//! Flat binary array files with JSON manifests.
//!
//! Checkpoints and datasets share the same convention: little-endian f64 (or
//! raw u8 for labels) payloads, plus a manifest listing names and shapes so
//! files are self-describing.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, ParamSet};
use crate::metrics::Quarantined;
use crate::synth::{DataError, Dataset, DatasetConfig, LabeledImage, Labels, TargetImage};

pub fn write_f64s(path: &Path, values: &[f64]) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for v in values {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()
}

pub fn read_f64s(path: &Path) -> std::io::Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{} has {} bytes, not a multiple of 8", path.display(), bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ParamManifest {
    entries: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `params.bin` (values concatenated in name order) and
/// `manifest.json` into `dir`.
pub fn save_params(dir: &Path, params: &ParamSet) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut flat = Vec::with_capacity(params.total_len());
    for (name, value) in params.iter() {
        entries.push(ParamEntry { name: name.clone(), shape: value.shape().to_vec() });
        flat.extend_from_slice(value.data());
    }
    write_f64s(&dir.join("params.bin"), &flat)?;
    let manifest = serde_json::to_string_pretty(&ParamManifest { entries })
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<ParamSet, DataError> {
    let manifest: ParamManifest = {
        let mut text = String::new();
        fs::File::open(dir.join("manifest.json"))?.read_to_string(&mut text)?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?
    };
    let flat = read_f64s(&dir.join("params.bin"))?;
    let mut params = ParamSet::new();
    let mut offset = 0usize;
    for entry in manifest.entries {
        let n: usize = entry.shape.iter().product();
        if offset + n > flat.len() {
            return Err(DataError::Manifest(format!(
                "params.bin too short for entry '{}'",
                entry.name
            )));
        }
        let arr = Array::from_vec(&entry.shape, flat[offset..offset + n].to_vec())
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        params
            .insert(&entry.name, arr)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        offset += n;
    }
    if offset != flat.len() {
        return Err(DataError::Manifest(format!(
            "params.bin has {} extra values",
            flat.len() - offset
        )));
    }
    Ok(params)
}

// ── dataset directories ──────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    config: DatasetConfig,
    images_per_domain: usize,
    pixel_shape: Vec<usize>,
    label_shape: Vec<usize>,
    files: DatasetFiles,
}

#[derive(Serialize, Deserialize)]
struct DatasetFiles {
    source_pixels: String,
    source_labels: String,
    source_invariant: String,
    target_pixels: String,
    target_labels: String,
}

impl DatasetFiles {
    fn standard() -> Self {
        DatasetFiles {
            source_pixels: "source_pixels.bin".into(),
            source_labels: "source_labels.bin".into(),
            source_invariant: "source_invariant.bin".into(),
            target_pixels: "target_pixels.bin".into(),
            target_labels: "target_labels.bin".into(),
        }
    }
}

/// Writes a dataset as flat binary arrays plus a JSON manifest. Pixels are
/// little-endian f64 (`images * h * w * 3 * 8` bytes per domain), labels and
/// the invariant mask are raw u8.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let files = DatasetFiles::standard();
    let cfg = &data.config;

    let mut src_pixels = Vec::new();
    let mut src_labels = Vec::new();
    let mut src_mask = Vec::new();
    for img in &data.source {
        src_pixels.extend_from_slice(img.pixels.data());
        src_labels.extend_from_slice(&img.labels.ids);
        let mask = img.invariant_mask.as_ref().expect("source images carry masks");
        src_mask.extend(mask.iter().map(|&m| m as u8));
    }
    write_f64s(&dir.join(&files.source_pixels), &src_pixels)?;
    fs::write(dir.join(&files.source_labels), &src_labels)?;
    fs::write(dir.join(&files.source_invariant), &src_mask)?;

    let mut tgt_pixels = Vec::new();
    for img in &data.target {
        tgt_pixels.extend_from_slice(img.pixels.data());
    }
    write_f64s(&dir.join(&files.target_pixels), &tgt_pixels)?;
    let mut tgt_labels = std::io::BufWriter::new(fs::File::create(dir.join(&files.target_labels))?);
    for img in &data.target {
        img.truth.write_ids_to(&mut tgt_labels)?;
    }
    tgt_labels.flush()?;

    let manifest = DatasetManifest {
        config: cfg.clone(),
        images_per_domain: cfg.images_per_domain,
        pixel_shape: vec![cfg.images_per_domain, cfg.h, cfg.w, 3],
        label_shape: vec![cfg.images_per_domain, cfg.h, cfg.w],
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

/// Loads a dataset directory; target labels go straight back into quarantine.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest: DatasetManifest = {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?
    };
    let cfg = manifest.config;
    let (h, w, n_images) = (cfg.h, cfg.w, cfg.images_per_domain);
    let pixels_per_image = h * w;

    let src_pixels = read_f64s(&dir.join(&manifest.files.source_pixels))?;
    let src_labels = fs::read(dir.join(&manifest.files.source_labels))?;
    let src_mask = fs::read(dir.join(&manifest.files.source_invariant))?;
    let tgt_pixels = read_f64s(&dir.join(&manifest.files.target_pixels))?;
    let tgt_labels = fs::read(dir.join(&manifest.files.target_labels))?;

    let expect = n_images * pixels_per_image;
    if src_pixels.len() != expect * 3 || tgt_pixels.len() != expect * 3 {
        return Err(DataError::Manifest("pixel payload does not match manifest".into()));
    }
    if src_labels.len() != expect || tgt_labels.len() != expect || src_mask.len() != expect {
        return Err(DataError::Manifest("label payload does not match manifest".into()));
    }

    let mut source = Vec::with_capacity(n_images);
    let mut target = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let p0 = i * pixels_per_image * 3;
        let l0 = i * pixels_per_image;
        source.push(LabeledImage {
            pixels: Array::from_vec(&[pixels_per_image, 3], src_pixels[p0..p0 + pixels_per_image * 3].to_vec())
                .map_err(|e| DataError::Manifest(e.to_string()))?,
            labels: Labels::new(h, w, src_labels[l0..l0 + pixels_per_image].to_vec()),
            domain: crate::synth::Domain::Source,
            invariant_mask: Some(src_mask[l0..l0 + pixels_per_image].iter().map(|&b| b != 0).collect()),
        });
        target.push(TargetImage {
            pixels: Array::from_vec(&[pixels_per_image, 3], tgt_pixels[p0..p0 + pixels_per_image * 3].to_vec())
                .map_err(|e| DataError::Manifest(e.to_string()))?,
            truth: Quarantined::seal(Labels::new(h, w, tgt_labels[l0..l0 + pixels_per_image].to_vec())),
        });
    }
    Ok(Dataset { config: cfg, source, target })
}
