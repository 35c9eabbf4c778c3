//! Dataset export and import.
//!
//! Layout: `<root>/dataset.json` with split-level metadata, and per split a
//! directory holding `manifest.jsonl` plus one image file per sample. Images
//! are raw little-endian `f32` (`.f32`, channel-major `3×64×64`) or PNG.

use super::augment::resize;
use super::splits::{inverse_frequency_weights, Dataset, NormStats, Split, Splits};
use super::synth::{Sample, CHANNELS, IMAGE_SIZE, PIXELS};
use crate::taxonomy::{DamageLabel, DamageType, Severity, NUM_CLASSES};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Record { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub class_index: usize,
    #[serde(rename = "type")]
    pub damage_type: String,
    pub severity: String,
    pub severity_scalar: f64,
    pub description: String,
    /// Relative to the split directory.
    pub file: String,
}

impl ManifestRecord {
    pub fn of(sample: &Sample) -> Self {
        ManifestRecord {
            id: sample.id,
            class_index: sample.label.class_index,
            damage_type: sample.label.damage_type.name().to_string(),
            severity: sample.label.severity.name().to_string(),
            severity_scalar: sample.severity_scalar,
            description: sample.description.clone(),
            file: format!("{:016x}.f32", sample.id),
        }
    }

    fn label(&self) -> Result<DamageLabel, String> {
        let label = DamageLabel::from_class(self.class_index).ok_or_else(|| format!("class_index {} out of range", self.class_index))?;
        if DamageType::parse(&self.damage_type) != Some(label.damage_type) {
            return Err(format!("type {} does not match class {}", self.damage_type, label.name()));
        }
        if Severity::parse(&self.severity) != Some(label.severity) {
            return Err(format!("severity {} does not match class {}", self.severity, label.name()));
        }
        Ok(label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub counts: [[usize; NUM_CLASSES]; 3],
    pub class_weights: [f64; NUM_CLASSES],
    pub norm: NormStats,
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<(), DataError> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io(path))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>, DataError> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() % 4 != 0 {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            msg: format!("{} bytes is not a whole number of f32 values", bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Decode a PNG to channel-major RGB in `[0, 1]`, resized to 64×64.
pub fn read_png(path: &Path) -> Result<Vec<f32>, DataError> {
    let err = |msg: String| DataError::Image {
        path: path.to_path_buf(),
        msg,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    // Centre square crop, then resize.
    let side = w.min(h);
    let (ox, oy) = ((w - side) / 2, (h - side) / 2);
    let s = side as usize;
    let mut planar = vec![0.0f32; CHANNELS * s * s];
    for y in 0..s {
        for x in 0..s {
            let p = img.get_pixel(ox + x as u32, oy + y as u32);
            for c in 0..CHANNELS {
                planar[c * s * s + y * s + x] = p[c] as f32 / 255.0;
            }
        }
    }
    Ok(resize(&planar, s, IMAGE_SIZE))
}

fn load_image(path: &Path) -> Result<Vec<f32>, DataError> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("png") | Some("PNG") => read_png(path)?,
        _ => read_f32(path)?,
    };
    if img.len() != PIXELS {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            msg: format!("expected {PIXELS} values, found {}", img.len()),
        });
    }
    Ok(img)
}

pub fn write_split(dir: &Path, data: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join("manifest.jsonl");
    let mut out = std::io::BufWriter::new(fs::File::create(&path).map_err(io(&path))?);
    for s in &data.samples {
        let rec = ManifestRecord::of(s);
        write_f32(&dir.join(&rec.file), &s.image)?;
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(out, "{line}").map_err(io(&path))?;
    }
    out.flush().map_err(io(&path))
}

pub fn read_split(dir: &Path) -> Result<Dataset, DataError> {
    let path = dir.join("manifest.jsonl");
    let file = fs::File::open(&path).map_err(io(&path))?;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| DataError::Record {
            path: path.clone(),
            line: n + 1,
            msg,
        };
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let label = rec.label().map_err(bad)?;
        samples.push(Sample {
            id: rec.id,
            image: load_image(&dir.join(&rec.file))?,
            label,
            severity_scalar: rec.severity_scalar,
            description: rec.description,
        });
    }
    Ok(Dataset { samples })
}

/// Write all splits and `dataset.json`; returns every file written.
pub fn export(root: &Path, splits: &Splits) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(root).map_err(io(root))?;
    let mut written = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = root.join(split.name());
        write_split(&dir, splits.get(split))?;
        written.push(dir.join("manifest.jsonl"));
    }
    let meta = DatasetMeta {
        seed: splits.seed,
        counts: [splits.train.class_counts(), splits.val.class_counts(), splits.test.class_counts()],
        class_weights: splits.class_weights,
        norm: splits.norm,
    };
    let path = root.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(io(&path))?;
    written.push(path);
    Ok(written)
}

/// Load a dataset directory. Without `dataset.json` (a directory of real
/// images), weights and normalisation come from the loaded training split.
pub fn import(root: &Path) -> Result<Splits, DataError> {
    let train = read_split(&root.join("train"))?;
    let val = read_split(&root.join("val"))?;
    let test = read_split(&root.join("test"))?;
    let meta_path = root.join("dataset.json");
    let (seed, class_weights, norm) = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(io(&meta_path))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DataError::Record {
            path: meta_path.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        (meta.seed, meta.class_weights, meta.norm)
    } else {
        let norm = NormStats::from_images(train.samples.iter().map(|s| s.image.as_slice()));
        (0, inverse_frequency_weights(&train.class_counts()), norm)
    };
    Ok(Splits {
        train,
        val,
        test,
        class_weights,
        norm,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::splits::{make_splits, SplitCounts};

    #[test]
    fn export_import_round_trip() {
        let splits = make_splits(&SplitCounts::default().scaled(0.05), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export(dir.path(), &splits).unwrap();
        assert_eq!(files.len(), 4);
        assert_eq!(import(dir.path()).unwrap(), splits);
    }

    #[test]
    fn export_is_deterministic() {
        let splits = make_splits(&SplitCounts::default().scaled(0.05), 11).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        export(a.path(), &splits).unwrap();
        export(b.path(), &splits).unwrap();
        for f in ["train/manifest.jsonl", "test/manifest.jsonl", "dataset.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn mismatched_record_is_reported_with_line() {
        let splits = make_splits(&SplitCounts::default().scaled(0.05), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(dir.path(), &splits).unwrap();
        let path = dir.path().join("val/manifest.jsonl");
        let text = fs::read_to_string(&path).unwrap().replacen("\"class_index\":0", "\"class_index\":9", 1);
        fs::write(&path, text).unwrap();
        match import(dir.path()) {
            Err(DataError::Record { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn png_directory_without_metadata() {
        let dir = tempfile::tempdir().unwrap();
        for split in ["train", "val", "test"] {
            let d = dir.path().join(split);
            fs::create_dir_all(&d).unwrap();
            let img = image::RgbImage::from_fn(80, 64, |x, _| image::Rgb([(x * 3) as u8, 128, 0]));
            img.save(d.join("a.png")).unwrap();
            let rec = ManifestRecord {
                id: 1,
                class_index: 9,
                damage_type: "Compression".into(),
                severity: "None".into(),
                severity_scalar: 0.5,
                description: "compression set".into(),
                file: "a.png".into(),
            };
            fs::write(d.join("manifest.jsonl"), serde_json::to_string(&rec).unwrap() + "\n").unwrap();
        }
        let s = import(dir.path()).unwrap();
        assert_eq!(s.train.len(), 1);
        assert_eq!(s.train.samples[0].image.len(), PIXELS);
        let g = s.train.samples[0].image[IMAGE_SIZE * IMAGE_SIZE + 10];
        assert!((g - 128.0 / 255.0).abs() < 1e-6);
    }
}
