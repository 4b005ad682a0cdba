//! Datasets: local image folders (any size, resized on load), procedural
//! toy sets, deterministic splits, and JSON-lines manifests.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corrupt::{corrupt, resize_bilinear, CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::image::{load_image, save_png, toy_images, ImageBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest row describing a clean/corrupted pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative path of the clean image inside the dataset directory.
    pub path: String,
    pub split: Split,
    pub corruption_kind: CorruptionKind,
    pub severity: f64,
    pub seed: u64,
}

/// In-memory dataset: clean images of one shape plus index splits.
pub struct Dataset {
    pub images: ImageBatch,
    pub names: Vec<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// 80/20 train/test, then 80/20 of train into train/val, after a seeded
    /// shuffle.
    pub fn from_images(images: ImageBatch, names: Vec<String>, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        let n = images.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let test_from = (n * 4) / 5;
        let trainval = &order[..test_from.max(1)];
        let val_from = (trainval.len() * 4) / 5;
        let train = trainval[..val_from.max(1)].to_vec();
        let val = if val_from < trainval.len() {
            trainval[val_from..].to_vec()
        } else {
            trainval[..1].to_vec()
        };
        let test = if test_from < n {
            order[test_from..].to_vec()
        } else {
            order[..1].to_vec()
        };
        Ok(Dataset { images, names, train, val, test })
    }

    /// Loads every PNG/PPM under `dir` (non-recursive, sorted by name),
    /// resizing each image to `(h, w)`.
    pub fn load_folder(dir: &Path, h: usize, w: usize, seed: u64) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("ppm") | Some("jpg") | Some("jpeg")
                )
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no images found in {}", dir.display())));
        }
        let mut resized = Vec::new();
        let mut names = Vec::new();
        for p in &paths {
            let img = load_image(p)?;
            let img = if img.height() != h || img.width() != w {
                resize_bilinear(&img, 0, h, w)
            } else {
                img
            };
            resized.push(img);
            names.push(
                p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string(),
            );
        }
        let refs: Vec<&ImageBatch> = resized.iter().collect();
        Dataset::from_images(ImageBatch::stack(&refs)?, names, seed)
    }

    /// The bundled procedural toy set.
    pub fn toy(count: usize, h: usize, w: usize, seed: u64) -> Result<Self> {
        let images = toy_images(count, h, w, seed);
        let names = (0..count).map(|i| format!("toy_{i:03}")).collect();
        Dataset::from_images(images, names, seed)
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, index: usize) -> Split {
        if self.train.contains(&index) {
            Split::Train
        } else if self.val.contains(&index) {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Per-sample corruption seed, stable across epochs so stored pairs can be
/// regenerated.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Writes clean/corrupted pairs plus `manifest.jsonl` into `out_dir`.
/// Validation/test images are corrupted at the fixed severity; training
/// rows record the same fixed severity (training-time curriculum regenerates
/// corruption on the fly).
pub fn write_dataset(
    dataset: &Dataset,
    out_dir: &Path,
    kind: CorruptionKind,
    severity: f64,
    base_seed: u64,
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(out_dir.join("clean"))?;
    std::fs::create_dir_all(out_dir.join("corrupted"))?;
    let mut entries = Vec::new();
    let mut manifest = std::fs::File::create(out_dir.join("manifest.jsonl"))?;
    for i in 0..dataset.images.len() {
        let name = format!("{}.png", dataset.names[i]);
        let clean_rel = format!("clean/{name}");
        let img = dataset.images.image(i);
        save_png(&img, 0, &out_dir.join(&clean_rel))?;
        let spec = CorruptionSpec { kind, severity, seed: sample_seed(base_seed, i) };
        let corrupted = corrupt(&img, &spec)?;
        save_png(&corrupted, 0, &out_dir.join(format!("corrupted/{name}")))?;
        let entry = ManifestEntry {
            path: clean_rel,
            split: dataset.split_of(i),
            corruption_kind: kind,
            severity,
            seed: spec.seed,
        };
        writeln!(manifest, "{}", serde_json::to_string(&entry).expect("serializable"))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Reads a dataset directory produced by [`write_dataset`].
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(dir.join("manifest.jsonl"))
        .map_err(|_| Error::Dataset(format!("{}: missing manifest.jsonl", dir.display())))?;
    let mut entries = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("bad manifest line: {e}")))?,
        );
    }
    Ok(entries)
}

/// Loads a manifest-described dataset back into memory with its recorded
/// splits, resizing to (h, w).
pub fn load_manifest_dataset(dir: &Path, h: usize, w: usize) -> Result<(Dataset, Vec<ManifestEntry>)> {
    let entries = read_manifest(dir)?;
    if entries.is_empty() {
        return Err(Error::Dataset("empty manifest".into()));
    }
    let mut images = Vec::new();
    let mut names = Vec::new();
    for e in &entries {
        let img = load_image(&dir.join(&e.path))?;
        let img = if img.height() != h || img.width() != w {
            resize_bilinear(&img, 0, h, w)
        } else {
            img
        };
        images.push(img);
        names.push(
            Path::new(&e.path)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string(),
        );
    }
    let refs: Vec<&ImageBatch> = images.iter().collect();
    let images = ImageBatch::stack(&refs)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match e.split {
            Split::Train => train.push(i),
            Split::Val => val.push(i),
            Split::Test => test.push(i),
        }
    }
    if train.is_empty() {
        return Err(Error::Dataset("manifest has no training rows".into()));
    }
    if val.is_empty() {
        val.push(train[0]);
    }
    if test.is_empty() {
        test.push(train[0]);
    }
    Ok((Dataset { images, names, train, val, test }, entries))
}
