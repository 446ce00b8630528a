use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::scheme::{Label, SchemeParams};
use crate::seed::{rng_for, rng_from_seed};

const PIXEL_NOISE: f64 = 0.1;
const BACKGROUND: f64 = 0.15;
const BLOB_AMPLITUDE: f64 = 0.18;
const BLOB_SIGMA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("n_per_class must be at least 2, got {0}")]
    TooSmall(usize),
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("dataset image: {0}")]
    Image(#[from] ImageError),
}

/// Seeded blob images: class `k` is a Gaussian intensity bump at a
/// class-specific grid position over a flat background, plus i.i.d. pixel
/// noise, clamped to `[0, 1]`. Split 80/20 per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images: Vec<Image>,
    pub labels: Vec<Label>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    height: usize,
    width: usize,
    classes: usize,
    seed: u64,
    files: Vec<String>,
    labels: Vec<Label>,
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Blob center for class `k` on a roughly square grid of cells.
fn class_center(k: usize, classes: usize, height: usize, width: usize) -> (f64, f64) {
    let cols = (classes as f64).sqrt().ceil() as usize;
    let rows = classes.div_ceil(cols);
    let (r, c) = (k / cols, k % cols);
    (
        (r as f64 + 0.5) * height as f64 / rows as f64,
        (c as f64 + 0.5) * width as f64 / cols as f64,
    )
}

pub fn gen_dataset(
    seed: u64,
    n_per_class: usize,
    params: &SchemeParams,
) -> Result<SyntheticDataset, DatasetError> {
    if n_per_class < 2 {
        return Err(DatasetError::TooSmall(n_per_class));
    }
    let (h, w, classes) = (params.height, params.width, params.num_labels);
    let noise = Normal::new(0.0, PIXEL_NOISE).unwrap();
    let mut images = Vec::with_capacity(classes * n_per_class);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let n_test = ((n_per_class as f64) * 0.2).round().max(1.0) as usize;
    for k in 0..classes {
        let (cy, cx) = class_center(k, classes, h, w);
        let mut rng = rng_for("dataset", &[&seed.to_le_bytes(), &(k as u64).to_le_bytes()]);
        let first = images.len();
        for _ in 0..n_per_class {
            let mut pixels = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    let v = BACKGROUND
                        + BLOB_AMPLITUDE * (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp()
                        + noise.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            images.push(Image::new(h, w, pixels).unwrap());
            labels.push(Label(k as u32));
        }
        let mut idx: Vec<usize> = (first..first + n_per_class).collect();
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    let mut rng = rng_from_seed("dataset-order", seed);
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(SyntheticDataset {
        height: h,
        width: w,
        classes,
        images,
        labels,
        train,
        test,
        seed,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn train_pairs(&self) -> impl Iterator<Item = (&Image, Label)> {
        self.train
            .iter()
            .map(|&i| (&self.images[i], self.labels[i]))
    }

    pub fn test_pairs(&self) -> impl Iterator<Item = (&Image, Label)> {
        self.test.iter().map(|&i| (&self.images[i], self.labels[i]))
    }

    pub fn train_images(&self) -> Vec<Image> {
        self.train.iter().map(|&i| self.images[i].clone()).collect()
    }

    /// Writes one canonical image file per sample plus `manifest.json`.
    pub fn export(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.images.len());
        for (i, img) in self.images.iter().enumerate() {
            let name = format!("img_{i:05}.bin");
            fs::write(dir.join(&name), img.to_canonical_bytes())?;
            files.push(name);
        }
        let manifest = Manifest {
            height: self.height,
            width: self.width,
            classes: self.classes,
            seed: self.seed,
            files,
            labels: self.labels.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }

    /// Reads a directory written by [`SyntheticDataset::export`] or any
    /// producer following the same manifest layout.
    pub fn import(dir: &Path) -> Result<Self, DatasetError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let images = manifest
            .files
            .iter()
            .map(|f| -> Result<Image, DatasetError> {
                let img = Image::from_canonical_bytes(&fs::read(dir.join(f))?)?;
                img.check_dims(manifest.height, manifest.width)?;
                Ok(img)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            height: manifest.height,
            width: manifest.width,
            classes: manifest.classes,
            images,
            labels: manifest.labels,
            train: manifest.train,
            test: manifest.test,
            seed: manifest.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nearest class centroid, fitted on the train split.
    fn centroid_accuracy(ds: &SyntheticDataset) -> f64 {
        let dim = ds.height * ds.width;
        let mut sums = vec![vec![0.0f64; dim]; ds.classes];
        let mut counts = vec![0usize; ds.classes];
        for (img, l) in ds.train_pairs() {
            counts[l.value()] += 1;
            for (s, &p) in sums[l.value()].iter_mut().zip(img.pixels()) {
                *s += p as f64;
            }
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
        let correct = ds
            .test_pairs()
            .filter(|(img, l)| {
                let best = (0..ds.classes)
                    .min_by(|&a, &b| {
                        let da: f64 = sums[a]
                            .iter()
                            .zip(img.pixels())
                            .map(|(m, &p)| (m - p as f64).powi(2))
                            .sum();
                        let db: f64 = sums[b]
                            .iter()
                            .zip(img.pixels())
                            .map(|(m, &p)| (m - p as f64).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == l.value()
            })
            .count();
        correct as f64 / ds.test.len() as f64
    }

    #[test]
    fn deterministic_and_balanced() {
        let p = SchemeParams::default();
        let a = gen_dataset(5, 20, &p).unwrap();
        assert_eq!(a, gen_dataset(5, 20, &p).unwrap());
        assert_ne!(a.images, gen_dataset(6, 20, &p).unwrap().images);
        for k in 0..p.num_labels {
            assert_eq!(a.labels.iter().filter(|l| l.value() == k).count(), 20);
            let train_k = a
                .train
                .iter()
                .filter(|&&i| a.labels[i].value() == k)
                .count();
            assert_eq!(train_k, 16);
        }
        assert!(a.images.iter().all(|img| !img.has_outranged()));
    }

    #[test]
    fn split_is_a_partition() {
        let ds = gen_dataset(1, 7, &SchemeParams::default()).unwrap();
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn easy_for_nearest_centroid() {
        let ds = gen_dataset(2, 100, &SchemeParams::default()).unwrap();
        let acc = centroid_accuracy(&ds);
        assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn rejects_tiny() {
        assert!(matches!(
            gen_dataset(0, 1, &SchemeParams::default()),
            Err(DatasetError::TooSmall(1))
        ));
    }

    #[test]
    fn export_import_round_trip() {
        let ds = gen_dataset(3, 3, &SchemeParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.export(dir.path()).unwrap();
        assert_eq!(SyntheticDataset::import(dir.path()).unwrap(), ds);
    }
}
