//! Labeled image domains, their on-disk layout, and batching.
//!
//! A dataset directory holds `images/` and a `labels.csv` with columns
//! `filename,label`. Image ids are the filenames and keep CSV order.

mod augment;
mod bias;
mod digits;
mod image_io;

pub use augment::{augment, draw_augmentation, preprocess, preprocess_all, resize_bilinear, rotate, ROTATION_DEGREES};
pub use bias::{hsv_to_rgb, rgb_to_hsv, synth_biased_pair, Background, BiasSpec, SynthPair};
pub use digits::render_digits;
pub use image_io::{read_image, write_ppm};

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const PIXEL_MAX: f32 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub label: usize,
    /// `[c, h, w]` with values in `[0, 255]`.
    pub pixels: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub images: Vec<LabeledImage>,
    pub n_classes: usize,
}

impl DomainDataset {
    /// Checks unique ids and `label < n_classes`.
    pub fn new(name: impl Into<String>, images: Vec<LabeledImage>, n_classes: usize) -> Result<Self> {
        let name = name.into();
        let mut seen = HashSet::new();
        for img in &images {
            if !seen.insert(img.id.as_str()) {
                return Err(Error::Invalid(format!("dataset {name:?}: duplicate id {:?}", img.id)));
            }
            if img.label >= n_classes {
                return Err(Error::ClassSpace {
                    expected: n_classes,
                    found: img.label,
                });
            }
        }
        Ok(DomainDataset {
            name,
            images,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    /// Count per class, indexed by label.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for img in &self.images {
            h[img.label] += 1;
        }
        h
    }

    /// Shape `[c, h, w]` shared by every image, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        let first = self.images.first()?.pixels.shape();
        self.images
            .iter()
            .all(|i| i.pixels.shape() == first)
            .then_some(first)
    }

    /// Stacks the selected images into `[n, c, h, w]`.
    pub fn stack(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.images[i].pixels).collect();
        Tensor::stack(&items)
    }

    pub fn require_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset {
                name: self.name.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct LabelRow {
    filename: String,
    label: String,
}

/// Reads a dataset directory. The dataset is named after the directory.
pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let csv_path = dir.join("labels.csv");
    let text = fs::read_to_string(&csv_path)?;
    let mut images = Vec::new();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let label: usize = row.label.parse().map_err(|_| Error::BadLabel {
            row: row_no,
            value: row.label.clone(),
        })?;
        let candidates = [dir.join("images").join(&row.filename), dir.join(&row.filename)];
        let path = candidates
            .iter()
            .find(|p| p.is_file())
            .ok_or_else(|| Error::MissingFile {
                row: row_no,
                file: candidates[0].clone(),
            })?;
        let pixels = read_image(path).map_err(|e| Error::UnreadableImage {
            row: row_no,
            file: path.clone(),
            reason: e.to_string(),
        })?;
        images.push(LabeledImage {
            id: row.filename,
            label,
            pixels,
        });
    }
    let n_classes = images.iter().map(|i| i.label + 1).max().unwrap_or(0);
    DomainDataset::new(name, images, n_classes)
}

/// Writes `images/<id>` as binary PPM plus `labels.csv`. Pixels are rounded
/// and clamped to `u8`.
pub fn save_dataset(ds: &DomainDataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record(["filename", "label"])?;
    for img in &ds.images {
        write_ppm(&img_dir.join(&img.id), &img.pixels)?;
        w.write_record([img.id.as_str(), &img.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Rounds and clamps every pixel to an integer in `[0, 255]`, as a save and
/// reload would.
pub fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.round().clamp(0.0, PIXEL_MAX))
}

/// Per-class counts of several datasets added together.
pub fn combined_histogram(sets: &[&DomainDataset]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for ds in sets {
        for img in &ds.images {
            *h.entry(img.label).or_insert(0) += 1;
        }
    }
    h
}

/// Shuffled index batches covering `0..n` once; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pixels: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

/// One shuffled epoch of batches.
pub fn batches<'a>(
    ds: &'a DomainDataset,
    batch_size: usize,
    rng: &mut RngState,
) -> impl Iterator<Item = Batch> + 'a {
    batch_indices(ds.len(), batch_size, rng)
        .into_iter()
        .map(move |idx| Batch {
            pixels: ds.stack(&idx).expect("images of one dataset share a shape"),
            labels: idx.iter().map(|&i| ds.images[i].label).collect(),
            ids: idx.iter().map(|&i| ds.images[i].id.clone()).collect(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> DomainDataset {
        let images = (0..n)
            .map(|i| LabeledImage {
                id: format!("{i:03}.ppm"),
                label: i % 3,
                pixels: Tensor::full(&[3, 2, 2], i as f32),
            })
            .collect();
        DomainDataset::new("tiny", images, 3).unwrap()
    }

    #[test]
    fn batch_sizes_and_partition() {
        let ds = tiny(10);
        let mut rng = RngState::new(1);
        let sizes: Vec<usize> = batches(&ds, 3, &mut rng).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, [3, 3, 3, 1]);
        let mut ids: Vec<String> = batches(&ds, 3, &mut rng).flat_map(|b| b.ids).collect();
        ids.sort();
        let mut all: Vec<String> = ds.images.iter().map(|i| i.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
    }

    #[test]
    fn same_seed_same_order() {
        let a = batch_indices(20, 4, &mut RngState::new(9));
        let b = batch_indices(20, 4, &mut RngState::new(9));
        let c = batch_indices(20, 4, &mut RngState::new(10));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_duplicates_and_bad_labels() {
        let mut ds = tiny(2);
        ds.images[1].id = ds.images[0].id.clone();
        assert!(DomainDataset::new("d", ds.images.clone(), 3).is_err());
        let ds = tiny(3);
        assert!(DomainDataset::new("d", ds.images, 2).is_err());
    }

    #[test]
    fn quantize_rounds_and_clamps() {
        let t = Tensor::from_vec(vec![-3.0, 1.4, 1.6, 300.0]);
        assert_eq!(quantize(&t).data(), &[0.0, 1.0, 2.0, 255.0]);
    }
}
