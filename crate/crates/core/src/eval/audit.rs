use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::classifier::{train_classifier, Classifier, ClassifierTraining};
use crate::data::{DomainDataset, LabeledImage, PIXEL_MAX};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::trainer::Provenance;

/// Largest noise standard deviation added to oracle training images.
pub const ORACLE_NOISE_MAX: f64 = 16.0;

/// Collapses color: per-pixel maximum over channels, then a min-max stretch
/// to `[0, 255]`. The result is `[1, h, w]`.
pub fn canonicalize(px: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (px.shape()[0], px.shape()[1], px.shape()[2]);
    let plane = h * w;
    let d = px.data();
    let gray: Vec<f32> = (0..plane)
        .map(|i| (0..c).map(|ch| d[ch * plane + i]).fold(f32::MIN, f32::max))
        .collect();
    let lo = gray.iter().copied().fold(f32::MAX, f32::min);
    let hi = gray.iter().copied().fold(f32::MIN, f32::max);
    let span = hi - lo;
    let data = if span > 0.0 {
        gray.iter().map(|v| (v - lo) / span * PIXEL_MAX).collect()
    } else {
        vec![0.0; plane]
    };
    Tensor::new(vec![1, h, w], data).expect("one plane")
}

fn canonical_dataset(ds: &DomainDataset) -> Result<DomainDataset> {
    let images = ds
        .images
        .iter()
        .map(|img| LabeledImage {
            id: img.id.clone(),
            label: img.label,
            pixels: canonicalize(&img.pixels),
        })
        .collect();
    DomainDataset::new(ds.name.clone(), images, ds.n_classes)
}

/// A color-blind digit classifier standing in for a human label check.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub classifier: Classifier,
}

impl Oracle {
    /// Trains on `base` plus a copy with Gaussian noise of a random standard
    /// deviation up to [`ORACLE_NOISE_MAX`], all canonicalized.
    pub fn train(base: &DomainDataset, epochs: usize, seed: u64) -> Result<Self> {
        let root = RngState::new(seed);
        let mut images = Vec::with_capacity(2 * base.len());
        for img in &base.images {
            let mut rng = root.derive_str("noise").derive_str(&img.id);
            let sigma = ORACLE_NOISE_MAX * rand::Rng::gen::<f64>(&mut rng);
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            let mut noisy = img.pixels.clone();
            for v in noisy.data_mut() {
                *v = (f64::from(*v) + normal.sample(&mut rng)).clamp(0.0, 255.0) as f32;
            }
            images.push(LabeledImage {
                id: img.id.clone(),
                label: img.label,
                pixels: canonicalize(&img.pixels),
            });
            images.push(LabeledImage {
                id: format!("{}#noisy", img.id),
                label: img.label,
                pixels: canonicalize(&noisy),
            });
        }
        let ds = DomainDataset::new(format!("{}_oracle", base.name), images, base.n_classes)?;
        let classifier = train_classifier(
            &ds,
            &ClassifierTraining {
                epochs,
                lr: 0.001,
                batch_size: 32,
                seed: root.derive_str("classifier").seed,
            },
        )?;
        Ok(Oracle { classifier })
    }

    pub fn predict(&self, ds: &DomainDataset) -> Result<Vec<usize>> {
        self.classifier.predict(&canonical_dataset(ds)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditMode {
    /// Re-classify generated images with an [`Oracle`].
    GroundTruth,
    /// Flag pairs whose mean SSIM is below a threshold.
    SsimProxy,
}

impl FromStr for AuditMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(AuditMode::GroundTruth),
            "ssim_proxy" => Ok(AuditMode::SsimProxy),
            other => Err(Error::config(
                "mode",
                format!("{other:?}: expected ground_truth or ssim_proxy"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub id: String,
    pub carried_label: usize,
    pub oracle_label: Option<usize>,
    pub mean_ssim: f64,
    pub suspect: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub mode: AuditMode,
    pub threshold: f64,
    pub retention: f64,
    pub rows: Vec<RetentionRow>,
}

impl RetentionReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Measures how many images of `z` still show the class they carry. Every
/// generated image must be linked by `provenance` to an image of `x`.
/// `oracle` is required in ground-truth mode.
pub fn label_retention_audit(
    x: &DomainDataset,
    z: &DomainDataset,
    provenance: &[Provenance],
    mode: AuditMode,
    threshold: f64,
    oracle: Option<&Oracle>,
) -> Result<RetentionReport> {
    z.require_non_empty()?;
    if x.len() != z.len() {
        return Err(Error::Invalid(format!(
            "{} source images but {} generated images",
            x.len(),
            z.len()
        )));
    }
    let links: HashMap<&str, &Provenance> = provenance.iter().map(|p| (p.generated_id.as_str(), p)).collect();
    let sources: HashSet<&str> = x.images.iter().map(|i| i.id.as_str()).collect();
    let mut rows = Vec::with_capacity(z.len());
    for img in &z.images {
        let p = links
            .get(img.id.as_str())
            .ok_or_else(|| Error::MissingProvenance(img.id.clone()))?;
        if !sources.contains(p.source_id.as_str()) {
            return Err(Error::MissingProvenance(format!(
                "{}: source {} is not in the source set",
                img.id, p.source_id
            )));
        }
        rows.push(RetentionRow {
            id: img.id.clone(),
            carried_label: img.label,
            oracle_label: None,
            mean_ssim: p.mean_ssim,
            suspect: p.mean_ssim < threshold,
        });
    }
    let n = rows.len() as f64;
    let retention = match mode {
        AuditMode::GroundTruth => {
            let oracle =
                oracle.ok_or_else(|| Error::config("mode", "ground_truth needs an oracle classifier"))?;
            let pred = oracle.predict(z)?;
            for (r, p) in rows.iter_mut().zip(pred) {
                r.oracle_label = Some(p);
            }
            rows.iter().filter(|r| r.oracle_label == Some(r.carried_label)).count() as f64 / n
        }
        AuditMode::SsimProxy => 1.0 - rows.iter().filter(|r| r.suspect).count() as f64 / n,
    };
    Ok(RetentionReport {
        mode,
        threshold,
        retention,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_ignores_color_and_contrast() {
        let mut red = Tensor::zeros(&[3, 4, 4]);
        let mut green = Tensor::zeros(&[3, 4, 4]);
        for i in [1, 5, 6] {
            red.data_mut()[i] = 200.0;
            green.data_mut()[16 + i] = 90.0;
        }
        assert_eq!(canonicalize(&red), canonicalize(&green));
        assert_eq!(canonicalize(&red).data()[5], 255.0);
        assert_eq!(canonicalize(&Tensor::full(&[3, 2, 2], 7.0)), Tensor::zeros(&[1, 2, 2]));
    }

    #[test]
    fn mode_parses() {
        assert_eq!("ssim_proxy".parse::<AuditMode>().unwrap(), AuditMode::SsimProxy);
        assert!("manual".parse::<AuditMode>().is_err());
    }
}
