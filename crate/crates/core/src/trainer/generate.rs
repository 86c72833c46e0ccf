use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{quantize, DomainDataset, LabeledImage};
use crate::error::{Error, Result};
use crate::networks::Generator;
use crate::ssim::{mean_ssim, SsimConfig};
use crate::tensor::{BnMode, Tensor};

/// How source images are mapped into the intermediate domain.
pub enum Translator<'a> {
    /// Copies every image unchanged.
    Identity,
    Generator(&'a mut Generator, BnMode),
}

impl Translator<'_> {
    fn apply(&mut self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Translator::Identity => Ok(img.clone()),
            Translator::Generator(g, mode) => {
                let want = [g.cfg.in_channels, g.cfg.image_size, g.cfg.image_size];
                if img.shape() != want {
                    return Err(Error::config(
                        "generator.image_size",
                        format!("image of shape {:?}, the generator expects {want:?}", img.shape()),
                    ));
                }
                let batch = img.clone().reshape(&[1, want[0], want[1], want[2]])?;
                g.translate(&batch, *mode)?.reshape(&want)
            }
        }
    }
}

/// Links a generated image to its source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generated_id: String,
    pub source_id: String,
    /// Mean SSIM between the source and the generated image.
    pub mean_ssim: f64,
}

/// Translates every image of `x` one at a time. Each output keeps its
/// source's id and label and is quantized to integer pixels, as saving would.
pub fn generate_intermediate(
    mut translator: Translator<'_>,
    x: &DomainDataset,
    ssim: &SsimConfig,
) -> Result<(DomainDataset, Vec<Provenance>)> {
    x.require_non_empty()?;
    let mut images = Vec::with_capacity(x.len());
    let mut prov = Vec::with_capacity(x.len());
    for img in &x.images {
        let out = quantize(&translator.apply(&img.pixels)?);
        prov.push(Provenance {
            generated_id: img.id.clone(),
            source_id: img.id.clone(),
            mean_ssim: mean_ssim(&img.pixels, &out, ssim)?,
        });
        images.push(LabeledImage {
            id: img.id.clone(),
            label: img.label,
            pixels: out,
        });
    }
    let z = DomainDataset::new(format!("{}_intermediate", x.name), images, x.n_classes)?;
    Ok((z, prov))
}

pub fn write_provenance(path: &Path, rows: &[Provenance]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_provenance(path: &Path) -> Result<Vec<Provenance>> {
    if !path.is_file() {
        return Err(Error::MissingProvenance(format!("{} not found", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
