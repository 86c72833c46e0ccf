use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes PPM, PGM or PNG into `[c, h, w]` with `c` 1 for grayscale, 3 otherwise.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::ImageFormat(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    let mut data = vec![0.0f32; c * h * w];
    for (i, &v) in raw.iter().enumerate() {
        let (p, ch) = (i / c, i % c);
        data[ch * h * w + p] = f32::from(v);
    }
    Tensor::new(vec![c, h, w], data)
}

/// Writes a `[c, h, w]` tensor (`c` 1 or 3) as binary PGM/PPM.
pub fn write_ppm(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match pixels.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        s => return Err(Error::ImageFormat(format!("cannot write image of shape {s:?}"))),
    };
    let mut raw = vec![0u8; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            raw[p * c + ch] = pixels.data()[ch * h * w + p].round().clamp(0.0, 255.0) as u8;
        }
    }
    let (subtype, color) = if c == 1 {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    } else {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    };
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(subtype)
        .write_image(&raw, w as u32, h as u32, color)
        .map_err(|e| Error::ImageFormat(e.to_string()))
}
