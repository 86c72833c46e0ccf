use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainDataset, LabeledImage, PIXEL_MAX};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    None,
    Stripes,
    Checker,
    Grain,
}

impl Background {
    fn name(self) -> &'static str {
        match self {
            Background::None => "none",
            Background::Stripes => "stripes",
            Background::Checker => "checker",
            Background::Grain => "grain",
        }
    }
}

/// A low-level, label-preserving appearance change: hue rotation, background
/// texture, contrast about mid-gray, and additive Gaussian noise, applied in
/// that order and rounded to integer pixels.
///
/// The text form is a comma separated `key=value` list, e.g.
/// `hue=120,noise=8,bg=stripes,contrast=0.8,seed=3`; `none` is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasSpec {
    pub hue_shift: f64,
    pub noise_sigma: f64,
    pub background: Background,
    pub contrast: f64,
    pub seed: u64,
}

impl Default for BiasSpec {
    fn default() -> Self {
        BiasSpec {
            hue_shift: 0.0,
            noise_sigma: 0.0,
            background: Background::None,
            contrast: 1.0,
            seed: 0,
        }
    }
}

impl FromStr for BiasSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = BiasSpec::default();
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(spec);
        }
        for part in s.split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config("bias", format!("expected key=value, got {part:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::config(format!("bias.{key}"), format!("not a number: {v:?}")))
            };
            match key {
                "hue" => spec.hue_shift = num(value)?,
                "noise" => {
                    spec.noise_sigma = num(value)?;
                    if spec.noise_sigma < 0.0 {
                        return Err(Error::config("bias.noise", "must be >= 0"));
                    }
                }
                "contrast" => {
                    spec.contrast = num(value)?;
                    if spec.contrast < 0.0 {
                        return Err(Error::config("bias.contrast", "must be >= 0"));
                    }
                }
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| Error::config("bias.seed", format!("not an integer: {value:?}")))?
                }
                "bg" => {
                    spec.background = match value {
                        "none" => Background::None,
                        "stripes" => Background::Stripes,
                        "checker" => Background::Checker,
                        "grain" => Background::Grain,
                        other => {
                            return Err(Error::config(
                                "bias.bg",
                                format!("unknown texture {other:?} (none|stripes|checker|grain)"),
                            ))
                        }
                    }
                }
                other => return Err(Error::config("bias", format!("unknown key {other:?}"))),
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for BiasSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "hue={},noise={},bg={},contrast={},seed={}",
            self.hue_shift,
            self.noise_sigma,
            self.background.name(),
            self.contrast,
            self.seed
        )
    }
}

/// `(r, g, b)` in `[0, 255]` to hue in degrees `[0, 360)`, saturation and
/// value in `[0, 1]`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (r, g, b) = (r / 255.0, g / 255.0, b / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h.rem_euclid(360.0), s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    ((r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0)
}

fn texture(kind: Background, y: usize, x: usize, phase: usize, grain: f64) -> [f64; 3] {
    match kind {
        Background::None => [0.0; 3],
        Background::Stripes => {
            if (x + y + phase) % 6 < 3 {
                [40.0, 40.0, 110.0]
            } else {
                [10.0, 10.0, 30.0]
            }
        }
        Background::Checker => {
            if ((x + phase) / 4 + (y + phase) / 4) % 2 == 0 {
                [90.0; 3]
            } else {
                [30.0; 3]
            }
        }
        Background::Grain => [grain; 3],
    }
}

impl BiasSpec {
    pub fn is_identity(&self) -> bool {
        self.hue_shift.rem_euclid(360.0) == 0.0
            && self.noise_sigma == 0.0
            && self.background == Background::None
            && self.contrast == 1.0
    }

    /// Applies the bias to one 3-channel image. Randomness comes from
    /// `RngState::new(seed).derive_str(id)`, so the result depends only on
    /// the bias settings and the image.
    pub fn apply(&self, img: &LabeledImage) -> Result<LabeledImage> {
        let (h, w) = match img.pixels.shape() {
            &[3, h, w] => (h, w),
            s => return Err(Error::shape("bias", format!("expected [3, h, w], got {s:?}"))),
        };
        let mut rng = RngState::new(self.seed).derive_str(&img.id);
        let phase = rng.gen_range(0..12usize);
        let noise = Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let plane = h * w;
        let src = img.pixels.data();
        let mut out = vec![0.0f32; 3 * plane];
        for p in 0..plane {
            let (y, x) = (p / w, p % w);
            let mut rgb = [
                f64::from(src[p]),
                f64::from(src[plane + p]),
                f64::from(src[2 * plane + p]),
            ];
            if self.hue_shift != 0.0 {
                let (hh, s, v) = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
                let (r, g, b) = hsv_to_rgb(hh + self.hue_shift, s, v);
                rgb = [r, g, b];
            }
            if self.background != Background::None {
                let alpha = rgb.iter().cloned().fold(0.0, f64::max) / 255.0;
                let grain = rng.gen_range(0.0..80.0);
                let bg = texture(self.background, y, x, phase, grain);
                for c in 0..3 {
                    rgb[c] = alpha * rgb[c] + (1.0 - alpha) * bg[c];
                }
            }
            for c in 0..3 {
                let mut v = 127.5 + self.contrast * (rgb[c] - 127.5);
                if self.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                out[c * plane + p] = v.round().clamp(0.0, f64::from(PIXEL_MAX)) as f32;
            }
        }
        Ok(LabeledImage {
            id: img.id.clone(),
            label: img.label,
            pixels: Tensor::new(vec![3, h, w], out)?,
        })
    }

    pub fn apply_all(&self, ds: &DomainDataset, name: &str) -> Result<DomainDataset> {
        let images = ds.images.iter().map(|i| self.apply(i)).collect::<Result<Vec<_>>>()?;
        DomainDataset::new(name, images, ds.n_classes)
    }
}

/// Two biased domains cut from one labeled base set.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub x: DomainDataset,
    pub y: DomainDataset,
    /// `(domain, id, base id)` for every generated image.
    pub correspondence: Vec<(String, String, String)>,
}

/// Splits `base` per class into two disjoint halves (the odd image of a class
/// goes to `X`), then biases the halves with their specs. Ids are the base
/// ids. `seed` drives the split.
pub fn synth_biased_pair(
    base: &DomainDataset,
    source: &BiasSpec,
    target: &BiasSpec,
    seed: u64,
) -> Result<SynthPair> {
    let hist = base.histogram();
    if let Some((class, &n)) = hist.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(Error::DatasetTooSmall(format!(
            "class {class} has {n} image(s); each class needs at least 2"
        )));
    }
    if source == target {
        log::warn!("source and target bias specs are identical");
    }
    let mut rng = RngState::new(seed).derive_str("split");
    let mut in_x = vec![false; base.len()];
    for class in 0..base.n_classes {
        let mut members: Vec<usize> = (0..base.len()).filter(|&i| base.images[i].label == class).collect();
        members.shuffle(&mut rng);
        let half = members.len().div_ceil(2);
        for &i in &members[..half] {
            in_x[i] = true;
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut correspondence = Vec::new();
    for (i, img) in base.images.iter().enumerate() {
        let (spec, dom, list) = if in_x[i] {
            (source, "X", &mut xs)
        } else {
            (target, "Y", &mut ys)
        };
        list.push(spec.apply(img)?);
        correspondence.push((dom.to_string(), img.id.clone(), img.id.clone()));
    }
    Ok(SynthPair {
        x: DomainDataset::new("X", xs, base.n_classes)?,
        y: DomainDataset::new("Y", ys, base.n_classes)?,
        correspondence,
    })
}
