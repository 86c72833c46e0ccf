//! Differentiable structural similarity.
//!
//! The per-pixel map is built from windowed first and second moments:
//!
//! ```text
//! SSIM = (2 mu_a mu_b + C1)(2 cov_ab + C2) / ((mu_a^2 + mu_b^2 + C1)(var_a + var_b + C2))
//! ```
//!
//! with `C1 = (k1 L)^2`, `C2 = (k2 L)^2` and `L` the dynamic range. Window sums
//! use symmetric border extension, so every moment is a convex combination of
//! pixels and the map stays within `[-1, 1]`. Channels are treated
//! independently; the loss averages over them.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window: Window,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_size: 11,
            window: Window::Gaussian,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 255.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::config("ssim.window_size", "must be odd and positive"));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::config("ssim.gaussian_sigma", "must be > 0"));
        }
        for (name, k) in [("ssim.k1", self.k1), ("ssim.k2", self.k2)] {
            if !(k > 0.0 && k < 1.0) {
                return Err(Error::config(name, "must lie in (0, 1)"));
            }
        }
        if !(self.dynamic_range > 0.0) {
            return Err(Error::config("ssim.dynamic_range", "must be > 0"));
        }
        Ok(())
    }

    /// 1-D window profile; the 2-D window is its outer product and sums to 1.
    pub fn profile(&self) -> Vec<f64> {
        let n = self.window_size;
        let raw: Vec<f64> = match self.window {
            Window::Uniform => vec![1.0; n],
            Window::Gaussian => {
                let r = (n / 2) as f64;
                (0..n)
                    .map(|i| {
                        let d = i as f64 - r;
                        (-d * d / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp()
                    })
                    .collect()
            }
        };
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Per-pixel SSIM of two `[n, c, h, w]` images, recorded on `tape`.
pub fn ssim_map<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    cfg.validate()?;
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "ssim_map",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    if tape.shape(a).len() != 4 {
        return Err(Error::shape(
            "ssim_map",
            format!("images must be 4-D, got {:?}", tape.shape(a)),
        ));
    }
    let (h, w) = (tape.shape(a)[2], tape.shape(a)[3]);
    if cfg.window_size > h || cfg.window_size > w {
        return Err(Error::shape(
            "ssim_map",
            format!("window {} larger than image {h}x{w}", cfg.window_size),
        ));
    }
    let k: Vec<T> = cfg.profile().into_iter().map(T::c).collect();
    let c1 = T::c(cfg.c1());
    let c2 = T::c(cfg.c2());
    let two = T::c(2.0);

    let mu_a = tape.blur(a, &k)?;
    let mu_b = tape.blur(b, &k)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.blur(aa, &k)?;
    let e_bb = tape.blur(bb, &k)?;
    let e_ab = tape.blur(ab, &k)?;

    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let lum_num = tape.affine(mu_ab, two, c1)?;
    let cs_num = tape.affine(cov, two, c2)?;
    let num = tape.mul(lum_num, cs_num)?;
    let lum_den = tape.add(mu_aa, mu_bb)?;
    let lum_den = tape.affine(lum_den, T::one(), c1)?;
    let cs_den = tape.add(var_a, var_b)?;
    let cs_den = tape.affine(cs_den, T::one(), c2)?;
    let den = tape.mul(lum_den, cs_den)?;
    tape.div(num, den)
}

/// `lambda_ssim * mean(1 - SSIM)` over every pixel and channel of every pair.
///
/// With `lambda_ssim == 0` the result is a constant zero that is not
/// connected to the inputs.
pub fn ssim_loss<T: Real>(
    tape: &mut Tape<T>,
    pairs: &[(Var, Var)],
    cfg: &SsimConfig,
    lambda_ssim: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Invalid("ssim_loss needs at least one image pair".into()));
    }
    if lambda_ssim < 0.0 {
        return Err(Error::config("lambda_ssim", "must be >= 0"));
    }
    let shape = tape.shape(pairs[0].0).to_vec();
    for &(x, g) in pairs {
        if tape.shape(x) != shape.as_slice() || tape.shape(g) != shape.as_slice() {
            return Err(Error::shape("ssim_loss", "all pairs must share one shape"));
        }
    }
    if lambda_ssim == 0.0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut acc: Option<Var> = None;
    for &(x, g) in pairs {
        let map = ssim_map(tape, x, g, cfg)?;
        let m = tape.mean(map)?;
        acc = Some(match acc {
            None => m,
            Some(a) => tape.add(a, m)?,
        });
    }
    let mean_ssim = tape.affine(
        acc.expect("non-empty"),
        T::c(1.0 / pairs.len() as f64),
        T::zero(),
    )?;
    let lam = T::c(lambda_ssim);
    tape.affine(mean_ssim, -lam, lam)
}

/// SSIM map of two tensors outside of any training graph.
pub fn ssim_map_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let va = tape.constant(as_batch(a)?);
    let vb = tape.constant(as_batch(b)?);
    let m = ssim_map(&mut tape, va, vb, cfg)?;
    let out = tape.value(m).clone();
    out.reshape(a.shape())
}

/// Mean SSIM of two images (`[c, h, w]` or `[n, c, h, w]`).
pub fn mean_ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_map_values(a, b, cfg)?.mean().to_f64().unwrap())
}

fn as_batch<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.shape() {
        [c, h, w] => t.clone().reshape(&[1, *c, *h, *w]),
        [_, _, _, _] => Ok(t.clone()),
        s => Err(Error::shape("ssim", format!("expected 3-D or 4-D image, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn img(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut r = RngState::new(seed);
        Tensor::uniform(shape, 0.0, 255.0, &mut r)
    }

    #[test]
    fn window_sums_to_one() {
        for window in [Window::Gaussian, Window::Uniform] {
            let cfg = SsimConfig {
                window,
                ..Default::default()
            };
            let p = cfg.profile();
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_images_map_to_one() {
        let a = img(1, &[1, 3, 16, 16]);
        let m = ssim_map_values(&a, &a, &SsimConfig::default()).unwrap();
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_input() {
        let a = img(1, &[1, 1, 8, 8]);
        let b = img(2, &[1, 1, 8, 9]);
        assert!(ssim_map_values(&a, &b, &SsimConfig::default()).is_err());
        // default 11x11 window does not fit in 8x8
        assert!(ssim_map_values(&a, &a, &SsimConfig::default()).is_err());
        let mut cfg = SsimConfig::default();
        cfg.k1 = 1.5;
        assert!(cfg.validate().is_err());
        cfg = SsimConfig::default();
        cfg.window_size = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loss_cases() {
        let cfg = SsimConfig {
            window_size: 7,
            ..Default::default()
        };
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(img(3, &[1, 3, 8, 8]));
        let b = tape.constant(img(4, &[1, 3, 8, 8]));
        let l = ssim_loss(&mut tape, &[(a, a)], &cfg, 0.02).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
        let l = ssim_loss(&mut tape, &[(a, b)], &cfg, 0.0).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let l = ssim_loss(&mut tape, &[(a, b)], &cfg, 0.02).unwrap();
        let v = tape.scalar(l);
        assert!(v > 0.0 && v <= 0.04, "{v}");
        assert!(ssim_loss(&mut tape, &[], &cfg, 0.02).is_err());
    }
}
