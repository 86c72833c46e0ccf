use rand::Rng;

use super::{DomainDataset, LabeledImage, PIXEL_MAX};
use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Train-mode rotations are drawn from `U[-ROTATION_DEGREES, ROTATION_DEGREES]`.
pub const ROTATION_DEGREES: f64 = 10.0;

/// Rotation angle in degrees and whether to mirror horizontally.
pub fn draw_augmentation(rng: &mut RngState) -> (f64, bool) {
    let angle = rng.gen_range(-ROTATION_DEGREES..=ROTATION_DEGREES);
    let flip = rng.gen_bool(0.5);
    (angle, flip)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let src = img.data();
    let dst = out.data_mut();
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            for ch in 0..c {
                let p = &src[ch * h * w..];
                let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
                let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
                dst[(ch * out_h + y) * out_w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Rotates about the image center by `degrees` (counter-clockwise on screen),
/// sampling bilinearly. Pixels mapped from outside the frame are black.
pub fn rotate(img: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (s, co) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = img.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    let dst = out.data_mut();
    let at = |ch: usize, y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            // inverse map: output pixel to source coordinates
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = co * dx - s * dy + cx;
            let sy = s * dx + co * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (tx, ty) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = at(ch, y0, x0) * (1.0 - tx) + at(ch, y0, x0 + 1) * tx;
                let bot = at(ch, y0 + 1, x0) * (1.0 - tx) + at(ch, y0 + 1, x0 + 1) * tx;
                dst[(ch * h + y) * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn flip_horizontal(img: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    let src = img.data();
    for row in 0..c * h {
        for x in 0..w {
            out.data_mut()[row * w + x] = src[row * w + (w - 1 - x)];
        }
    }
    out
}

/// Random rotation followed by a random horizontal flip.
pub fn augment(px: &Tensor<f32>, rng: &mut RngState) -> Tensor<f32> {
    let (angle, flip) = draw_augmentation(rng);
    let r = rotate(px, angle);
    if flip {
        flip_horizontal(&r)
    } else {
        r
    }
}

fn to_rgb(img: &Tensor<f32>) -> Tensor<f32> {
    match img.shape() {
        &[1, h, w] => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(img.data());
            }
            Tensor::new(vec![3, h, w], data).expect("three copies of one plane")
        }
        &[c, h, w] if c > 3 => Tensor::new(vec![3, h, w], img.data()[..3 * h * w].to_vec())
            .expect("leading three planes"),
        _ => img.clone(),
    }
}

/// Converts to three channels and resizes to `size x size`. In train mode the
/// image is then rotated by a random angle and mirrored with probability 0.5.
/// The label is never touched.
pub fn preprocess(img: &LabeledImage, size: usize, train_mode: bool, rng: &mut RngState) -> LabeledImage {
    let mut px = resize_bilinear(&to_rgb(&img.pixels), size, size);
    if train_mode {
        px = augment(&px, rng);
    }
    LabeledImage {
        id: img.id.clone(),
        label: img.label,
        pixels: px.map(|v| v.clamp(0.0, PIXEL_MAX)),
    }
}

/// [`preprocess`] over a whole dataset with per-item streams
/// `RngState::new(seed).derive_str(id)`, so the result does not depend on
/// `workers`.
pub fn preprocess_all(
    ds: &DomainDataset,
    size: usize,
    train_mode: bool,
    seed: u64,
    workers: usize,
) -> Result<DomainDataset> {
    let base = RngState::new(seed);
    let run = |img: &LabeledImage| preprocess(img, size, train_mode, &mut base.derive_str(&img.id));
    let workers = workers.max(1);
    let images: Vec<LabeledImage> = if workers == 1 || ds.len() < 2 {
        ds.images.iter().map(run).collect()
    } else {
        let chunk = ds.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = ds
                .images
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("preprocessing worker panicked"))
                .collect()
        })
    };
    DomainDataset::new(ds.name.clone(), images, ds.n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> Tensor<f32> {
        let data: Vec<f32> = (0..28 * 28).map(|i| (i % 256) as f32).collect();
        Tensor::new(vec![1, 28, 28], data).unwrap()
    }

    #[test]
    fn gray_28_to_rgb_32() {
        let img = LabeledImage {
            id: "a".into(),
            label: 4,
            pixels: gradient_image(),
        };
        let a = preprocess(&img, 32, false, &mut RngState::new(1));
        let b = preprocess(&img, 32, false, &mut RngState::new(2));
        assert_eq!(a.pixels.shape(), &[3, 32, 32]);
        assert_eq!(a, b);
        assert_eq!(a.label, 4);
        let plane = 32 * 32;
        assert_eq!(a.pixels.data()[..plane], a.pixels.data()[2 * plane..]);
    }

    #[test]
    fn train_mode_is_seeded() {
        let img = LabeledImage {
            id: "a".into(),
            label: 1,
            pixels: gradient_image(),
        };
        let a = preprocess(&img, 32, true, &mut RngState::new(5));
        let b = preprocess(&img, 32, true, &mut RngState::new(5));
        assert_eq!(a, b);
        assert!(a.pixels.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn zero_rotation_and_same_size_are_identity() {
        let img = Tensor::new(vec![3, 5, 7], (0..105).map(|v| v as f32).collect()).unwrap();
        assert_eq!(rotate(&img, 0.0), img);
        assert_eq!(resize_bilinear(&img, 5, 7), img);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let mut img = Tensor::zeros(&[1, 5, 5]);
        img.data_mut()[0] = 100.0; // top-left
        let r = rotate(&img, 90.0);
        // counter-clockwise: top-left goes to bottom-left
        assert!((r.data()[20] - 100.0).abs() < 1e-3, "{:?}", r.data());
    }

    #[test]
    fn workers_do_not_change_results() {
        let images = (0..7)
            .map(|i| LabeledImage {
                id: format!("{i}"),
                label: 0,
                pixels: gradient_image(),
            })
            .collect();
        let ds = DomainDataset::new("d", images, 1).unwrap();
        let a = preprocess_all(&ds, 16, true, 3, 1).unwrap();
        let b = preprocess_all(&ds, 16, true, 3, 3).unwrap();
        assert_eq!(a, b);
    }
}
