//! Procedurally drawn digits: polyline glyphs under a random affine warp and
//! stroke width, anti-aliased, in red ink on black.

use std::f64::consts::PI;

use rand::Rng;

use super::{DomainDataset, LabeledImage};
use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::Tensor;

type Pt = (f64, f64);

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Vec<Pt> {
    let n = 14;
    (0..=n)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f64 / n as f64) * PI / 180.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn join(parts: &[Vec<Pt>]) -> Vec<Pt> {
    parts.concat()
}

/// Strokes of each glyph in a unit box, `y` pointing down.
fn glyph(d: usize) -> Vec<Vec<Pt>> {
    match d {
        0 => vec![arc(0.5, 0.5, 0.32, 0.45, 0.0, 360.0)],
        1 => vec![vec![(0.32, 0.22), (0.55, 0.05), (0.55, 0.95)], vec![(0.35, 0.95), (0.75, 0.95)]],
        2 => vec![join(&[
            arc(0.5, 0.3, 0.3, 0.25, 200.0, 360.0),
            vec![(0.8, 0.35), (0.2, 0.95), (0.85, 0.95)],
        ])],
        3 => vec![
            arc(0.48, 0.28, 0.3, 0.23, 200.0, 450.0),
            arc(0.48, 0.72, 0.32, 0.23, 270.0, 520.0),
        ],
        4 => vec![vec![(0.62, 0.95), (0.62, 0.05), (0.15, 0.68), (0.88, 0.68)]],
        5 => vec![join(&[
            vec![(0.8, 0.05), (0.28, 0.05), (0.24, 0.45)],
            arc(0.5, 0.68, 0.32, 0.27, 230.0, 500.0),
        ])],
        6 => vec![join(&[
            vec![(0.72, 0.07), (0.4, 0.3), (0.2, 0.65)],
            arc(0.5, 0.7, 0.3, 0.25, 180.0, 540.0),
        ])],
        7 => vec![vec![(0.15, 0.05), (0.85, 0.05), (0.4, 0.95)]],
        8 => vec![
            arc(0.5, 0.27, 0.25, 0.22, 0.0, 360.0),
            arc(0.5, 0.72, 0.31, 0.23, 0.0, 360.0),
        ],
        _ => vec![join(&[
            arc(0.5, 0.3, 0.3, 0.25, 0.0, 360.0),
            vec![(0.8, 0.32), (0.65, 0.95)],
        ])],
    }
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// One glyph as a `[3, size, size]` image.
fn draw(digit: usize, size: usize, rng: &mut RngState) -> Tensor<f32> {
    let s = size as f64;
    let scale = rng.gen_range(0.8..1.0) * 0.68 * s;
    let aspect = rng.gen_range(0.75..0.95);
    let angle = rng.gen_range(-12.0f64..12.0).to_radians();
    let shear = rng.gen_range(-0.2..0.2);
    let (tx, ty) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
    let width = rng.gen_range(1.3..2.3) * s / 32.0;
    let ink = rng.gen_range(190.0..255.0);
    let (sn, cs) = angle.sin_cos();
    let warp = |(u, v): Pt| -> Pt {
        let x = (u - 0.5) * aspect + shear * (v - 0.5);
        let y = v - 0.5;
        let (x, y) = (x * scale, y * scale);
        (cs * x - sn * y + s / 2.0 + tx, sn * x + cs * y + s / 2.0 + ty)
    };
    let strokes: Vec<Vec<Pt>> = glyph(digit)
        .into_iter()
        .map(|st| st.into_iter().map(warp).collect())
        .collect();
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|st| st.windows(2).map(|w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            data[y * size + x] = (cover * ink).round() as f32;
        }
    }
    Tensor::new(vec![3, size, size], data).expect("3 planes")
}

/// `per_class * 10` digits, interleaved by class, ids `00000.ppm`, `00001.ppm`, ...
pub fn render_digits(per_class: usize, size: usize, seed: u64) -> Result<DomainDataset> {
    let base = RngState::new(seed);
    let images = (0..per_class * 10)
        .map(|i| {
            let id = format!("{i:05}.ppm");
            let label = i % 10;
            LabeledImage {
                pixels: draw(label, size, &mut base.derive_str(&id)),
                id,
                label,
            }
        })
        .collect();
    DomainDataset::new("digits", images, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_draws_ink_inside_the_frame() {
        let ds = render_digits(3, 32, 7).unwrap();
        assert_eq!(ds.len(), 30);
        assert_eq!(ds.histogram(), vec![3; 10]);
        for img in &ds.images {
            let red = &img.pixels.data()[..32 * 32];
            let inked = red.iter().filter(|&&v| v > 100.0).count();
            assert!(inked > 20, "class {} has {inked} inked pixels", img.label);
            let border: f32 = (0..32).map(|i| red[i] + red[31 * 32 + i]).sum();
            assert_eq!(border, 0.0);
            assert!(img.pixels.data()[32 * 32..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn seeded() {
        assert_eq!(render_digits(1, 16, 3).unwrap(), render_digits(1, 16, 3).unwrap());
        assert_ne!(render_digits(1, 16, 3).unwrap(), render_digits(1, 16, 4).unwrap());
    }
}
