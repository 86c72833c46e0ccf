#![allow(dead_code)]

use debias::gradcheck::{numeric_gradient, relative_error};
use debias::{Result, RngState, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

pub fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, &mut RngState::new(seed))
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = rand_tensor(seed, tape.shape(out), -1.0, 1.0);
    let rv = tape.constant(r);
    let p = tape.mul(out, rv)?;
    tape.sum(p)
}

/// Largest relative error between the tape gradient and central differences,
/// over all `inputs`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]))
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let numeric = numeric_gradient(
            |x| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == i {
                            tape.param(Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap())
                        } else {
                            tape.param(t.clone())
                        }
                    })
                    .collect();
                let l = f(&mut tape, &vars)?;
                Ok(tape.scalar(l))
            },
            inputs[i].data(),
            FD_STEP,
        )
        .expect("numeric");
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}

/// Direct quadruple loop convolution with zero padding.
pub fn conv2d_loops(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += xd[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out).unwrap()
}

/// SSIM map computed pixel by pixel from explicit windowed sums, with the
/// window weights built independently of the library.
pub fn ssim_map_loops(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    window: usize,
    sigma: f64,
    k1: f64,
    k2: f64,
    range: f64,
) -> Vec<f64> {
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let r = (window / 2) as isize;
    let g: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let gs: f64 = g.iter().sum();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if i < 0 {
            (-i - 1) as usize
        } else if i >= n {
            (2 * n - i - 1) as usize
        } else {
            i as usize
        }
    };
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let mut out = Vec::with_capacity(a.len());
    for p in 0..n * c {
        let pa = &a.data()[p * h * w..(p + 1) * h * w];
        let pb = &b.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..window {
                    for j in 0..window {
                        let wt = g[i] * g[j] / (gs * gs);
                        let yy = reflect(y as isize + i as isize - r, h);
                        let xx = reflect(x as isize + j as isize - r, w);
                        let (va, vb) = (pa[yy * w + xx], pb[yy * w + xx]);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                out.push(
                    ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
                );
            }
        }
    }
    out
}
