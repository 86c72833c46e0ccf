//! im2col based convolution kernels.

use super::Real;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution, seen from the strided (conv2d) side.
///
/// For `conv2d` the input is `[n, cin, h, w]` and the output `[n, cout, oh, ow]`.
/// For `conv_transpose2d` the roles swap: its input is `[n, cout, oh, ow]` and
/// its output `[n, cin, h, w]`, with the weight stored `[cout, cin, kh, kw]`
/// exactly like the conv2d weight it is the adjoint of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn conv2d(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let op = "conv2d";
        let [n, cin, h, w] = dims4(op, "input", input)?;
        let [cout, wcin, kh, kw] = dims4(op, "weight", weight)?;
        if stride == 0 {
            return Err(Error::shape(op, "stride must be >= 1"));
        }
        if wcin != cin {
            return Err(Error::shape(
                op,
                format!("input channels {cin} != weight in-channels {wcin}"),
            ));
        }
        if kh > h + 2 * pad {
            return Err(Error::shape(
                op,
                format!("kernel height {kh} exceeds padded height {}", h + 2 * pad),
            ));
        }
        if kw > w + 2 * pad {
            return Err(Error::shape(
                op,
                format!("kernel width {kw} exceeds padded width {}", w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry for a transposed convolution whose input is `input` and whose
    /// weight is `[c_in_t, c_out_t, kh, kw]`.
    pub fn conv_transpose2d(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Self> {
        let op = "conv_transpose2d";
        let [n, c_in_t, ih, iw] = dims4(op, "input", input)?;
        let [wc_in, c_out_t, kh, kw] = dims4(op, "weight", weight)?;
        if stride == 0 {
            return Err(Error::shape(op, "stride must be >= 1"));
        }
        if wc_in != c_in_t {
            return Err(Error::shape(
                op,
                format!("input channels {c_in_t} != weight in-channels {wc_in}"),
            ));
        }
        if output_pad >= stride {
            return Err(Error::shape(op, "output padding must be smaller than stride"));
        }
        let full = (ih - 1) * stride + kh + output_pad;
        let fullw = (iw - 1) * stride + kw + output_pad;
        if full <= 2 * pad || fullw <= 2 * pad {
            return Err(Error::shape(op, "padding removes the whole output"));
        }
        let h = full - 2 * pad;
        let w = fullw - 2 * pad;
        Ok(ConvGeom {
            n,
            cin: c_out_t,
            h,
            w,
            cout: c_in_t,
            kh,
            kw,
            stride,
            pad,
            oh: ih,
            ow: iw,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn dims4(op: &'static str, what: &str, s: &[usize]) -> Result<[usize; 4]> {
    match s {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(Error::shape(op, format!("{what} must be 4-D, got {s:?}"))),
    }
}

/// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, oh*ow]`.
fn im2col<T: Real>(g: &ConvGeom, src: &[T], cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[cin, h, w]`.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dst: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[n, cin, h, w] -> [n, cout, oh, ow]`.
pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (kr, nc) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); kr * nc];
    let mut out = vec![T::zero(); g.n * g.cout * nc];
    let in_sz = g.cin * g.h * g.w;
    for b in 0..g.n {
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        let o = &mut out[b * g.cout * nc..(b + 1) * g.cout * nc];
        if let Some(bias) = bias {
            for (co, chunk) in o.chunks_mut(nc).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        T::gemm(
            g.cout,
            kr,
            nc,
            T::one(),
            weight,
            (kr, 1),
            &cols,
            (nc, 1),
            T::one(),
            o,
            (nc, 1),
        );
    }
    out
}

/// Gradients of conv2d w.r.t. input, weight and bias given `dout`.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (kr, nc) = (g.col_rows(), g.col_cols());
    let in_sz = g.cin * g.h * g.w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); kr * nc];
    let mut dcols = vec![T::zero(); kr * nc];
    for b in 0..g.n {
        let d = &dout[b * g.cout * nc..(b + 1) * g.cout * nc];
        for (co, chunk) in d.chunks(nc).enumerate() {
            db[co] = db[co] + chunk.iter().copied().sum();
        }
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        // dW += dOut * cols^T
        T::gemm(
            g.cout,
            nc,
            kr,
            T::one(),
            d,
            (nc, 1),
            &cols,
            (1, nc),
            T::one(),
            &mut dw,
            (kr, 1),
        );
        // dcols = W^T * dOut
        T::gemm(
            kr,
            g.cout,
            nc,
            T::one(),
            weight,
            (1, kr),
            d,
            (nc, 1),
            T::zero(),
            &mut dcols,
            (nc, 1),
        );
        col2im(g, &dcols, &mut dx[b * in_sz..(b + 1) * in_sz]);
    }
    (dx, dw, db)
}

/// `[n, cout, oh, ow] -> [n, cin, h, w]`; bias has `cin` entries.
pub(crate) fn conv_transpose2d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (kr, nc) = (g.col_rows(), g.col_cols());
    let out_sz = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * out_sz];
    let mut cols = vec![T::zero(); kr * nc];
    for b in 0..g.n {
        let xb = &x[b * g.cout * nc..(b + 1) * g.cout * nc];
        T::gemm(
            kr,
            g.cout,
            nc,
            T::one(),
            weight,
            (1, kr),
            xb,
            (nc, 1),
            T::zero(),
            &mut cols,
            (nc, 1),
        );
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        col2im(g, &cols, o);
        if let Some(bias) = bias {
            for (c, plane) in o.chunks_mut(g.h * g.w).enumerate() {
                for v in plane {
                    *v = *v + bias[c];
                }
            }
        }
    }
    out
}

/// Gradients of conv_transpose2d w.r.t. input, weight and bias.
pub(crate) fn conv_transpose2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (kr, nc) = (g.col_rows(), g.col_cols());
    let out_sz = g.cin * g.h * g.w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cin];
    let mut dcols = vec![T::zero(); kr * nc];
    for b in 0..g.n {
        let d = &dout[b * out_sz..(b + 1) * out_sz];
        for (c, plane) in d.chunks(g.h * g.w).enumerate() {
            db[c] = db[c] + plane.iter().copied().sum();
        }
        im2col(g, d, &mut dcols);
        let xb = &x[b * g.cout * nc..(b + 1) * g.cout * nc];
        // dX = W * dcols
        T::gemm(
            g.cout,
            kr,
            nc,
            T::one(),
            weight,
            (kr, 1),
            &dcols,
            (nc, 1),
            T::zero(),
            &mut dx[b * g.cout * nc..(b + 1) * g.cout * nc],
            (nc, 1),
        );
        // dW += X * dcols^T
        T::gemm(
            g.cout,
            nc,
            kr,
            T::one(),
            xb,
            (nc, 1),
            &dcols,
            (1, nc),
            T::one(),
            &mut dw,
            (kr, 1),
        );
    }
    (dx, dw, db)
}
