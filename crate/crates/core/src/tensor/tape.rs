use super::conv::{self, ConvGeom};
use super::norm::{self, BnMode};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    ScaledAtan(Var, T),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, T),
    Abs(Var),
    Log { input: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    Blur { input: Var, kernel: Vec<T> },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Var },
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::ScaledAtan(..) => "scaled_atan",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine(..) => "affine",
            Op::Abs(_) => "abs",
            Op::Log { .. } => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Blur { .. } => "blur",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Linear { .. } => "linear",
            Op::Reshape(_) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order; [`Tape::backward`] walks them in
/// reverse, so every op's inputs always precede it.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `value` as a new constant cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, op, &[a, b])
    }

    // ---- convolutions -------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::conv2d(self.shape(input), self.shape(weight), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.cout),
                ));
            }
        }
        let out = conv::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(vec![geom.n, geom.cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// Transposed convolution. `weight` is `[c_in, c_out, kh, kw]`; output size
    /// is `(h - 1) * stride - 2 * pad + kh + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::conv_transpose2d(
            self.shape(input),
            self.shape(weight),
            stride,
            pad,
            output_pad,
        )?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cin] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.cin),
                ));
            }
        }
        let out = conv::conv_transpose2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(vec![geom.n, geom.cin, geom.h, geom.w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            t,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    // ---- normalization -------------------------------------------------

    /// Per-channel batch normalization of `[n, c, h, w]`. In train mode the
    /// running estimates are updated in place (momentum [`super::BN_MOMENTUM`]).
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        mode: BnMode,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let [n, c, h, w] = match shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::shape("batch_norm2d", format!("input must be 4-D, got {shape:?}"))),
        };
        for (what, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running mean", running_mean.len()),
            ("running var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape(
                    "batch_norm2d",
                    format!("{what} has {len} entries for {c} channels"),
                ));
            }
        }
        if mode == BnMode::Train && n * h * w == 1 {
            return Err(Error::DegenerateBatch);
        }
        let f = norm::forward(
            self.value(input).data(),
            n,
            c,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            mode,
        );
        let t = Tensor::new(shape, f.out)?;
        self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: f.xhat,
                inv_std: f.inv_std,
                mode,
            },
            &[input, gamma, beta],
        )
    }

    // ---- elementwise -----------------------------------------------------

    /// `max(0, x)`, with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    /// `pixel_max * (atan(x) / pi + 1/2)`, which maps the real line onto
    /// `(0, pixel_max)`.
    pub fn scaled_atan(&mut self, x: Var, pixel_max: T) -> Result<Var> {
        let pi = T::c(std::f64::consts::PI);
        let half = T::c(0.5);
        self.unary(
            x,
            |v| pixel_max * (v.atan() / pi + half),
            Op::ScaledAtan(x, pixel_max),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn clamped_log(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let clamped = self
            .value(x)
            .data()
            .iter()
            .filter(|&&v| v < lo || v > hi)
            .count();
        if clamped > 0 {
            log::warn!("log: clamped {clamped} value(s) into [{lo}, {hi}]");
        }
        self.unary(
            x,
            |v| v.max(lo).min(hi).ln(),
            Op::Log { input: x, lo, hi },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    // ---- windows and pooling ----------------------------------------------

    /// Separable depthwise filter over `[n, c, h, w]` with symmetric border
    /// extension (`...c b a | a b c ... x y z | z y x ...`). `kernel` is the 1-D
    /// profile applied along both axes; its length must be odd and must not
    /// exceed either spatial dimension.
    pub fn blur(&mut self, x: Var, kernel: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (h, w) = match shape[..] {
            [_, _, h, w] => (h, w),
            _ => return Err(Error::shape("blur", format!("input must be 4-D, got {shape:?}"))),
        };
        let k = kernel.len();
        if k % 2 == 0 {
            return Err(Error::shape("blur", "window size must be odd"));
        }
        if k > h || k > w {
            return Err(Error::shape(
                "blur",
                format!("window {k} larger than image {h}x{w}"),
            ));
        }
        let out = blur_forward(self.value(x).data(), h, w, kernel);
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Blur {
                input: x,
                kernel: kernel.to_vec(),
            },
            &[x],
        )
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = match shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::shape("max_pool2d", format!("input must be 4-D, got {shape:?}"))),
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape("max_pool2d", format!("input {h}x{w} too small")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(t, Op::MaxPool2d { input: x, argmax }, &[x])
    }

    /// `x [n, d] * weight[o, d]^T + bias[o]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = match self.shape(x)[..] {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("linear", format!("input must be 2-D, got {s:?}"))),
        };
        let (o, wd) = match self.shape(weight)[..] {
            [o, wd] => (o, wd),
            ref s => return Err(Error::shape("linear", format!("weight must be 2-D, got {s:?}"))),
        };
        if wd != d || self.shape(bias) != [o] {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        let mut out: Vec<T> = (0..n)
            .flat_map(|_| self.value(bias).data().iter().copied())
            .collect();
        T::gemm(
            n,
            d,
            o,
            T::one(),
            self.value(x).data(),
            (d, 1),
            self.value(weight).data(),
            (1, d),
            T::one(),
            &mut out,
            (o, 1),
        );
        let t = Tensor::new(vec![n, o], out)?;
        self.push(t, Op::Linear { input: x, weight, bias }, &[x, weight, bias])
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = match self.shape(logits)[..] {
            [n, k] => (n, k),
            ref s => return Err(Error::shape("cross_entropy", format!("logits must be 2-D, got {s:?}"))),
        };
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::shape("cross_entropy", format!("target {t} >= {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss = loss + lse - row[targets[i]];
        }
        loss = loss / T::from_usize(n).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ---- reverse pass --------------------------------------------------------

    /// Accumulates `d loss / d v` into every `requires_grad` node reachable
    /// from `loss`. Gradients of intermediate nodes are released once used;
    /// leaf gradients stay available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes, loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.take() else {
                continue;
            };
            let contribs = backward_op(head, &node.op, &node.value, &g);
            for (v, d) in contribs {
                if d.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient { op: node.op.name() });
                }
                accumulate(head, v, d);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(nodes: &mut [Node<T>], v: Var, d: Vec<T>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(d) {
                *a = *a + b;
            }
        }
        None => node.grad = Some(d),
    }
}

fn needs<T>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn backward_op<T: Real>(
    nodes: &[Node<T>],
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let val = |v: Var| nodes[v.0].value.data();
    let mut res = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let (dx, dw, db) = conv::conv2d_backward(geom, val(*input), val(*weight), g);
            res.push((*input, dx));
            res.push((*weight, dw));
            if let Some(b) = bias {
                res.push((*b, db));
            }
        }
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let (dx, dw, db) = conv::conv_transpose2d_backward(geom, val(*input), val(*weight), g);
            res.push((*input, dx));
            res.push((*weight, dw));
            if let Some(b) = bias {
                res.push((*b, db));
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => {
            let s = out.shape();
            let (dx, dg, db) =
                norm::backward(g, xhat, inv_std, val(*gamma), s[0], s[1], s[2] * s[3], *mode);
            res.push((*input, dx));
            res.push((*gamma, dg));
            res.push((*beta, db));
        }
        Op::Relu(x) => res.push((
            *x,
            zip_map(val(*x), g, |v, d| if v > T::zero() { d } else { T::zero() }),
        )),
        Op::LeakyRelu(x, slope) => res.push((
            *x,
            zip_map(val(*x), g, |v, d| if v > T::zero() { d } else { *slope * d }),
        )),
        Op::ScaledAtan(x, pmax) => {
            let k = *pmax / T::c(std::f64::consts::PI);
            res.push((*x, zip_map(val(*x), g, |v, d| d * k / (T::one() + v * v))));
        }
        Op::Sigmoid(x) => res.push((
            *x,
            zip_map(out.data(), g, |s, d| d * s * (T::one() - s)),
        )),
        Op::Add(a, b) => {
            res.push((*a, g.to_vec()));
            res.push((*b, g.to_vec()));
        }
        Op::Sub(a, b) => {
            res.push((*a, g.to_vec()));
            res.push((*b, g.iter().map(|&d| -d).collect()));
        }
        Op::Mul(a, b) => {
            if needs(nodes, *a) {
                res.push((*a, zip_map(val(*b), g, |y, d| y * d)));
            }
            if needs(nodes, *b) {
                res.push((*b, zip_map(val(*a), g, |x, d| x * d)));
            }
        }
        Op::Div(a, b) => {
            if needs(nodes, *a) {
                res.push((*a, zip_map(val(*b), g, |y, d| d / y)));
            }
            if needs(nodes, *b) {
                let q = zip_map(out.data(), val(*b), |o, y| o / y);
                res.push((*b, zip_map(&q, g, |q, d| -q * d)));
            }
        }
        Op::Affine(x, scale) => res.push((*x, g.iter().map(|&d| *scale * d).collect())),
        Op::Abs(x) => res.push((
            *x,
            zip_map(val(*x), g, |v, d| {
                if v > T::zero() {
                    d
                } else if v < T::zero() {
                    -d
                } else {
                    T::zero()
                }
            }),
        )),
        Op::Log { input, lo, hi } => res.push((
            *input,
            zip_map(val(*input), g, |v, d| {
                if v < *lo || v > *hi {
                    T::zero()
                } else {
                    d / v
                }
            }),
        )),
        Op::Sum(x) => res.push((*x, vec![g[0]; nodes[x.0].value.len()])),
        Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            res.push((*x, vec![g[0] / T::from_usize(n).unwrap(); n]));
        }
        Op::Reshape(x) => res.push((*x, g.to_vec())),
        Op::Blur { input, kernel } => {
            let s = out.shape();
            res.push((*input, blur_backward(g, s[2], s[3], kernel)));
        }
        Op::MaxPool2d { input, argmax } => {
            let mut dx = vec![T::zero(); nodes[input.0].value.len()];
            for (&i, &d) in argmax.iter().zip(g) {
                dx[i] = dx[i] + d;
            }
            res.push((*input, dx));
        }
        Op::Linear { input, weight, bias } => {
            let (n, d) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
            let o = nodes[bias.0].value.len();
            if needs(nodes, *input) {
                let mut dx = vec![T::zero(); n * d];
                T::gemm(n, o, d, T::one(), g, (o, 1), val(*weight), (d, 1), T::zero(), &mut dx, (d, 1));
                res.push((*input, dx));
            }
            if needs(nodes, *weight) {
                let mut dw = vec![T::zero(); o * d];
                T::gemm(o, n, d, T::one(), g, (1, o), val(*input), (d, 1), T::zero(), &mut dw, (d, 1));
                res.push((*weight, dw));
            }
            let mut db = vec![T::zero(); o];
            for row in g.chunks(o) {
                for (a, &b) in db.iter_mut().zip(row) {
                    *a = *a + b;
                }
            }
            res.push((*bias, db));
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let n = targets.len();
            let k = probs.len() / n.max(1);
            let scale = g[0] / T::from_usize(n).unwrap();
            let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                d[i * k + t] = d[i * k + t] - scale;
            }
            res.push((*logits, d));
        }
    }
    res.retain(|(v, _)| needs(nodes, *v));
    res
}

#[inline]
fn sym(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    j as usize
}

fn blur_forward<T: Real>(x: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(h * w).zip(tmp.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let mut s = T::zero();
                for (j, &kv) in k.iter().enumerate() {
                    s = s + kv * src[y * w + sym(xx as isize + j as isize - r, w)];
                }
                dst[y * w + xx] = s;
            }
        }
    }
    for (src, dst) in tmp.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let mut s = T::zero();
                for (i, &kv) in k.iter().enumerate() {
                    s = s + kv * src[sym(y as isize + i as isize - r, h) * w + xx];
                }
                dst[y * w + xx] = s;
            }
        }
    }
    out
}

fn blur_backward<T: Real>(g: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![T::zero(); g.len()];
    let mut dx = vec![T::zero(); g.len()];
    for (src, dst) in g.chunks(h * w).zip(tmp.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let d = src[y * w + xx];
                for (i, &kv) in k.iter().enumerate() {
                    let t = sym(y as isize + i as isize - r, h) * w + xx;
                    dst[t] = dst[t] + kv * d;
                }
            }
        }
    }
    for (src, dst) in tmp.chunks(h * w).zip(dx.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let d = src[y * w + xx];
                for (j, &kv) in k.iter().enumerate() {
                    let t = y * w + sym(xx as isize + j as isize - r, w);
                    dst[t] = dst[t] + kv * d;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 0.4).abs() < 1e-12 && v[1] == 3.0);
    }

    #[test]
    fn scaled_atan_limits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 1e12, -1e6]));
        let y = tape.scaled_atan(x, 255.0).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 127.5);
        assert!((v[1] - 255.0).abs() < 1e-6);
        assert!(v[2] > 0.0 && v[2] < 1e-3);
    }

    #[test]
    fn sum_gives_ones_and_square_gives_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let data = [1.0, -2.0, 3.0, 0.5, 0.0, 4.0];
        let x = tape.param(t(&[2, 3], &data));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), &want[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::<f64>::new();
        let v = Var(0);
        assert!(tape.backward(v).is_err());
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let e = tape.div(a, b).unwrap_err();
        assert!(matches!(e, Error::NonFinite { op: "div" }));
    }

    #[test]
    fn non_finite_gradient_names_op() {
        // d/dx |x| / y at y = tiny yields huge but finite values; force inf via
        // a chain whose local derivative overflows.
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[1e-300]));
        let y = tape.constant(t(&[1], &[1e-300]));
        let q = tape.div(y, x).unwrap(); // value 1, d/dx = -y/x^2 = -1e300
        let q2 = tape.affine(q, 1e10, 0.0).unwrap(); // pushes the gradient past f64::MAX
        let s = tape.sum(q2).unwrap();
        let e = tape.backward(s).unwrap_err();
        assert!(matches!(e, Error::NonFiniteGradient { op: "div" }), "{e}");
    }

    #[test]
    fn gradient_accumulates_over_uses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn conv_transpose_scatter_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv_transpose2d(x, w, None, 2, 0, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0]
        );
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..9).map(|v| v as f64 * 0.5 - 1.0).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &data));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn batch_norm_degenerate_batch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        let e = tape
            .batch_norm2d(x, g, b, &mut m, &mut v, BnMode::Train)
            .unwrap_err();
        assert!(matches!(e, Error::DegenerateBatch));
        assert!(tape
            .batch_norm2d(x, g, b, &mut m, &mut v, BnMode::Eval)
            .is_ok());
    }

    #[test]
    fn batch_norm_updates_running_stats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        tape.batch_norm2d(x, g, b, &mut m, &mut v, BnMode::Train)
            .unwrap();
        assert!((m[0] - 0.4).abs() < 1e-12);
        // unbiased variance of [1,3,5,7] is 20/3
        assert!((v[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 1, 2, 4], &[1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 9.0, 1.0]));
        let y = tape.max_pool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 9.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(
            tape.grad(x).unwrap(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(t(&[2, 4], &[0.0; 8]));
        let l = tape.cross_entropy(z, &[0, 3]).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(z, &[0, 4]).is_err());
    }

    #[test]
    fn blur_rejects_large_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(tape.blur(x, &[0.2; 5]).is_err());
        assert!(tape.blur(x, &[0.25; 4]).is_err());
    }

    #[test]
    fn symmetric_index() {
        assert_eq!(sym(-1, 5), 0);
        assert_eq!(sym(-2, 5), 1);
        assert_eq!(sym(5, 5), 4);
        assert_eq!(sym(6, 5), 3);
    }
}
