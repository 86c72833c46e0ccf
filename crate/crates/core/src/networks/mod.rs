//! Translation generator and PatchGAN discriminator.

mod discriminator;
mod generator;

pub use discriminator::{build_discriminator, Discriminator, DiscriminatorConfig};
pub use generator::{build_generator, Generator, GeneratorConfig};

use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{BnMode, BnVars, Real, Tape, Tensor, Var};

/// Standard deviation of the `N(0, std)` weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    /// `N(0, 0.02)` weights, zero bias.
    Gan,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    FanIn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    pub transpose: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BnLayer {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

pub(crate) fn init_weight<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    match init {
        Init::Gan => Tensor::randn(shape, 0.0, INIT_STD, rng),
        Init::FanIn => {
            let b = 1.0 / (fan_in as f64).sqrt();
            Tensor::uniform(shape, -b, b, rng)
        }
    }
}

pub(crate) fn init_bias<T: Real, R: Rng + ?Sized>(
    n: usize,
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    match init {
        Init::Gan => Tensor::zeros(&[n]),
        Init::FanIn => {
            let b = 1.0 / (fan_in as f64).sqrt();
            Tensor::uniform(&[n], -b, b, rng)
        }
    }
}

/// Adds a conv layer. `transpose` stores the weight as `[cin, cout, k, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn add_conv<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
    init: Init,
    rng: &mut R,
) -> ConvLayer {
    let fan_in = cin * k * k;
    let shape = if transpose {
        [cin, cout, k, k]
    } else {
        [cout, cin, k, k]
    };
    let weight = store.push(format!("{name}.weight"), init_weight(&shape, fan_in, init, rng), true);
    let bias = store.push(format!("{name}.bias"), init_bias(cout, fan_in, init, rng), true);
    ConvLayer {
        weight,
        bias,
        stride,
        pad,
        output_pad: usize::from(transpose && stride > 1),
        transpose,
    }
}

pub(crate) fn add_bn<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    c: usize,
    rng: &mut R,
) -> BnLayer {
    BnLayer {
        gamma: store.push(format!("{name}.gamma"), Tensor::randn(&[c], 1.0, INIT_STD, rng), true),
        beta: store.push(format!("{name}.beta"), Tensor::zeros(&[c]), true),
        mean: store.push(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
        var: store.push(format!("{name}.running_var"), Tensor::full(&[c], T::one()), false),
    }
}

pub(crate) fn apply_conv<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    layer: &ConvLayer,
    x: Var,
) -> Result<Var> {
    let (w, b) = (bound.var(layer.weight), Some(bound.var(layer.bias)));
    if layer.transpose {
        tape.conv_transpose2d(x, w, b, layer.stride, layer.pad, layer.output_pad)
    } else {
        tape.conv2d(x, w, b, layer.stride, layer.pad)
    }
}

pub(crate) fn apply_bn<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    store: &mut ParamStore<T>,
    layer: &BnLayer,
    x: Var,
    mode: BnMode,
) -> Result<Var> {
    let (mean, var) = store.pair_mut(layer.mean, layer.var);
    tape.batch_norm(
        x,
        BnVars {
            gamma: bound.var(layer.gamma),
            beta: bound.var(layer.beta),
            running_mean: mean,
            running_var: var,
        },
        mode,
    )
}
