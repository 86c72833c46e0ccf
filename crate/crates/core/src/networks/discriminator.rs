use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::RngState;
use crate::tensor::{BnMode, Real, Tape, Tensor, Var};

use super::{add_bn, add_conv, apply_bn, apply_conv, BnLayer, ConvLayer, Init};

pub const LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Number of stride-2 convolutions. Two stride-1 convolutions follow.
    pub n_layers: usize,
    pub base_channels: usize,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig {
            in_channels: 3,
            n_layers: 2,
            base_channels: 16,
        }
    }

    /// The 70x70 PatchGAN.
    pub fn paper_256() -> Self {
        DiscriminatorConfig {
            in_channels: 3,
            n_layers: 3,
            base_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("discriminator.in_channels", "must be >= 1"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("discriminator.n_layers", "must be >= 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("discriminator.base_channels", "must be >= 1"));
        }
        Ok(())
    }

    /// `(kernel, stride)` of every convolution, input to output.
    pub fn layer_geometry(&self) -> Vec<(usize, usize)> {
        let mut g = vec![(KERNEL, 2); self.n_layers];
        g.extend([(KERNEL, 1), (KERNEL, 1)]);
        g
    }

    /// Side of the input square seen by one output patch, from the
    /// recurrence `r <- (r - 1) * stride + kernel` run from the output back.
    pub fn receptive_field(&self) -> usize {
        self.layer_geometry()
            .iter()
            .rev()
            .fold(1, |r, &(k, s)| (r - 1) * s + k)
    }

    /// Side of the patch grid produced for a square input of side `size`.
    pub fn output_size(&self, size: usize) -> Option<usize> {
        self.layer_geometry().iter().try_fold(size, |n, &(k, s)| {
            let padded = n + 2;
            (padded >= k).then(|| (padded - k) / s + 1)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    conv: ConvLayer,
    bn: Option<BnLayer>,
}

/// PatchGAN: stride-2 convs with leaky ReLU (batch norm from the second layer
/// on), two stride-1 convs, and a sigmoid over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T: Real = f32> {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layers: Vec<Layer>,
    pixel_max: f64,
}

pub fn build_discriminator<T: Real>(
    cfg: &DiscriminatorConfig,
    pixel_max: f64,
    rng: &mut RngState,
) -> Result<Discriminator<T>> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let geom = cfg.layer_geometry();
    let n = geom.len();
    let cap = cfg.base_channels * 8;
    let mut layers = Vec::with_capacity(n);
    let mut cin = cfg.in_channels;
    for (i, &(k, s)) in geom.iter().enumerate() {
        let last = i == n - 1;
        let cout = if last {
            1
        } else if i == 0 {
            cfg.base_channels
        } else {
            (cin * 2).min(cap)
        };
        let name = format!("layer{i}");
        let conv = add_conv(&mut p, &name, cin, cout, k, s, 1, false, Init::Gan, rng);
        let bn = (i > 0 && !last).then(|| add_bn(&mut p, &format!("{name}.bn"), cout, rng));
        layers.push(Layer { conv, bn });
        cin = cout;
    }
    Ok(Discriminator {
        cfg: *cfg,
        params: p,
        layers,
        pixel_max,
    })
}

impl<T: Real> Discriminator<T> {
    pub fn receptive_field(&self) -> usize {
        self.cfg.receptive_field()
    }

    /// Patch probabilities `[n, 1, h', w']` for a batch with pixels in `[0, pixel_max]`.
    pub fn forward(&mut self, tape: &mut Tape<T>, bound: &Bound, x: Var, mode: BnMode) -> Result<Var> {
        match tape.shape(x) {
            [_, c, h, w] if *c == self.cfg.in_channels && self.cfg.output_size((*h).min(*w)).is_some() => {}
            other => {
                return Err(Error::shape(
                    "discriminator_forward",
                    format!(
                        "expected [n, {}, h, w] large enough for {} layers, got {other:?}",
                        self.cfg.in_channels,
                        self.layers.len()
                    ),
                ))
            }
        }
        let mut h = tape.affine(x, T::c(2.0 / self.pixel_max), -T::one())?;
        let n = self.layers.len();
        for i in 0..n {
            let layer = self.layers[i].clone();
            h = apply_conv(tape, bound, &layer.conv, h)?;
            if let Some(bn) = &layer.bn {
                h = apply_bn(tape, bound, &mut self.params, bn, h, mode)?;
            }
            if i + 1 < n {
                h = tape.leaky_relu(h, T::c(LEAKY_SLOPE))?;
            }
        }
        tape.sigmoid(h)
    }

    pub fn score(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv, mode)?;
        Ok(tape.value(y).clone())
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            cfg: self.cfg,
            params: self.params.cast(),
            layers: self.layers.clone(),
            pixel_max: self.pixel_max,
        }
    }
}
