use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::RngState;
use crate::tensor::{BnMode, BnVars, Real, ResidualVars, Tape, Tensor, Var};

use super::{add_bn, add_conv, apply_bn, apply_conv, BnLayer, ConvLayer, Init};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    /// Number of stride-2 downsampling stages (mirrored by upsampling stages).
    pub n_down: usize,
    pub image_size: usize,
    /// Upper end of the pixel range; the output lies in `(0, pixel_max)`.
    pub pixel_max: f64,
}

impl GeneratorConfig {
    /// 32 px images, 16 base channels, 3 residual blocks.
    pub fn desk() -> Self {
        GeneratorConfig {
            in_channels: 3,
            base_channels: 16,
            n_residual_blocks: 3,
            n_down: 2,
            image_size: 32,
            pixel_max: 255.0,
        }
    }

    /// 256 px RGB, two stride-2 stages (256 -> 64), five residual blocks.
    pub fn paper_256() -> Self {
        GeneratorConfig {
            in_channels: 3,
            base_channels: 32,
            n_residual_blocks: 5,
            n_down: 2,
            image_size: 256,
            pixel_max: 255.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("generator.in_channels", "must be >= 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("generator.base_channels", "must be >= 1"));
        }
        if self.n_residual_blocks == 0 {
            return Err(Error::config("generator.n_residual_blocks", "must be >= 1"));
        }
        let f = 1usize << self.n_down;
        if self.image_size == 0 || self.image_size % f != 0 {
            return Err(Error::config(
                "generator.image_size",
                format!("must be a positive multiple of 2^n_down = {f}"),
            ));
        }
        if self.image_size / f < 2 {
            return Err(Error::config(
                "generator.image_size",
                "internal resolution would be below 2x2",
            ));
        }
        if !(self.pixel_max > 0.0) {
            return Err(Error::config("generator.pixel_max", "must be > 0"));
        }
        Ok(())
    }

    /// Spatial size after the downsampling stages.
    pub fn internal_resolution(&self) -> usize {
        self.image_size >> self.n_down
    }

    pub fn internal_channels(&self) -> usize {
        self.base_channels << self.n_down
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResidualLayer {
    conv1: ConvLayer,
    bn1: BnLayer,
    conv2: ConvLayer,
    bn2: BnLayer,
}

/// `stem -> n_down x (stride-2 conv, bn, relu) -> residual blocks ->
/// n_down x (stride-2 transposed conv, bn, relu) -> head conv -> scaled atan`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T: Real = f32> {
    pub cfg: GeneratorConfig,
    pub params: ParamStore<T>,
    stem: (ConvLayer, BnLayer),
    down: Vec<(ConvLayer, BnLayer)>,
    res: Vec<ResidualLayer>,
    up: Vec<(ConvLayer, BnLayer)>,
    head: ConvLayer,
}

pub fn build_generator<T: Real>(cfg: &GeneratorConfig, rng: &mut RngState) -> Result<Generator<T>> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let b = cfg.base_channels;
    let init = Init::Gan;
    let stem = (
        add_conv(&mut p, "stem", cfg.in_channels, b, 7, 1, 3, false, init, rng),
        add_bn(&mut p, "stem.bn", b, rng),
    );
    let mut down = Vec::new();
    let mut ch = b;
    for i in 0..cfg.n_down {
        let name = format!("down{i}");
        down.push((
            add_conv(&mut p, &name, ch, ch * 2, 3, 2, 1, false, init, rng),
            add_bn(&mut p, &format!("{name}.bn"), ch * 2, rng),
        ));
        ch *= 2;
    }
    let mut res = Vec::new();
    for i in 0..cfg.n_residual_blocks {
        let name = format!("res{i}");
        res.push(ResidualLayer {
            conv1: add_conv(&mut p, &format!("{name}.conv1"), ch, ch, 3, 1, 1, false, init, rng),
            bn1: add_bn(&mut p, &format!("{name}.bn1"), ch, rng),
            conv2: add_conv(&mut p, &format!("{name}.conv2"), ch, ch, 3, 1, 1, false, init, rng),
            bn2: add_bn(&mut p, &format!("{name}.bn2"), ch, rng),
        });
    }
    let mut up = Vec::new();
    for i in 0..cfg.n_down {
        let name = format!("up{i}");
        up.push((
            add_conv(&mut p, &name, ch, ch / 2, 3, 2, 1, true, init, rng),
            add_bn(&mut p, &format!("{name}.bn"), ch / 2, rng),
        ));
        ch /= 2;
    }
    let head = add_conv(&mut p, "head", ch, cfg.in_channels, 7, 1, 3, false, init, rng);
    Ok(Generator {
        cfg: *cfg,
        params: p,
        stem,
        down,
        res,
        up,
        head,
    })
}

impl<T: Real> Generator<T> {
    /// Maps a `[n, c, s, s]` batch with pixels in `[0, pixel_max]` to the other
    /// domain. `bound` must come from `self.params.bind`.
    pub fn forward(&mut self, tape: &mut Tape<T>, bound: &Bound, x: Var, mode: BnMode) -> Result<Var> {
        let s = self.cfg.image_size;
        match tape.shape(x) {
            [_, c, h, w] if *c == self.cfg.in_channels && *h == s && *w == s => {}
            other => {
                return Err(Error::shape(
                    "generator_forward",
                    format!(
                        "expected [n, {}, {s}, {s}], got {other:?}",
                        self.cfg.in_channels
                    ),
                ))
            }
        }
        let pm = self.cfg.pixel_max;
        let mut h = tape.affine(x, T::c(2.0 / pm), -T::one())?;
        h = apply_conv(tape, bound, &self.stem.0, h)?;
        h = apply_bn(tape, bound, &mut self.params, &self.stem.1, h, mode)?;
        h = tape.relu(h)?;
        for (conv, bn) in &self.down {
            h = apply_conv(tape, bound, conv, h)?;
            h = apply_bn(tape, bound, &mut self.params, bn, h, mode)?;
            h = tape.relu(h)?;
        }
        for r in &self.res {
            let mut m1 = self.params.tensor(r.bn1.mean).data().to_vec();
            let mut v1 = self.params.tensor(r.bn1.var).data().to_vec();
            let mut m2 = self.params.tensor(r.bn2.mean).data().to_vec();
            let mut v2 = self.params.tensor(r.bn2.var).data().to_vec();
            h = tape.residual_block(
                h,
                ResidualVars {
                    conv1_weight: bound.var(r.conv1.weight),
                    conv1_bias: Some(bound.var(r.conv1.bias)),
                    bn1: BnVars {
                        gamma: bound.var(r.bn1.gamma),
                        beta: bound.var(r.bn1.beta),
                        running_mean: &mut m1,
                        running_var: &mut v1,
                    },
                    conv2_weight: bound.var(r.conv2.weight),
                    conv2_bias: Some(bound.var(r.conv2.bias)),
                    bn2: BnVars {
                        gamma: bound.var(r.bn2.gamma),
                        beta: bound.var(r.bn2.beta),
                        running_mean: &mut m2,
                        running_var: &mut v2,
                    },
                },
                mode,
            )?;
            let e = self.params.entries_mut();
            e[r.bn1.mean].tensor.data_mut().copy_from_slice(&m1);
            e[r.bn1.var].tensor.data_mut().copy_from_slice(&v1);
            e[r.bn2.mean].tensor.data_mut().copy_from_slice(&m2);
            e[r.bn2.var].tensor.data_mut().copy_from_slice(&v2);
        }
        for (conv, bn) in &self.up {
            h = apply_conv(tape, bound, conv, h)?;
            h = apply_bn(tape, bound, &mut self.params, bn, h, mode)?;
            h = tape.relu(h)?;
        }
        h = apply_conv(tape, bound, &self.head, h)?;
        tape.scaled_atan(h, T::c(pm))
    }

    /// Forward pass outside of training. Eval mode leaves the parameters untouched.
    pub fn translate(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv, mode)?;
        Ok(tape.value(y).clone())
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            cfg: self.cfg,
            params: self.params.cast(),
            stem: self.stem.clone(),
            down: self.down.clone(),
            res: self.res.clone(),
            up: self.up.clone(),
            head: self.head.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            in_channels: 3,
            base_channels: 4,
            n_residual_blocks: 1,
            n_down: 2,
            image_size: 16,
            pixel_max: 255.0,
        }
    }

    #[test]
    fn desk_internal_resolution_is_quarter() {
        let cfg = GeneratorConfig::desk();
        assert_eq!(cfg.internal_resolution(), 8);
        assert_eq!(GeneratorConfig::paper_256().internal_resolution(), 64);
    }

    #[test]
    fn invalid_config_names_field() {
        let mut cfg = tiny();
        cfg.image_size = 18;
        let e = build_generator::<f32>(&cfg, &mut RngState::new(0)).unwrap_err();
        assert!(e.to_string().contains("generator.image_size"), "{e}");
        let mut cfg = tiny();
        cfg.n_residual_blocks = 0;
        let e = build_generator::<f32>(&cfg, &mut RngState::new(0)).unwrap_err();
        assert!(e.to_string().contains("n_residual_blocks"), "{e}");
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = tiny();
        let mut g = build_generator::<f32>(&cfg, &mut RngState::new(1)).unwrap();
        let x = Tensor::uniform(&[2, 3, 16, 16], 0.0, 255.0, &mut RngState::new(2));
        let y = g.translate(&x, BnMode::Train).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 255.0));
    }

    #[test]
    fn wrong_input_shape() {
        let mut g = build_generator::<f32>(&tiny(), &mut RngState::new(1)).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(g.translate(&x, BnMode::Eval).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut g = build_generator::<f32>(&tiny(), &mut RngState::new(1)).unwrap();
        let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 255.0, &mut RngState::new(2));
        let before = g.params.clone();
        let a = g.translate(&x, BnMode::Eval).unwrap();
        let b = g.translate(&x, BnMode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.params, before);
    }
}
