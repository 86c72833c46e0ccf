mod common;

use common::rand_tensor;
use debias::gradcheck::relative_error;
use debias::losses::{total_objective, GeneratorTerms, LossWeights};
use debias::networks::{
    build_discriminator, build_generator, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use debias::ssim::SsimConfig;
use debias::tensor::BnMode;
use debias::{RngState, Tape, Tensor};

/// Side of the input region whose pixels move one central patch output,
/// measured from the input gradient of that single output.
fn footprint(cfg: &DiscriminatorConfig, size: usize) -> usize {
    let mut d = build_discriminator::<f64>(cfg, 255.0, &mut RngState::new(1)).unwrap();
    let x = rand_tensor(2, &[1, cfg.in_channels, size, size], 0.0, 255.0);
    let mut tape = Tape::<f64>::new();
    let bound = d.params.bind(&mut tape, false);
    let xv = tape.param(x);
    let out = d.forward(&mut tape, &bound, xv, BnMode::Eval).unwrap();
    let (oh, ow) = (tape.shape(out)[2], tape.shape(out)[3]);
    let mut pick = Tensor::zeros(tape.shape(out));
    pick.data_mut()[(oh / 2) * ow + ow / 2] = 1.0;
    let pv = tape.constant(pick);
    let sel = tape.mul(out, pv).unwrap();
    let s = tape.sum(sel).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(xv).unwrap();
    let (mut lo, mut hi) = (usize::MAX, 0);
    for c in 0..cfg.in_channels {
        for r in 0..size {
            for col in 0..size {
                if g[(c * size + r) * size + col] != 0.0 {
                    lo = lo.min(r);
                    hi = hi.max(r);
                }
            }
        }
    }
    hi - lo + 1
}

#[test]
fn receptive_field_matches_gradient_footprint() {
    for n_layers in 1..=3 {
        let cfg = DiscriminatorConfig {
            in_channels: 3,
            n_layers,
            base_channels: 2,
        };
        let rf = cfg.receptive_field();
        let size = 2 * rf + 16;
        assert_eq!(footprint(&cfg, size), rf, "n_layers={n_layers}");
    }
    let paper = DiscriminatorConfig {
        base_channels: 2,
        ..DiscriminatorConfig::paper_256()
    };
    assert_eq!(paper.receptive_field(), 70);
    assert_eq!(footprint(&paper, 160), 70);
}

#[test]
fn parameter_counts_are_fixed_by_config() {
    let g = build_generator::<f32>(&GeneratorConfig::desk(), &mut RngState::new(0)).unwrap();
    assert_eq!(g.params.num_trainable(), 273_603);
    let d = build_discriminator::<f32>(&DiscriminatorConfig::desk(), 255.0, &mut RngState::new(0)).unwrap();
    assert_eq!(d.params.num_trainable(), 43_057);
    let g2 = build_generator::<f32>(&GeneratorConfig::desk(), &mut RngState::new(99)).unwrap();
    assert_eq!(g2.params.num_trainable(), g.params.num_trainable());
    assert_ne!(g2.params, g.params);
}

#[test]
fn generator_preserves_shape_and_range() {
    let cfg = GeneratorConfig {
        base_channels: 4,
        n_residual_blocks: 1,
        ..GeneratorConfig::desk()
    };
    assert_eq!(cfg.internal_resolution(), 8);
    let mut g = build_generator::<f32>(&cfg, &mut RngState::new(5)).unwrap();
    let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 255.0, &mut RngState::new(6));
    for mode in [BnMode::Train, BnMode::Eval] {
        let y = g.translate(&x, mode).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 255.0));
    }
    let a = g.translate(&x, BnMode::Eval).unwrap();
    let b = g.translate(&x, BnMode::Eval).unwrap();
    assert_eq!(a, b);
    assert!(g.translate(&Tensor::zeros(&[1, 3, 16, 16]), BnMode::Eval).is_err());
}

struct Nets {
    g1: Generator<f64>,
    g2: Generator<f64>,
    d1: Discriminator<f64>,
    d2: Discriminator<f64>,
}

impl Nets {
    fn new() -> Self {
        let gc = GeneratorConfig {
            in_channels: 2,
            base_channels: 2,
            n_residual_blocks: 1,
            n_down: 1,
            image_size: 8,
            pixel_max: 255.0,
        };
        let dc = DiscriminatorConfig {
            in_channels: 2,
            n_layers: 1,
            base_channels: 2,
        };
        let mut rng = RngState::new(77);
        Nets {
            g1: build_generator(&gc, &mut rng).unwrap(),
            g2: build_generator(&gc, &mut rng).unwrap(),
            d1: build_discriminator(&dc, 255.0, &mut rng).unwrap(),
            d2: build_discriminator(&dc, 255.0, &mut rng).unwrap(),
        }
    }

    fn store(&mut self, net: usize) -> &mut debias::params::ParamStore<f64> {
        match net {
            0 => &mut self.g1.params,
            1 => &mut self.g2.params,
            2 => &mut self.d1.params,
            _ => &mut self.d2.params,
        }
    }

    /// Generator objective and its analytic gradient for every network.
    fn objective(&mut self, x: &Tensor<f64>, y: &Tensor<f64>) -> (f64, Vec<Vec<Option<Vec<f64>>>>) {
        let mut t = Tape::<f64>::new();
        let b1 = self.g1.params.bind(&mut t, true);
        let b2 = self.g2.params.bind(&mut t, true);
        let c1 = self.d1.params.bind(&mut t, true);
        let c2 = self.d2.params.bind(&mut t, true);
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let m = BnMode::Train;
        let fake_y = self.g1.forward(&mut t, &b1, xv, m).unwrap();
        let fake_x = self.g2.forward(&mut t, &b2, yv, m).unwrap();
        let rec_x = self.g2.forward(&mut t, &b2, fake_y, m).unwrap();
        let rec_y = self.g1.forward(&mut t, &b1, fake_x, m).unwrap();
        let d1_fake = self.d1.forward(&mut t, &c1, fake_y, m).unwrap();
        let d2_fake = self.d2.forward(&mut t, &c2, fake_x, m).unwrap();
        let terms = GeneratorTerms {
            x: xv,
            y: yv,
            fake_y,
            fake_x,
            rec_x,
            rec_y,
            d1_fake,
            d2_fake,
        };
        let w = LossWeights {
            lambda: 10.0,
            lambda_ssim: 0.02,
            pixel_max: 255.0,
        };
        let cfg = SsimConfig {
            window_size: 5,
            ..Default::default()
        };
        let obj = total_objective(&mut t, &terms, None, &w, &cfg).unwrap();
        t.backward(obj.generator).unwrap();
        let grads = vec![
            self.g1.params.grads(&t, &b1),
            self.g2.params.grads(&t, &b2),
            self.d1.params.grads(&t, &c1),
            self.d2.params.grads(&t, &c2),
        ];
        (t.scalar(obj.generator), grads)
    }
}

#[test]
fn combined_objective_gradient_through_all_networks() {
    let mut nets = Nets::new();
    let x = rand_tensor(1, &[2, 2, 8, 8], 0.0, 255.0);
    let y = rand_tensor(2, &[2, 2, 8, 8], 0.0, 255.0);
    let (_, grads) = nets.objective(&x, &y);

    let mut rng = RngState::new(3);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    // small step: a leaky ReLU input of D2 sits within 1e-4 of its kink
    let h = 1e-6;
    for net in 0..4 {
        let n_entries = nets.store(net).len();
        let mut taken = 0;
        while taken < 8 {
            let idx = (rng.next_raw() % n_entries as u64) as usize;
            let Some(g) = &grads[net][idx] else { continue };
            taken += 1;
            let j = (rng.next_raw() % g.len() as u64) as usize;
            let orig = nets.store(net).tensor(idx).data()[j];
            let eval = |v: f64, nets: &mut Nets| {
                nets.store(net).entries_mut()[idx].tensor.data_mut()[j] = v;
                nets.objective(&x, &y).0
            };
            let fp = eval(orig + h, &mut nets);
            let fm = eval(orig - h, &mut nets);
            eval(orig, &mut nets);
            analytic.push(g[j]);
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-3, "{err}");
}
