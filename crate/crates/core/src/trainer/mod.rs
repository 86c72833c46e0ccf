//! The augmentation network's training loop and intermediate-domain generation.
//!
//! Every random choice in a step is drawn from a stream derived from
//! `(seed, purpose, step)`, and the image buffers carry their own streams, so
//! a checkpoint holding parameters, optimizer moments, buffers and the step
//! counter is enough to continue a run exactly.

mod buffer;
mod generate;

pub use buffer::ImageBuffer;
pub use generate::{generate_intermediate, read_provenance, write_provenance, Provenance, Translator};

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{augment, batch_indices, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss, total_objective, GeneratorTerms, LossReport, LossWeights};
use crate::networks::{
    build_discriminator, build_generator, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::ssim::SsimConfig;
use crate::tensor::{BnMode, Tape, Tensor};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Reduction of `1 - SSIM(p)` over the pixel locations of one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimReduction {
    /// Mean over pixel locations.
    Mean,
    /// Sum over pixel locations (channel-averaged SSIM at each location).
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lambda_ssim: f64,
    /// How the SSIM term is reduced over pixel locations.
    pub ssim_reduction: SsimReduction,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    /// Random rotation and flip of every training image.
    pub augment: bool,
    /// Stop after this many steps in total; 0 means no limit.
    pub max_steps: u64,
    /// Batch-norm mode of the generator when producing the intermediate domain.
    pub generate_bn: BnMode,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub ssim: SsimConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lambda: 10.0,
            lambda_ssim: 0.02,
            ssim_reduction: SsimReduction::Sum,
            lr: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epochs: 30,
            batch_size: 1,
            buffer_capacity: 50,
            seed: 0,
            d_steps_per_g_step: 1,
            augment: true,
            max_steps: 0,
            generate_bn: BnMode::Train,
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            ssim: SsimConfig::default(),
        }
    }

    pub fn paper_256() -> Self {
        TrainConfig {
            epochs: 60,
            generator: GeneratorConfig::paper_256(),
            discriminator: DiscriminatorConfig::paper_256(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be >= 0"));
        }
        if !(self.lambda_ssim >= 0.0) {
            return Err(Error::config("lambda_ssim", "must be >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        for (key, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("buffer_capacity", "must be >= 1"));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(Error::config("d_steps_per_g_step", "must be >= 1"));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.ssim.validate()?;
        if self.generator.in_channels != self.discriminator.in_channels {
            return Err(Error::config(
                "discriminator.in_channels",
                "must equal generator.in_channels",
            ));
        }
        if self.discriminator.output_size(self.generator.image_size).is_none() {
            return Err(Error::config(
                "discriminator.n_layers",
                "too deep for generator.image_size",
            ));
        }
        if self.ssim.window_size > self.generator.image_size {
            return Err(Error::config("ssim.window_size", "larger than generator.image_size"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    /// Loss weights, with `lambda_ssim` scaled by the number of pixel
    /// locations under [`SsimReduction::Sum`].
    pub fn weights(&self) -> LossWeights {
        let per_pixel = match self.ssim_reduction {
            SsimReduction::Mean => 1.0,
            SsimReduction::Sum => (self.generator.image_size * self.generator.image_size) as f64,
        };
        LossWeights {
            lambda: self.lambda,
            lambda_ssim: self.lambda_ssim * per_pixel,
            pixel_max: self.generator.pixel_max,
        }
    }

    /// Settings that shape the trajectory of a run, one `key=value` per line.
    /// The run length and the generation mode are left out, so a run can be
    /// extended or regenerated from its checkpoint.
    fn trajectory_kv(&self) -> String {
        let mut kv = crate::config::train_kv(self);
        kv.retain(|(k, _)| !matches!(k.as_str(), "epochs" | "max_steps" | "generate_bn"));
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the trajectory settings, stored in checkpoints.
    pub fn trajectory_hash(&self) -> String {
        let digest = Sha256::digest(self.trajectory_kv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_images(ds: &DomainDataset, cfg: &GeneratorConfig) -> Result<()> {
    ds.require_non_empty()?;
    let want = [cfg.in_channels, cfg.image_size, cfg.image_size];
    match ds.image_shape() {
        Some(s) if s == want => Ok(()),
        other => Err(Error::config(
            "generator.image_size",
            format!(
                "dataset {:?} has images of shape {:?}, the networks expect {want:?}",
                ds.name, other
            ),
        )),
    }
}

/// Both generators, both discriminators, their optimizer states, the image
/// buffers and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub g1: Generator,
    pub g2: Generator,
    pub d1: Discriminator,
    pub d2: Discriminator,
    opt_g1: AdamState,
    opt_g2: AdamState,
    opt_d1: AdamState,
    opt_d2: AdamState,
    /// Past `G1` outputs, shown to `D1`.
    pub buffer_y: ImageBuffer,
    /// Past `G2` outputs, shown to `D2`.
    pub buffer_x: ImageBuffer,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let root = RngState::new(cfg.seed);
        let pm = cfg.generator.pixel_max;
        let g1 = build_generator(&cfg.generator, &mut root.derive_str("g1"))?;
        let g2 = build_generator(&cfg.generator, &mut root.derive_str("g2"))?;
        let d1 = build_discriminator(&cfg.discriminator, pm, &mut root.derive_str("d1"))?;
        let d2 = build_discriminator(&cfg.discriminator, pm, &mut root.derive_str("d2"))?;
        Ok(Trainer {
            opt_g1: AdamState::new(&g1.params),
            opt_g2: AdamState::new(&g2.params),
            opt_d1: AdamState::new(&d1.params),
            opt_d2: AdamState::new(&d2.params),
            buffer_y: ImageBuffer::new(cfg.buffer_capacity, root.derive_str("buffer_y")),
            buffer_x: ImageBuffer::new(cfg.buffer_capacity, root.derive_str("buffer_x")),
            g1,
            g2,
            d1,
            d2,
            cfg,
            step: 0,
        })
    }

    /// Completed training steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self, n_source: usize) -> u64 {
        n_source.div_ceil(self.cfg.batch_size) as u64
    }

    fn stream(&self, purpose: &str) -> RngState {
        RngState::new(self.cfg.seed).derive_str(purpose).derive(self.step)
    }

    fn source_batch(&self, x: &DomainDataset) -> Vec<usize> {
        let spe = self.steps_per_epoch(x.len());
        let (epoch, pos) = (self.step / spe, self.step % spe);
        let mut order_rng = RngState::new(self.cfg.seed).derive_str("source_order").derive(epoch);
        batch_indices(x.len(), self.cfg.batch_size, &mut order_rng).swap_remove(pos as usize)
    }

    fn load_batch(&self, ds: &DomainDataset, idx: &[usize], rng: &mut RngState) -> Result<Tensor<f32>> {
        if !self.cfg.augment {
            return ds.stack(idx);
        }
        let items: Vec<Tensor<f32>> = idx.iter().map(|&i| augment(&ds.images[i].pixels, rng)).collect();
        Tensor::stack(&items.iter().collect::<Vec<_>>())
    }

    /// One generator update followed by `d_steps_per_g_step` discriminator
    /// updates. `x` is read with labels ignored; `y` is sampled uniformly.
    pub fn train_step(&mut self, x: &DomainDataset, y: &DomainDataset) -> Result<LossReport> {
        check_images(x, &self.cfg.generator)?;
        check_images(y, &self.cfg.generator)?;
        let step = self.step + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } | Error::NonFiniteGradient { op } => Error::Diverged {
                step,
                reason: format!("non-finite value in {op}"),
            },
            other => other,
        };

        let xi = self.source_batch(x);
        let mut y_rng = self.stream("target_sample");
        let yi: Vec<usize> = (0..xi.len()).map(|_| y_rng.gen_range(0..y.len())).collect();
        let mut aug = self.stream("augment");
        let xb = self.load_batch(x, &xi, &mut aug)?;
        let yb = self.load_batch(y, &yi, &mut aug)?;

        let (mut report, fake_y, fake_x) = self.generator_update(&xb, &yb).map_err(diverged)?;
        let fake_y = self.buffer_y.query(&fake_y)?;
        let fake_x = self.buffer_x.query(&fake_x)?;
        for _ in 0..self.cfg.d_steps_per_g_step {
            let (l1, l2) = self.discriminator_update(&xb, &yb, &fake_y, &fake_x).map_err(diverged)?;
            report.adv_d1 = l1;
            report.adv_d2 = l2;
        }
        if !report.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("non-finite loss {report:?}"),
            });
        }
        self.step = step;
        Ok(report)
    }

    fn generator_update(
        &mut self,
        xb: &Tensor<f32>,
        yb: &Tensor<f32>,
    ) -> Result<(LossReport, Tensor<f32>, Tensor<f32>)> {
        let m = BnMode::Train;
        let mut t = Tape::new();
        let b1 = self.g1.params.bind(&mut t, true);
        let b2 = self.g2.params.bind(&mut t, true);
        let c1 = self.d1.params.bind(&mut t, false);
        let c2 = self.d2.params.bind(&mut t, false);
        let x = t.constant(xb.clone());
        let y = t.constant(yb.clone());
        let fake_y = self.g1.forward(&mut t, &b1, x, m)?;
        let rec_x = self.g2.forward(&mut t, &b2, fake_y, m)?;
        let fake_x = self.g2.forward(&mut t, &b2, y, m)?;
        let rec_y = self.g1.forward(&mut t, &b1, fake_x, m)?;
        // the discriminators' running statistics are not used, keep them fixed
        let (s1, s2) = (self.d1.params.clone(), self.d2.params.clone());
        let d1_fake = self.d1.forward(&mut t, &c1, fake_y, m)?;
        let d2_fake = self.d2.forward(&mut t, &c2, fake_x, m)?;
        self.d1.params = s1;
        self.d2.params = s2;
        let terms = GeneratorTerms {
            x,
            y,
            fake_y,
            fake_x,
            rec_x,
            rec_y,
            d1_fake,
            d2_fake,
        };
        let obj = total_objective(&mut t, &terms, None, &self.cfg.weights(), &self.cfg.ssim)?;
        t.backward(obj.generator)?;
        let g1_grads = self.g1.params.grads(&t, &b1);
        let g2_grads = self.g2.params.grads(&t, &b2);
        let adam = self.cfg.adam();
        adam_step(&mut self.g1.params, &g1_grads, &mut self.opt_g1, &adam)?;
        adam_step(&mut self.g2.params, &g2_grads, &mut self.opt_g2, &adam)?;
        Ok((obj.report, t.value(fake_y).clone(), t.value(fake_x).clone()))
    }

    fn discriminator_update(
        &mut self,
        xb: &Tensor<f32>,
        yb: &Tensor<f32>,
        fake_y: &Tensor<f32>,
        fake_x: &Tensor<f32>,
    ) -> Result<(f64, f64)> {
        let m = BnMode::Train;
        let mut t = Tape::new();
        let c1 = self.d1.params.bind(&mut t, true);
        let c2 = self.d2.params.bind(&mut t, true);
        let (x, y) = (t.constant(xb.clone()), t.constant(yb.clone()));
        let (fy, fx) = (t.constant(fake_y.clone()), t.constant(fake_x.clone()));
        let r1 = self.d1.forward(&mut t, &c1, y, m)?;
        let f1 = self.d1.forward(&mut t, &c1, fy, m)?;
        let r2 = self.d2.forward(&mut t, &c2, x, m)?;
        let f2 = self.d2.forward(&mut t, &c2, fx, m)?;
        let l1 = discriminator_loss(&mut t, r1, f1)?;
        let l2 = discriminator_loss(&mut t, r2, f2)?;
        let both = t.add(l1, l2)?;
        t.backward(both)?;
        let adam = self.cfg.adam();
        let g = self.d1.params.grads(&t, &c1);
        adam_step(&mut self.d1.params, &g, &mut self.opt_d1, &adam)?;
        let g = self.d2.params.grads(&t, &c2);
        adam_step(&mut self.d2.params, &g, &mut self.opt_d2, &adam)?;
        Ok((f64::from(t.scalar(l1)), f64::from(t.scalar(l2))))
    }

    fn stores(&self) -> [(&'static str, &ParamStore, &AdamState); 4] {
        [
            ("g1", &self.g1.params, &self.opt_g1),
            ("g2", &self.g2.params, &self.opt_g2),
            ("d1", &self.d1.params, &self.opt_d1),
            ("d2", &self.d2.params, &self.opt_d2),
        ]
    }

    /// Writes the full training state to `dir` (see [`crate::checkpoint`]).
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut owned: Vec<(String, Tensor<f32>)> = Vec::new();
        for (tag, store, opt) in self.stores() {
            for (i, e) in store.entries().iter().enumerate() {
                owned.push((format!("{tag}/{}", e.name), e.tensor.clone()));
                if e.trainable {
                    let shape = e.tensor.shape().to_vec();
                    owned.push((format!("{tag}/{}#m", e.name), Tensor::new(shape.clone(), opt.m[i].clone())?));
                    owned.push((format!("{tag}/{}#v", e.name), Tensor::new(shape, opt.v[i].clone())?));
                }
            }
        }
        for (tag, buf) in [("buffer_y", &self.buffer_y), ("buffer_x", &self.buffer_x)] {
            for (k, img) in buf.slots().iter().enumerate() {
                owned.push((format!("{tag}/{k}"), img.clone()));
            }
        }
        let meta = json!({
            "kind": "augmenter",
            "step": self.step,
            "config": crate::config::train_kv(&self.cfg)
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>(),
            "trajectory_hash": self.cfg.trajectory_hash(),
            "adam_steps": [self.opt_g1.step, self.opt_g2.step, self.opt_d1.step, self.opt_d2.step],
            "buffer_y": { "len": self.buffer_y.len(), "rng": self.buffer_y.rng() },
            "buffer_x": { "len": self.buffer_x.len(), "rng": self.buffer_x.rng() },
        });
        let refs: Vec<(String, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::save(dir, &refs, meta)
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let (tensors, meta) = checkpoint::load(dir)?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: missing or invalid {what}", dir.display()));
        if meta["kind"] != "augmenter" {
            return Err(bad("kind"));
        }
        let lines: Vec<String> = serde_json::from_value(meta["config"].clone()).map_err(|_| bad("config"))?;
        let cfg = crate::config::Config::parse(&lines.join("\n"))?.train;
        let mut tr = Trainer::new(cfg)?;
        if meta["trajectory_hash"] != tr.cfg.trajectory_hash() {
            return Err(bad("trajectory_hash"));
        }
        let mut map: HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor<f32>> {
            match map.remove(&name) {
                Some(t) if t.shape() == shape => Ok(t),
                Some(t) => Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                ))),
                None => Err(Error::Checkpoint(format!("{name}: missing"))),
            }
        };
        let adam_steps: [u64; 4] = serde_json::from_value(meta["adam_steps"].clone()).map_err(|_| bad("adam_steps"))?;
        let slots = [
            (&mut tr.g1.params, &mut tr.opt_g1, "g1", adam_steps[0]),
            (&mut tr.g2.params, &mut tr.opt_g2, "g2", adam_steps[1]),
            (&mut tr.d1.params, &mut tr.opt_d1, "d1", adam_steps[2]),
            (&mut tr.d2.params, &mut tr.opt_d2, "d2", adam_steps[3]),
        ];
        for (store, opt, tag, steps) in slots {
            for (i, e) in store.entries_mut().iter_mut().enumerate() {
                let shape = e.tensor.shape().to_vec();
                e.tensor = take(format!("{tag}/{}", e.name), &shape)?;
                if e.trainable {
                    opt.m[i] = take(format!("{tag}/{}#m", e.name), &shape)?.into_data();
                    opt.v[i] = take(format!("{tag}/{}#v", e.name), &shape)?.into_data();
                }
            }
            opt.step = steps;
        }
        let img_shape = [
            tr.cfg.generator.in_channels,
            tr.cfg.generator.image_size,
            tr.cfg.generator.image_size,
        ];
        for tag in ["buffer_y", "buffer_x"] {
            let len = meta[tag]["len"].as_u64().ok_or_else(|| bad(tag))? as usize;
            let rng: RngState = serde_json::from_value(meta[tag]["rng"].clone()).map_err(|_| bad(tag))?;
            let slots = (0..len)
                .map(|k| take(format!("{tag}/{k}"), &img_shape))
                .collect::<Result<Vec<_>>>()?;
            if len > tr.cfg.buffer_capacity {
                return Err(bad(tag));
            }
            let buf = ImageBuffer::restore(tr.cfg.buffer_capacity, slots, rng);
            if tag == "buffer_y" {
                tr.buffer_y = buf;
            } else {
                tr.buffer_x = buf;
            }
        }
        if let Some(name) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        tr.step = meta["step"].as_u64().ok_or_else(|| bad("step"))?;
        Ok(tr)
    }

    /// Restores a checkpoint and adopts the run length of `cfg`, which must
    /// otherwise describe the same run.
    pub fn resume(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let mut tr = Trainer::load(dir)?;
        if tr.cfg.trajectory_hash() != cfg.trajectory_hash() {
            return Err(Error::Checkpoint(
                "config differs from the one the checkpoint was trained with".into(),
            ));
        }
        tr.cfg.epochs = cfg.epochs;
        tr.cfg.max_steps = cfg.max_steps;
        tr.cfg.generate_bn = cfg.generate_bn;
        Ok(tr)
    }

    /// Total steps the configured run performs on a source set of `n_source` images.
    pub fn planned_steps(&self, n_source: usize) -> u64 {
        let total = self.cfg.epochs as u64 * self.steps_per_epoch(n_source);
        if self.cfg.max_steps > 0 {
            total.min(self.cfg.max_steps)
        } else {
            total
        }
    }

    /// Trains until the configured run length. With `out`, appends one row per
    /// step to `train_log.csv` and writes `checkpoint/` after every epoch and
    /// at the end. A diverged step returns an error and leaves the last
    /// checkpoint in place.
    pub fn run(&mut self, x: &DomainDataset, y: &DomainDataset, out: Option<&Path>) -> Result<Vec<LossReport>> {
        check_images(x, &self.cfg.generator)?;
        check_images(y, &self.cfg.generator)?;
        let spe = self.steps_per_epoch(x.len());
        let stop = self.planned_steps(x.len());
        let mut log = match out {
            Some(dir) => Some(open_log(dir, self.step)?),
            None => None,
        };
        let mut reports = Vec::new();
        let mut saved_at = None;
        while self.step < stop {
            let r = self.train_step(x, y)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", r.csv_row(self.step))?;
            }
            if self.step % spe == 0 {
                let epoch = self.step / spe;
                log::info!("epoch {epoch}: step {} total {:.4} cycle {:.4}", self.step, r.total, r.cycle);
                if let Some(dir) = out {
                    self.save(&dir.join(CHECKPOINT_DIR))?;
                    saved_at = Some(self.step);
                }
            }
            reports.push(r);
        }
        if let Some(dir) = out {
            if saved_at != Some(self.step) {
                self.save(&dir.join(CHECKPOINT_DIR))?;
            }
        }
        Ok(reports)
    }
}

/// Opens `train_log.csv` for appending after `step` completed steps, dropping
/// any rows a crashed run wrote past its last checkpoint.
fn open_log(dir: &Path, step: u64) -> Result<fs::File> {
    fs::create_dir_all(dir)?;
    let path = dir.join(TRAIN_LOG);
    let mut text = format!("{}\n", LossReport::CSV_HEADER);
    if step > 0 {
        let existing = fs::read_to_string(&path).unwrap_or_default();
        for line in existing.lines().skip(1) {
            let s: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
            if s <= step {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    fs::write(&path, text)?;
    Ok(fs::OpenOptions::new().append(true).open(path)?)
}

/// Builds a trainer (or resumes the checkpoint under `out`, when `resume` is
/// set and one exists) and runs it to completion.
pub fn train_augmenter(
    x: &DomainDataset,
    y: &DomainDataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<(Trainer, Vec<LossReport>)> {
    let ckpt = out.map(|d| d.join(CHECKPOINT_DIR));
    let mut tr = match &ckpt {
        Some(dir) if resume && dir.exists() => Trainer::resume(dir, cfg)?,
        _ => Trainer::new(cfg.clone())?,
    };
    let log = tr.run(x, y, out)?;
    Ok((tr, log))
}
