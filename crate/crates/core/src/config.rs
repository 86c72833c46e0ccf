//! Flat `key=value` run configuration.
//!
//! Lines are `key=value`; blank lines and text after `#` are ignored. A
//! `preset=desk|paper-256` line, wherever it appears, is applied before the
//! other keys. Unknown keys are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::ssim::Window;
use crate::tensor::BnMode;
use crate::trainer::{SsimReduction, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn desk() -> Self {
        Config {
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
        }
    }

    pub fn paper_256() -> Self {
        Config {
            train: TrainConfig::paper_256(),
            eval: EvalConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-256" => Ok(Self::paper_256()),
            other => Err(Error::config("preset", format!("unknown preset {other:?}"))),
        }
    }

    /// Parses config text on top of the `desk` preset and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected key=value"))?;
            pairs.push((k.trim(), v.trim()));
        }
        let mut cfg = Self::desk();
        for (_, v) in pairs.iter().filter(|(k, _)| *k == "preset") {
            cfg = Self::preset(v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, or builds a preset when `spec` names one.
    pub fn load(spec: &str) -> Result<Self> {
        if matches!(spec, "desk" | "paper-256") && !Path::new(spec).exists() {
            return Self::preset(spec);
        }
        Self::parse(&std::fs::read_to_string(spec)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("eval.") {
            return set_eval(&mut self.eval, rest, value).map_err(|e| rename(e, key));
        }
        set_train(&mut self.train, key, value)
    }

    /// Every setting in a fixed order.
    pub fn kv(&self) -> Vec<(String, String)> {
        let mut kv = train_kv(&self.train);
        kv.extend(eval_kv(&self.eval).into_iter().map(|(k, v)| (format!("eval.{k}"), v)));
        kv
    }

    pub fn render(&self) -> String {
        self.kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of [`Config::render`], in hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn rename(e: Error, key: &str) -> Error {
    match e {
        Error::Config { reason, .. } => Error::config(key, reason),
        other => other,
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::config(key, format!("{v:?}: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("{v:?} is not a boolean"))),
    }
}

fn bn_mode(key: &str, v: &str) -> Result<BnMode> {
    match v {
        "train" => Ok(BnMode::Train),
        "eval" => Ok(BnMode::Eval),
        _ => Err(Error::config(key, format!("{v:?}: expected train or eval"))),
    }
}

fn bn_name(m: BnMode) -> &'static str {
    match m {
        BnMode::Train => "train",
        BnMode::Eval => "eval",
    }
}

fn set_train(c: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "lambda" => c.lambda = num(key, v)?,
        "lambda_ssim" => c.lambda_ssim = num(key, v)?,
        "ssim_reduction" => {
            c.ssim_reduction = match v {
                "mean" => SsimReduction::Mean,
                "sum" => SsimReduction::Sum,
                _ => return Err(Error::config(key, format!("{v:?}: expected mean or sum"))),
            }
        }
        "lr" => c.lr = num(key, v)?,
        "adam_beta1" => c.adam_beta1 = num(key, v)?,
        "adam_beta2" => c.adam_beta2 = num(key, v)?,
        "epochs" => c.epochs = num(key, v)?,
        "max_steps" => c.max_steps = num(key, v)?,
        "batch_size" => c.batch_size = num(key, v)?,
        "buffer_capacity" => c.buffer_capacity = num(key, v)?,
        "seed" => c.seed = num(key, v)?,
        "d_steps_per_g_step" => c.d_steps_per_g_step = num(key, v)?,
        "augment" => c.augment = flag(key, v)?,
        "generate_bn" => c.generate_bn = bn_mode(key, v)?,
        "generator.in_channels" => c.generator.in_channels = num(key, v)?,
        "generator.base_channels" => c.generator.base_channels = num(key, v)?,
        "generator.n_residual_blocks" => c.generator.n_residual_blocks = num(key, v)?,
        "generator.n_down" => c.generator.n_down = num(key, v)?,
        "generator.image_size" => c.generator.image_size = num(key, v)?,
        "generator.pixel_max" => c.generator.pixel_max = num(key, v)?,
        "discriminator.in_channels" => c.discriminator.in_channels = num(key, v)?,
        "discriminator.n_layers" => c.discriminator.n_layers = num(key, v)?,
        "discriminator.base_channels" => c.discriminator.base_channels = num(key, v)?,
        "ssim.window_size" => c.ssim.window_size = num(key, v)?,
        "ssim.window" => {
            c.ssim.window = match v {
                "gaussian" => Window::Gaussian,
                "uniform" => Window::Uniform,
                _ => return Err(Error::config(key, format!("{v:?}: expected gaussian or uniform"))),
            }
        }
        "ssim.gaussian_sigma" => c.ssim.gaussian_sigma = num(key, v)?,
        "ssim.k1" => c.ssim.k1 = num(key, v)?,
        "ssim.k2" => c.ssim.k2 = num(key, v)?,
        "ssim.dynamic_range" => c.ssim.dynamic_range = num(key, v)?,
        _ => return Err(Error::config(key, "unknown key")),
    }
    Ok(())
}

/// The settings of a [`TrainConfig`] in a fixed order.
pub fn train_kv(c: &TrainConfig) -> Vec<(String, String)> {
    let window = match c.ssim.window {
        Window::Gaussian => "gaussian",
        Window::Uniform => "uniform",
    };
    let reduction = match c.ssim_reduction {
        SsimReduction::Mean => "mean",
        SsimReduction::Sum => "sum",
    };
    [
        ("lambda", c.lambda.to_string()),
        ("lambda_ssim", c.lambda_ssim.to_string()),
        ("ssim_reduction", reduction.to_string()),
        ("lr", c.lr.to_string()),
        ("adam_beta1", c.adam_beta1.to_string()),
        ("adam_beta2", c.adam_beta2.to_string()),
        ("epochs", c.epochs.to_string()),
        ("max_steps", c.max_steps.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("buffer_capacity", c.buffer_capacity.to_string()),
        ("seed", c.seed.to_string()),
        ("d_steps_per_g_step", c.d_steps_per_g_step.to_string()),
        ("augment", c.augment.to_string()),
        ("generate_bn", bn_name(c.generate_bn).to_string()),
        ("generator.in_channels", c.generator.in_channels.to_string()),
        ("generator.base_channels", c.generator.base_channels.to_string()),
        ("generator.n_residual_blocks", c.generator.n_residual_blocks.to_string()),
        ("generator.n_down", c.generator.n_down.to_string()),
        ("generator.image_size", c.generator.image_size.to_string()),
        ("generator.pixel_max", c.generator.pixel_max.to_string()),
        ("discriminator.in_channels", c.discriminator.in_channels.to_string()),
        ("discriminator.n_layers", c.discriminator.n_layers.to_string()),
        ("discriminator.base_channels", c.discriminator.base_channels.to_string()),
        ("ssim.window_size", c.ssim.window_size.to_string()),
        ("ssim.window", window.to_string()),
        ("ssim.gaussian_sigma", c.ssim.gaussian_sigma.to_string()),
        ("ssim.k1", c.ssim.k1.to_string()),
        ("ssim.k2", c.ssim.k2.to_string()),
        ("ssim.dynamic_range", c.ssim.dynamic_range.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn set_eval(c: &mut EvalConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "seed" => c.seed = num(key, v)?,
        "trials" => c.trials = num(key, v)?,
        "classifier_epochs" => c.classifier_epochs = num(key, v)?,
        "classifier_lr" => c.classifier_lr = num(key, v)?,
        "classifier_batch" => c.classifier_batch = num(key, v)?,
        "oracle_epochs" => c.oracle_epochs = num(key, v)?,
        "n_samples" => c.n_samples = num(key, v)?,
        "perplexity" => c.perplexity = num(key, v)?,
        "tsne_iterations" => c.tsne_iterations = num(key, v)?,
        "ssim_threshold" => c.ssim_threshold = num(key, v)?,
        _ => return Err(Error::config(key, "unknown key")),
    }
    Ok(())
}

fn eval_kv(c: &EvalConfig) -> Vec<(String, String)> {
    [
        ("seed", c.seed.to_string()),
        ("trials", c.trials.to_string()),
        ("classifier_epochs", c.classifier_epochs.to_string()),
        ("classifier_lr", c.classifier_lr.to_string()),
        ("classifier_batch", c.classifier_batch.to_string()),
        ("oracle_epochs", c.oracle_epochs.to_string()),
        ("n_samples", c.n_samples.to_string()),
        ("perplexity", c.perplexity.to_string()),
        ("tsne_iterations", c.tsne_iterations.to_string()),
        ("ssim_threshold", c.ssim_threshold.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}
