//! Downstream evaluation: cross-domain classification, label-retention
//! audits and domain embeddings.

mod audit;
mod classifier;
mod embed;
mod experiment;

pub use audit::{canonicalize, label_retention_audit, AuditMode, Oracle, RetentionReport, RetentionRow, ORACLE_NOISE_MAX};
pub use classifier::{cross_accuracy, train_classifier, Classifier, ClassifierTraining};
pub use embed::{
    centroid_gap, embed_domains, joint_probabilities, pca, tsne, tsne_objective, write_embedding_csv, DomainTag,
    EmbedMethod, EmbeddingPoint, TsneConfig,
};
pub use experiment::{run_experiment, split_target, ExperimentConfig, ExperimentReport};

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Root of every evaluation stream; see [`trial_seed`].
    pub seed: u64,
    pub trials: usize,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    pub classifier_batch: usize,
    pub oracle_epochs: usize,
    /// Images per domain in an embedding.
    pub n_samples: usize,
    pub perplexity: f64,
    pub tsne_iterations: usize,
    /// Pairs below this mean SSIM are suspect in the proxy audit.
    pub ssim_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            trials: 15,
            classifier_epochs: 5,
            classifier_lr: 0.001,
            classifier_batch: 32,
            oracle_epochs: 8,
            n_samples: 100,
            perplexity: 30.0,
            tsne_iterations: 1000,
            ssim_threshold: 0.3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("eval.trials", "must be >= 1"));
        }
        if self.classifier_batch == 0 {
            return Err(Error::config("eval.classifier_batch", "must be >= 1"));
        }
        if !(self.classifier_lr > 0.0) {
            return Err(Error::config("eval.classifier_lr", "must be > 0"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("eval.n_samples", "must be >= 1"));
        }
        if !(self.perplexity > 0.0) {
            return Err(Error::config("eval.perplexity", "must be > 0"));
        }
        if !(-1.0..=1.0).contains(&self.ssim_threshold) {
            return Err(Error::config("eval.ssim_threshold", "must lie in [-1, 1]"));
        }
        Ok(())
    }
}

impl EvalConfig {
    pub fn classifier_training(&self, seed: u64) -> ClassifierTraining {
        ClassifierTraining {
            epochs: self.classifier_epochs,
            lr: self.classifier_lr,
            batch_size: self.classifier_batch,
            seed,
        }
    }

    pub fn tsne(&self) -> TsneConfig {
        TsneConfig {
            perplexity: self.perplexity,
            iterations: self.tsne_iterations,
            ..TsneConfig::default()
        }
    }
}

/// Classifier seed of trial `k`.
pub fn trial_seed(eval_seed: u64, k: usize) -> u64 {
    RngState::new(eval_seed).derive_str("trial").derive(k as u64).seed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub mean: f64,
    /// Sample standard deviation (0 for a single trial).
    pub stdev: f64,
    pub accuracies: Vec<f64>,
}

impl TrialStats {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let stdev = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        TrialStats {
            mean,
            stdev,
            accuracies,
        }
    }
}

/// Trains a fresh classifier on `train` for every trial, varying only its
/// seed, and measures accuracy on `test`.
pub fn cross_accuracy_trials(train: &DomainDataset, test: &DomainDataset, cfg: &EvalConfig) -> Result<TrialStats> {
    let mut acc = Vec::with_capacity(cfg.trials);
    for k in 0..cfg.trials {
        let clf = train_classifier(train, &cfg.classifier_training(trial_seed(cfg.seed, k)))?;
        acc.push(cross_accuracy(&clf, test)?);
    }
    Ok(TrialStats::from_accuracies(acc))
}
