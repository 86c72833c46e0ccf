use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    centroid_gap, cross_accuracy_trials, embed_domains, label_retention_audit, train_classifier, trial_seed,
    write_embedding_csv, AuditMode, EmbedMethod, Oracle, TrialStats,
};
use crate::config::Config;
use crate::data::{save_dataset, synth_biased_pair, BiasSpec, DomainDataset};
use crate::error::Result;
use crate::losses::LossReport;
use crate::rng::RngState;
use crate::trainer::{generate_intermediate, train_augmenter, write_provenance, Provenance, TrainConfig, Translator};

/// Everything a full debiasing run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub config: Config,
    pub source_bias: BiasSpec,
    pub target_bias: BiasSpec,
    /// Seed of the source/target split of the base set.
    pub pair_seed: u64,
    /// Also train with `lambda_ssim = 0` and audit that run.
    pub ablation: bool,
    pub embed_method: EmbedMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    /// Trained on the source domain.
    pub source_only: TrialStats,
    /// Trained on the generated intermediate domain.
    pub debiased: TrialStats,
    /// Trained on the held-in half of the target domain.
    pub target_trained: TrialStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidGap {
    pub source_target: f64,
    pub intermediate_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub source_bias: String,
    pub target_bias: String,
    pub source_size: usize,
    pub target_size: usize,
    pub target_test_size: usize,
    pub steps: u64,
    /// Mean cycle term over the first and the last epoch.
    pub cycle_first_epoch: f64,
    pub cycle_last_epoch: f64,
    pub accuracy: Accuracies,
    /// Oracle accuracy on its own (clean) training images.
    pub oracle_train_accuracy: f64,
    pub retention: f64,
    pub retention_ssim_proxy: f64,
    pub retention_ablation: Option<f64>,
    pub embedding_method: String,
    pub feature_dim: usize,
    pub n_samples: usize,
    pub centroid_gap: CentroidGap,
}

/// Splits a domain per class into alternating halves `(fit, test)`.
pub fn split_target(y: &DomainDataset) -> Result<(DomainDataset, DomainDataset)> {
    let mut seen = vec![0usize; y.n_classes];
    let (mut fit, mut test) = (Vec::new(), Vec::new());
    for img in &y.images {
        let k = &mut seen[img.label];
        if *k % 2 == 0 {
            fit.push(img.clone());
        } else {
            test.push(img.clone());
        }
        *k += 1;
    }
    Ok((
        DomainDataset::new(format!("{}_fit", y.name), fit, y.n_classes)?,
        DomainDataset::new(format!("{}_test", y.name), test, y.n_classes)?,
    ))
}

fn epoch_mean(log: &[LossReport], epoch: usize, spe: usize) -> f64 {
    let part = &log[epoch * spe..((epoch + 1) * spe).min(log.len())];
    part.iter().map(|r| r.cycle).sum::<f64>() / part.len() as f64
}

/// Trains an augmenter in `dir` and generates the intermediate domain.
fn augment_source(
    x: &DomainDataset,
    y: &DomainDataset,
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(DomainDataset, Vec<Provenance>, Vec<LossReport>)> {
    let (mut tr, log) = train_augmenter(x, y, cfg, Some(dir), false)?;
    let mode = tr.cfg.generate_bn;
    let (z, prov) = generate_intermediate(Translator::Generator(&mut tr.g1, mode), x, &cfg.ssim)?;
    Ok((z, prov, log))
}

/// The whole pipeline on a labeled base set: synthesize a biased domain pair,
/// train the augmenter, generate the intermediate domain, compare classifiers
/// trained on source, intermediate and target data, audit label retention,
/// and embed the three domains. Artifacts and `results.json` go to `out`.
pub fn run_experiment(base: &DomainDataset, cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.config.validate()?;
    let train = &cfg.config.train;
    let eval = &cfg.config.eval;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.config.render())?;

    let pair = synth_biased_pair(base, &cfg.source_bias, &cfg.target_bias, cfg.pair_seed)?;
    save_dataset(&pair.x, &out.join("X"))?;
    save_dataset(&pair.y, &out.join("Y"))?;
    log::info!("pair: |X| = {}, |Y| = {}", pair.x.len(), pair.y.len());

    let (z, prov, log) = augment_source(&pair.x, &pair.y, train, &out.join("augmenter"))?;
    save_dataset(&z, &out.join("Z"))?;
    write_provenance(&out.join("Z").join("provenance.csv"), &prov)?;
    let spe = pair.x.len().div_ceil(train.batch_size);
    let epochs = log.len().div_ceil(spe);
    let (cycle_first, cycle_last) = if log.is_empty() {
        (0.0, 0.0)
    } else {
        (epoch_mean(&log, 0, spe), epoch_mean(&log, epochs - 1, spe))
    };
    log::info!("augmenter: {} steps, cycle {cycle_first:.4} -> {cycle_last:.4}", log.len());

    let (y_fit, y_test) = split_target(&pair.y)?;
    let accuracy = Accuracies {
        source_only: cross_accuracy_trials(&pair.x, &y_test, eval)?,
        debiased: cross_accuracy_trials(&z, &y_test, eval)?,
        target_trained: cross_accuracy_trials(&y_fit, &y_test, eval)?,
    };
    log::info!(
        "accuracy: source-only {:.3}, debiased {:.3}, target-trained {:.3}",
        accuracy.source_only.mean,
        accuracy.debiased.mean,
        accuracy.target_trained.mean
    );

    let root = RngState::new(eval.seed);
    let oracle = Oracle::train(base, eval.oracle_epochs, root.derive_str("oracle").seed)?;
    let audit = label_retention_audit(&pair.x, &z, &prov, AuditMode::GroundTruth, eval.ssim_threshold, Some(&oracle))?;
    audit.write_csv(&out.join("retention.csv"))?;
    let proxy = label_retention_audit(&pair.x, &z, &prov, AuditMode::SsimProxy, eval.ssim_threshold, None)?;
    log::info!("retention {:.4}, ssim proxy {:.4}", audit.retention, proxy.retention);

    let retention_ablation = if cfg.ablation {
        let mut ab = train.clone();
        ab.lambda_ssim = 0.0;
        let dir = out.join("ablation");
        let (za, pa, _) = augment_source(&pair.x, &pair.y, &ab, &dir.join("augmenter"))?;
        let r = label_retention_audit(&pair.x, &za, &pa, AuditMode::GroundTruth, eval.ssim_threshold, Some(&oracle))?;
        r.write_csv(&dir.join("retention.csv"))?;
        log::info!("ablation retention {:.4}", r.retention);
        Some(r.retention)
    } else {
        None
    };

    let feature_clf = train_classifier(&y_fit, &eval.classifier_training(trial_seed(eval.seed, 0)))?;
    let points = embed_domains(
        &feature_clf,
        [&pair.x, &z, &pair.y],
        eval.n_samples,
        cfg.embed_method,
        &eval.tsne(),
        &mut root.derive_str("embed"),
    )?;
    write_embedding_csv(&out.join("embedding.csv"), &points)?;
    let (st, it) = centroid_gap(&points)?;

    let report = ExperimentReport {
        config_hash: cfg.config.hash(),
        source_bias: cfg.source_bias.to_string(),
        target_bias: cfg.target_bias.to_string(),
        source_size: pair.x.len(),
        target_size: pair.y.len(),
        target_test_size: y_test.len(),
        steps: log.len() as u64,
        cycle_first_epoch: cycle_first,
        cycle_last_epoch: cycle_last,
        accuracy,
        oracle_train_accuracy: oracle.classifier.train_accuracy,
        retention: audit.retention,
        retention_ssim_proxy: proxy.retention,
        retention_ablation,
        embedding_method: match cfg.embed_method {
            EmbedMethod::Pca => "pca".into(),
            EmbedMethod::Tsne => "tsne".into(),
        },
        feature_dim: feature_clf.feature_dim(),
        n_samples: eval.n_samples,
        centroid_gap: CentroidGap {
            source_target: st,
            intermediate_target: it,
        },
    };
    fs::write(out.join("results.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
