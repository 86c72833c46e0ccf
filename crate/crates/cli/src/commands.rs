use std::fs;
use std::path::{Path, PathBuf};

use debias::config::Config;
use debias::data::{load_dataset, preprocess_all, render_digits, save_dataset, synth_biased_pair, DomainDataset};
use debias::eval::{
    centroid_gap, cross_accuracy_trials, embed_domains, label_retention_audit, run_experiment, split_target,
    train_classifier, trial_seed, write_embedding_csv, AuditMode, EmbedMethod, ExperimentConfig, Oracle, TrialStats,
};
use debias::ssim::mean_ssim;
use debias::tensor::BnMode;
use debias::trainer::{
    generate_intermediate, read_provenance, train_augmenter, write_provenance, Trainer, Translator, CHECKPOINT_DIR,
};
use debias::{Error, Result, RngState};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{Command, Common};

const BASE_PER_CLASS: usize = 100;
const BASE_SEED: u64 = 7;

fn config(spec: &str, seed: Option<u64>) -> Result<Config> {
    let mut cfg = Config::load(spec)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a dataset and brings it to `[3, size, size]` when it is not already.
fn load_sized(dir: &Path, size: usize, workers: usize) -> Result<DomainDataset> {
    let ds = load_dataset(dir)?;
    if ds.images.iter().all(|i| i.pixels.shape() == [3, size, size]) {
        return Ok(ds);
    }
    log::info!("resizing {} to {size}x{size}", dir.display());
    preprocess_all(&ds, size, false, 0, workers)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

#[derive(Serialize)]
struct EvalReport {
    config_hash: String,
    train_sizes: [usize; 3],
    target_test_size: usize,
    source_only: TrialStats,
    debiased: TrialStats,
    target_trained: TrialStats,
}

#[derive(Serialize)]
struct AuditSummary {
    mode: AuditMode,
    threshold: f64,
    n: usize,
    retention: f64,
    suspect: usize,
}

#[derive(Serialize)]
struct EmbedSummary {
    method: String,
    n_samples: usize,
    feature_dim: usize,
    centroid_gap_source_target: f64,
    centroid_gap_intermediate_target: f64,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Digits {
            out,
            per_class,
            size,
            seed,
        } => {
            let mut m = RunManifest::start("digits");
            m.seed = Some(seed);
            let ds = render_digits(per_class, size, seed)?;
            save_dataset(&ds, &out)?;
            m.outputs.push(out.clone());
            println!("{} images in {}", ds.len(), out.display());
            m.write(&out)
        }
        Command::Synth {
            base,
            out,
            source_bias,
            target_bias,
            seed,
        } => {
            let mut m = RunManifest::start("synth");
            m.seed = Some(seed);
            let ds = load_dataset(&base)?;
            let pair = synth_biased_pair(&ds, &source_bias, &target_bias, seed)?;
            fs::create_dir_all(&out)?;
            save_dataset(&pair.x, &out.join("X"))?;
            save_dataset(&pair.y, &out.join("Y"))?;
            let mut w = csv::Writer::from_path(out.join("correspondence.csv"))?;
            w.write_record(["domain", "id", "base_id"])?;
            for (d, id, b) in &pair.correspondence {
                w.write_record([d, id, b])?;
            }
            w.flush()?;
            m.inputs.push(base);
            m.outputs.extend(["X", "Y", "correspondence.csv"].map(|p| out.join(p)));
            println!("X: {} images, Y: {} images", pair.x.len(), pair.y.len());
            m.write(&out)
        }
        Command::Train {
            source,
            target,
            config: spec,
            out,
            resume,
            common: Common { seed, workers },
        } => {
            let mut m = RunManifest::start("train");
            let cfg = config(&spec, seed)?;
            m.seed = Some(cfg.train.seed);
            m.config_hash = Some(cfg.hash());
            let size = cfg.train.generator.image_size;
            let x = load_sized(&source, size, workers)?;
            let y = load_sized(&target, size, workers)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.render())?;
            let (tr, log) = train_augmenter(&x, &y, &cfg.train, Some(&out), resume)?;
            if let Some(last) = log.last() {
                println!(
                    "step {}: adv_g {:.4} cycle {:.4} ssim {:.4} total {:.4}",
                    tr.step(),
                    last.adv_g,
                    last.cycle,
                    last.ssim,
                    last.total
                );
            } else {
                println!("step {}: nothing to train", tr.step());
            }
            m.inputs.extend([source, target]);
            m.outputs.extend(["config.txt", "train_log.csv", CHECKPOINT_DIR].map(|p| out.join(p)));
            m.write(&out)
        }
        Command::Generate {
            checkpoint,
            source,
            out,
            bn,
            common: Common { seed, workers },
        } => {
            let mut m = RunManifest::start("generate");
            m.seed = seed;
            let mut tr = Trainer::load(&checkpoint_dir(&checkpoint))?;
            m.config_hash = Some(Config { train: tr.cfg.clone(), eval: Default::default() }.hash());
            let mode = match bn.as_deref() {
                Some("eval") => BnMode::Eval,
                Some(_) => BnMode::Train,
                None => tr.cfg.generate_bn,
            };
            let x = load_sized(&source, tr.cfg.generator.image_size, workers)?;
            let ssim = tr.cfg.ssim.clone();
            let (z, prov) = generate_intermediate(Translator::Generator(&mut tr.g1, mode), &x, &ssim)?;
            save_dataset(&z, &out)?;
            write_provenance(&out.join("provenance.csv"), &prov)?;
            let mean = prov.iter().map(|p| p.mean_ssim).sum::<f64>() / prov.len().max(1) as f64;
            println!("{} images, mean SSIM to source {mean:.4}", z.len());
            m.inputs.extend([checkpoint, source]);
            m.outputs.push(out.clone());
            m.write(&out)
        }
        Command::Eval {
            source,
            intermediate,
            target,
            config: spec,
            out,
            common: Common { seed, workers },
        } => {
            let mut m = RunManifest::start("eval");
            let cfg = config(&spec, seed)?;
            m.seed = Some(cfg.eval.seed);
            m.config_hash = Some(cfg.hash());
            let size = cfg.train.generator.image_size;
            let x = load_sized(&source, size, workers)?;
            let z = load_sized(&intermediate, size, workers)?;
            let y = load_sized(&target, size, workers)?;
            let (y_fit, y_test) = split_target(&y)?;
            let report = EvalReport {
                config_hash: cfg.hash(),
                train_sizes: [x.len(), z.len(), y_fit.len()],
                target_test_size: y_test.len(),
                source_only: cross_accuracy_trials(&x, &y_test, &cfg.eval)?,
                debiased: cross_accuracy_trials(&z, &y_test, &cfg.eval)?,
                target_trained: cross_accuracy_trials(&y_fit, &y_test, &cfg.eval)?,
            };
            fs::create_dir_all(&out)?;
            write_json(&out.join("results.json"), &report)?;
            for (name, s) in [
                ("source only", &report.source_only),
                ("debiased", &report.debiased),
                ("trained on target", &report.target_trained),
            ] {
                println!("{name:<18} {:.4} +- {:.4}", s.mean, s.stdev);
            }
            m.inputs.extend([source, intermediate, target]);
            m.outputs.push(out.join("results.json"));
            m.write(&out)
        }
        Command::Audit {
            source,
            intermediate,
            mode,
            base,
            threshold,
            config: spec,
            out,
            common: Common { seed, workers },
        } => {
            let mut m = RunManifest::start("audit");
            let cfg = config(&spec, seed)?;
            m.seed = Some(cfg.eval.seed);
            m.config_hash = Some(cfg.hash());
            let size = cfg.train.generator.image_size;
            let x = load_sized(&source, size, workers)?;
            let z = load_sized(&intermediate, size, workers)?;
            let prov = read_provenance(&intermediate.join("provenance.csv"))?;
            let threshold = threshold.unwrap_or(cfg.eval.ssim_threshold);
            let oracle = match (mode, &base) {
                (AuditMode::GroundTruth, None) => {
                    return Err(Error::Config {
                        field: "base".into(),
                        reason: "ground_truth mode needs --base".into(),
                    })
                }
                (AuditMode::GroundTruth, Some(b)) => {
                    let base_ds = load_sized(b, size, workers)?;
                    let seed = RngState::new(cfg.eval.seed).derive_str("oracle").seed;
                    Some(Oracle::train(&base_ds, cfg.eval.oracle_epochs, seed)?)
                }
                (AuditMode::SsimProxy, _) => None,
            };
            let report = label_retention_audit(&x, &z, &prov, mode, threshold, oracle.as_ref())?;
            fs::create_dir_all(&out)?;
            report.write_csv(&out.join("retention.csv"))?;
            let summary = AuditSummary {
                mode,
                threshold,
                n: report.rows.len(),
                retention: report.retention,
                suspect: report.rows.iter().filter(|r| r.suspect).count(),
            };
            write_json(&out.join("audit.json"), &summary)?;
            println!("retention {:.4} ({} images)", report.retention, summary.n);
            m.inputs.extend([source, intermediate]);
            m.inputs.extend(base);
            m.outputs.extend(["retention.csv", "audit.json"].map(|p| out.join(p)));
            m.write(&out)
        }
        Command::Embed {
            source,
            intermediate,
            target,
            method,
            n_samples,
            config: spec,
            out,
            common: Common { seed, workers },
        } => {
            let mut m = RunManifest::start("embed");
            let mut cfg = config(&spec, seed)?;
            if let Some(n) = n_samples {
                cfg.eval.n_samples = n;
            }
            m.seed = Some(cfg.eval.seed);
            m.config_hash = Some(cfg.hash());
            let size = cfg.train.generator.image_size;
            let x = load_sized(&source, size, workers)?;
            let z = load_sized(&intermediate, size, workers)?;
            let y = load_sized(&target, size, workers)?;
            let (y_fit, _) = split_target(&y)?;
            let eval = &cfg.eval;
            let clf = train_classifier(&y_fit, &eval.classifier_training(trial_seed(eval.seed, 0)))?;
            let root = RngState::new(eval.seed);
            let points = embed_domains(
                &clf,
                [&x, &z, &y],
                eval.n_samples,
                method,
                &eval.tsne(),
                &mut root.derive_str("embed"),
            )?;
            let (st, it) = centroid_gap(&points)?;
            fs::create_dir_all(&out)?;
            write_embedding_csv(&out.join("embedding.csv"), &points)?;
            let summary = EmbedSummary {
                method: match method {
                    EmbedMethod::Pca => "pca".into(),
                    EmbedMethod::Tsne => "tsne".into(),
                },
                n_samples: eval.n_samples,
                feature_dim: clf.feature_dim(),
                centroid_gap_source_target: st,
                centroid_gap_intermediate_target: it,
            };
            write_json(&out.join("embedding.json"), &summary)?;
            println!("centroid gap: source-target {st:.4}, intermediate-target {it:.4}");
            m.inputs.extend([source, intermediate, target]);
            m.outputs.extend(["embedding.csv", "embedding.json"].map(|p| out.join(p)));
            m.write(&out)
        }
        Command::Ssim { a, b } => {
            let a = debias::data::read_image(&a)?;
            let b = debias::data::read_image(&b)?;
            let cfg = debias::ssim::SsimConfig::default();
            println!("{:.6}", mean_ssim(&a, &b, &cfg)?);
            Ok(())
        }
        Command::Experiment {
            base,
            source_bias,
            target_bias,
            config: spec,
            ablation,
            method,
            out,
            common: Common { seed, workers },
        } => {
            let mut m = RunManifest::start("experiment");
            let cfg = config(&spec, seed)?;
            m.seed = Some(cfg.train.seed);
            m.config_hash = Some(cfg.hash());
            let size = cfg.train.generator.image_size;
            let base_ds = match &base {
                Some(dir) => load_sized(dir, size, workers)?,
                None => render_digits(BASE_PER_CLASS, size, BASE_SEED)?,
            };
            let exp = ExperimentConfig {
                config: cfg.clone(),
                source_bias,
                target_bias,
                pair_seed: cfg.train.seed,
                ablation,
                embed_method: method,
            };
            let r = run_experiment(&base_ds, &exp, &out)?;
            println!(
                "accuracy: source only {:.4}, debiased {:.4}, trained on target {:.4}",
                r.accuracy.source_only.mean, r.accuracy.debiased.mean, r.accuracy.target_trained.mean
            );
            println!("retention {:.4}", r.retention);
            if let Some(a) = r.retention_ablation {
                println!("retention without SSIM {a:.4}");
            }
            println!(
                "centroid gap: source-target {:.4}, intermediate-target {:.4}",
                r.centroid_gap.source_target, r.centroid_gap.intermediate_target
            );
            m.inputs.extend(base);
            m.outputs.push(out.join("results.json"));
            m.write(&out)
        }
    }
}
