use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Intermediate,
    Target,
}

impl DomainTag {
    pub const ALL: [DomainTag; 3] = [DomainTag::Source, DomainTag::Intermediate, DomainTag::Target];

    pub fn name(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Intermediate => "intermediate",
            DomainTag::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub domain: DomainTag,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMethod {
    Pca,
    Tsne,
}

impl FromStr for EmbedMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(EmbedMethod::Pca),
            "tsne" => Ok(EmbedMethod::Tsne),
            other => Err(Error::config("method", format!("{other:?}: expected pca or tsne"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Symmetric joint probabilities `p_ij = (p_j|i + p_i|j) / 2n`, with each
/// conditional distribution's bandwidth found by bisection so its perplexity
/// matches `perplexity`.
pub fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let d = squared_distances(x);
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let mut p = vec![0.0; n];
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                p[j] = if j == i { 0.0 } else { (-beta * row[j]).exp() };
                sum += p[j];
                weighted += p[j] * row[j];
            }
            if sum <= 0.0 {
                // bandwidth too narrow for any neighbour: widen
                hi = beta;
                beta = (lo + hi) / 2.0;
                continue;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for v in p.iter_mut() {
                *v /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-6 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (lo + hi) / 2.0;
            }
        }
        cond[i * n..(i + 1) * n].copy_from_slice(&p);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        joint[i * n + i] = 0.0;
    }
    joint
}

/// `KL(P || Q)` of a 2-D layout `y` (row-major `[n, 2]`) and its gradient,
/// with Student-t similarities `q_ij` proportional to `1 / (1 + |y_i - y_j|^2)`.
pub fn tsne_objective(p: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let n = y.len() / 2;
    let mut w = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                w[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
                z += w[i * n + j];
            }
        }
    }
    let mut kl = 0.0;
    let mut grad = vec![0.0; 2 * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j];
            let qij = w[i * n + j] / z;
            if pij > 0.0 {
                kl += pij * (pij / qij).ln();
            }
            let m = 4.0 * (pij - qij) * w[i * n + j];
            grad[2 * i] += m * (y[2 * i] - y[2 * j]);
            grad[2 * i + 1] += m * (y[2 * i + 1] - y[2 * j + 1]);
        }
    }
    (kl, grad)
}

/// Exact t-SNE to two dimensions: early exaggeration, momentum 0.5 then 0.8
/// and per-coordinate adaptive gains. The perplexity is capped at `(n - 1) / 3`.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig, rng: &mut RngState) -> Vec<[f64; 2]> {
    let n = x.len();
    if n < 2 {
        return vec![[0.0, 0.0]; n];
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let p = joint_probabilities(x, perplexity);
    let normal = Normal::new(0.0, 1e-4).expect("valid");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0; 2 * n];
    let exaggerated: Vec<f64> = p.iter().map(|v| v * cfg.early_exaggeration).collect();
    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iterations;
        let (_, grad) = tsne_objective(if early { &exaggerated } else { &p }, &y);
        let momentum = if early { 0.5 } else { 0.8 };
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8f64).max(0.01)
            };
            update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[2 * i + c] -= mean;
            }
        }
    }
    (0..n).map(|i| [y[2 * i], y[2 * i + 1]]).collect()
}

/// Projection onto the two leading principal components. Each component's
/// largest-magnitude loading is made positive so the output is unique.
pub fn pca(x: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let d = x[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comps = Vec::new();
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v = -v;
        }
        comps.push(v);
    }
    while comps.len() < 2 {
        comps.push(nalgebra::DVector::zeros(d));
    }
    (0..n)
        .map(|i| {
            let row = centered.row(i);
            [row.dot(&comps[0].transpose()), row.dot(&comps[1].transpose())]
        })
        .collect()
}

/// Penultimate-layer features of `n_samples` randomly chosen images from each
/// of the three domains, reduced jointly to two dimensions.
pub fn embed_domains(
    clf: &Classifier,
    domains: [&DomainDataset; 3],
    n_samples: usize,
    method: EmbedMethod,
    tsne_cfg: &TsneConfig,
    rng: &mut RngState,
) -> Result<Vec<EmbeddingPoint>> {
    let mut feats = Vec::with_capacity(3 * n_samples);
    let mut tags = Vec::with_capacity(3 * n_samples);
    for (tag, ds) in DomainTag::ALL.into_iter().zip(domains) {
        if n_samples > ds.len() {
            return Err(Error::InsufficientSamples {
                name: ds.name.clone(),
                needed: n_samples,
                available: ds.len(),
            });
        }
        let mut pick = sample(&mut rng.derive_str(tag.name()), ds.len(), n_samples).into_vec();
        pick.sort_unstable();
        let f = clf.features(&ds.stack(&pick)?)?;
        let dim = f.shape()[1];
        feats.extend(f.data().chunks(dim).map(|r| r.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()));
        tags.extend(std::iter::repeat(tag).take(n_samples));
    }
    let coords = match method {
        EmbedMethod::Pca => pca(&feats),
        EmbedMethod::Tsne => tsne(&feats, tsne_cfg, &mut rng.derive_str("tsne")),
    };
    Ok(tags
        .into_iter()
        .zip(coords)
        .map(|(domain, [x, y])| EmbeddingPoint { domain, x, y })
        .collect())
}

fn centroid(points: &[EmbeddingPoint], tag: DomainTag) -> Result<[f64; 2]> {
    let sel: Vec<_> = points.iter().filter(|p| p.domain == tag).collect();
    if sel.is_empty() {
        return Err(Error::MissingTag(tag.name()));
    }
    let n = sel.len() as f64;
    Ok([
        sel.iter().map(|p| p.x).sum::<f64>() / n,
        sel.iter().map(|p| p.y).sum::<f64>() / n,
    ])
}

/// Distances `(d(source, target), d(intermediate, target))` between the
/// centroids of the tagged point clouds.
pub fn centroid_gap(points: &[EmbeddingPoint]) -> Result<(f64, f64)> {
    let s = centroid(points, DomainTag::Source)?;
    let i = centroid(points, DomainTag::Intermediate)?;
    let t = centroid(points, DomainTag::Target)?;
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    Ok((dist(s, t), dist(i, t)))
}

pub fn write_embedding_csv(path: &Path, points: &[EmbeddingPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_probabilities_are_symmetric_and_normalized() {
        let mut rng = RngState::new(0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| normal.sample(&mut rng)).collect()).collect();
        let p = joint_probabilities(&x, 3.0);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
        for i in 0..12 {
            assert_eq!(p[i * 12 + i], 0.0);
            for j in 0..12 {
                assert!((p[i * 12 + j] - p[j * 12 + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pca_orders_variance() {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64;
                vec![3.0 * t, 0.5 * (t * 1.7).sin(), 1.0]
            })
            .collect();
        let y = pca(&x);
        let var = |k: usize| y.iter().map(|p| p[k] * p[k]).sum::<f64>();
        assert!(var(0) >= var(1));
    }

    #[test]
    fn missing_tag() {
        let pts = [EmbeddingPoint {
            domain: DomainTag::Source,
            x: 0.0,
            y: 0.0,
        }];
        assert!(matches!(centroid_gap(&pts), Err(Error::MissingTag("intermediate"))));
    }
}
