//! Seeded Gaussian mixtures with geometric cluster-size imbalance.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng, DenseMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub n: usize,
    /// Informative dimensions; centroids live here.
    pub dim: usize,
    /// Largest-to-smallest cluster size ratio, at least 1.
    pub ratio: f64,
    /// Centroid spacing in units of within-cluster std, per `sqrt(dim)`.
    pub separation: f64,
    /// Pure-noise coordinates appended after the informative ones.
    pub noise_dims: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            n: 800,
            dim: 32,
            ratio: 1.0,
            separation: 1.0,
            noise_dims: 0,
            seed: 0,
        }
    }
}

/// Sizes proportional to `ratio^(-j/(C-1))`, rounded by largest remainder to sum to `n`.
pub fn cluster_sizes(classes: usize, n: usize, ratio: f64) -> Result<Vec<usize>> {
    if classes == 0 || classes > n {
        return Err(Error::Config(format!("cannot split {n} points into {classes} clusters")));
    }
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::Config(format!("imbalance ratio {ratio} must be at least 1")));
    }
    let weights: Vec<f64> = (0..classes)
        .map(|j| {
            if classes == 1 {
                1.0
            } else {
                ratio.powf(-(j as f64) / (classes - 1) as f64)
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - sizes.iter().sum::<usize>();
    for &j in order.iter().take(missing) {
        sizes[j] += 1;
    }
    if let Some(j) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!(
            "cluster {j} would be empty; increase n or lower the ratio"
        )));
    }
    Ok(sizes)
}

/// `classes` orthonormal directions (Gram-Schmidt on Gaussian draws), scaled so
/// every pair of centroids is `spacing` apart.
fn centroids(classes: usize, dim: usize, spacing: f64, rng: &mut impl rand::Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let scale = spacing / std::f64::consts::SQRT_2;
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * scale).collect())
        .collect()
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<EmbeddingDataset> {
    let sizes = cluster_sizes(cfg.classes, cfg.n, cfg.ratio)?;
    if cfg.classes > cfg.dim {
        return Err(Error::Config(format!(
            "{} centroids need at least as many informative dimensions, got {}",
            cfg.classes, cfg.dim
        )));
    }
    if !(cfg.separation >= 0.0 && cfg.separation.is_finite()) {
        return Err(Error::Config(format!("separation {} must be nonnegative", cfg.separation)));
    }
    let mut rng = seeded_rng(derive_seed(cfg.seed, 0));
    let spacing = cfg.separation * (cfg.dim as f64).sqrt();
    let centres = centroids(cfg.classes, cfg.dim, spacing, &mut rng);

    let mut labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(j, &s)| std::iter::repeat_n(j, s))
        .collect();
    labels.shuffle(&mut rng);

    let width = cfg.dim + cfg.noise_dims;
    let mut data = Vec::with_capacity(cfg.n * width);
    for &l in &labels {
        for &c in &centres[l] {
            let eta: f64 = StandardNormal.sample(&mut rng);
            data.push(c + eta);
        }
        for _ in 0..cfg.noise_dims {
            data.push(StandardNormal.sample(&mut rng));
        }
    }
    let embeddings = DenseMatrix::new(cfg.n, width, data)?;
    let name = format!(
        "synth-c{}-n{}-r{}-s{}",
        cfg.classes, cfg.n, cfg.ratio, cfg.seed
    );
    EmbeddingDataset::new(embeddings, Some(labels), None, name)
}
