//! Two-view augmentation in embedding space.
//!
//! Text-level views, when available, are encoded upstream and stored with the
//! dataset; otherwise views are perturbed copies of the embeddings.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentStrategy {
    Precomputed,
    GaussianNoise,
    FeatureDropout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub strategy: AugmentStrategy,
    pub noise_sigma: f64,
    /// Probability of zeroing a coordinate, in `[0, 1)`.
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            strategy: AugmentStrategy::GaussianNoise,
            noise_sigma: 0.05,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be nonnegative", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Returns two views of the batch `e`.
///
/// `stored` holds the matching rows of precomputed views and is required for
/// [`AugmentStrategy::Precomputed`]. Random strategies draw from a stream
/// determined by `(cfg.seed, step)`.
pub fn make_views(
    e: &DenseMatrix,
    stored: Option<(&DenseMatrix, &DenseMatrix)>,
    cfg: &AugmentConfig,
    step: u64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    cfg.validate()?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, step));
    match cfg.strategy {
        AugmentStrategy::Precomputed => {
            let (v1, v2) = stored.ok_or_else(|| {
                Error::InvalidArgument("precomputed views requested but the dataset has none".into())
            })?;
            if v1.shape() != e.shape() || v2.shape() != e.shape() {
                return Err(Error::Shape("stored views do not match the embeddings".into()));
            }
            Ok((v1.clone(), v2.clone()))
        }
        AugmentStrategy::GaussianNoise => {
            let sigma = cfg.noise_sigma;
            let mut view = || {
                let data = e
                    .as_slice()
                    .iter()
                    .map(|&v| {
                        let eta: f64 = StandardNormal.sample(&mut rng);
                        v + sigma * eta
                    })
                    .collect();
                DenseMatrix::new(e.rows(), e.cols(), data)
            };
            Ok((view()?, view()?))
        }
        AugmentStrategy::FeatureDropout => {
            let rate = cfg.dropout_rate;
            let keep = 1.0 / (1.0 - rate);
            let mut view = || {
                let data = e
                    .as_slice()
                    .iter()
                    .map(|&v| if rng.random::<f64>() < rate { 0.0 } else { v * keep })
                    .collect();
                DenseMatrix::new(e.rows(), e.cols(), data)
            };
            Ok((view()?, view()?))
        }
    }
}
