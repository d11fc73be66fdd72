//! Deviation loss against a Gaussian reference score.
//!
//! Scores are standardized against the mean and standard deviation of a
//! fixed sample from the prior. Unlabeled nodes are pulled toward the
//! reference mean; labeled anomalies are pushed at least `margin` standard
//! deviations above it.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDistribution {
    pub prior_mean: f64,
    pub prior_std: f64,
    pub sample_count: usize,
    pub ref_mean: f64,
    pub ref_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub reference: ReferenceDistribution,
}

/// Prior settings before the reference sample is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    pub margin: f64,
    pub prior_mean: f64,
    pub prior_std: f64,
    pub sample_count: usize,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            margin: 5.0,
            prior_mean: 0.0,
            prior_std: 1.0,
            sample_count: 5000,
        }
    }
}

impl LossSettings {
    /// Draws the reference sample and fixes it for the rest of the run.
    pub fn resolve(&self, rng: &mut Rng) -> Result<LossConfig> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        let reference =
            sample_reference(self.prior_mean, self.prior_std, self.sample_count, rng)?;
        Ok(LossConfig {
            margin: self.margin,
            reference,
        })
    }
}

/// Draws `k` scores from `N(mu, sigma^2)` and records their mean and
/// population standard deviation.
pub fn sample_reference(mu: f64, sigma: f64, k: usize, rng: &mut Rng) -> Result<ReferenceDistribution> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::Config(format!("prior needs finite mu and sigma > 0, got ({mu}, {sigma})")));
    }
    if k < 2 {
        return Err(Error::Config(format!("reference sample needs k >= 2, got {k}")));
    }
    let normal = Normal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let draws: Vec<f64> = (0..k).map(|_| normal.sample(rng)).collect();
    let mean = draws.iter().sum::<f64>() / k as f64;
    let var = draws.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::DegenerateReference);
    }
    Ok(ReferenceDistribution {
        prior_mean: mu,
        prior_std: sigma,
        sample_count: k,
        ref_mean: mean,
        ref_std: std,
    })
}

/// Standard score of `s` against the reference.
pub fn deviation(s: f64, reference: &ReferenceDistribution) -> f64 {
    (s - reference.ref_mean) / reference.ref_std
}

/// Batch-mean deviation loss and its gradient with respect to each score.
///
/// Labels are 1 for labeled anomalies and 0 for unlabeled (treated as
/// normal). Subgradients at `dev = 0` for normals and `dev = margin` for
/// anomalies are zero.
pub fn loss_and_grad(scores: &[f64], labels: &[u8], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let inv_b = 1.0 / scores.len() as f64;
    let inv_std = 1.0 / cfg.reference.ref_std;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (position, (&s, &y)) in scores.iter().zip(labels).enumerate() {
        let dev = deviation(s, &cfg.reference);
        let (loss, slope) = match y {
            0 => (dev.abs(), sign(dev)),
            1 => {
                let gap = cfg.margin - dev;
                if gap > 0.0 {
                    (gap, -1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            label => return Err(Error::Label { position, label }),
        };
        total += loss;
        grad.push(slope * inv_std * inv_b);
    }
    Ok((total * inv_b, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
