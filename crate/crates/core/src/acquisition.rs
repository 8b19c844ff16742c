//! UCB selection over surrogate predictions and the random-walk baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Goal;
use crate::error::{Error, Result};

/// Predictive mean and standard deviation for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

impl Prediction {
    pub fn new(mean: f64, std: f64) -> Self {
        Prediction { mean, std }
    }

    /// Mean and population standard deviation of a sample.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Prediction {
            mean,
            std: var.max(0.0).sqrt(),
        }
    }
}

/// Index of the best acquisition score.
///
/// Maximize picks `argmax(mean + alpha * std)`; Minimize picks
/// `argmin(mean - alpha * std)`. Ties go to the lowest index.
pub fn ucb_select(predictions: &[Prediction], alpha: f64, goal: Goal) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::Input("no predictions to select from".into()));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Input(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let mut best = 0;
    let mut best_score = f64::NAN;
    for (i, p) in predictions.iter().enumerate() {
        if !p.mean.is_finite() || !p.std.is_finite() {
            return Err(Error::Input(format!("prediction {i} is not finite")));
        }
        let score = match goal {
            Goal::Maximize => p.mean + alpha * p.std,
            Goal::Minimize => p.mean - alpha * p.std,
        };
        if i == 0 || goal.better(score, best_score) {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

/// Uniform draw from the unlabeled ids.
pub fn random_walk_select<R: Rng + ?Sized>(unlabeled_ids: &[usize], rng: &mut R) -> Result<usize> {
    if unlabeled_ids.is_empty() {
        return Err(Error::Exhausted);
    }
    Ok(unlabeled_ids[rng.random_range(0..unlabeled_ids.len())])
}
