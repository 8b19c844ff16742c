//! Mapping a free-text proposal onto an unlabeled pool candidate.

use super::client::{Reranker, RetryPolicy};
use crate::dataset::Dataset;
use crate::engine::Scaler;
use crate::error::{Error, Result};

pub enum MatcherBackend {
    RerankApi(Box<dyn Reranker>),
    OfflineNearest,
}

impl std::fmt::Debug for MatcherBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MatcherBackend::RerankApi(_) => f.write_str("RerankApi"),
            MatcherBackend::OfflineNearest => f.write_str("OfflineNearest"),
        }
    }
}

/// Nearest unlabeled candidate in full-pool standardized space.
/// Returns `(id, 1 / (1 + distance))`; ties go to the lowest id.
pub fn offline_nearest(parsed: &[f64], dataset: &Dataset, unlabeled: &[usize]) -> Result<(usize, f64)> {
    if unlabeled.is_empty() {
        return Err(Error::Exhausted);
    }
    let scaler = Scaler::fit(&dataset.features())?;
    let q = scaler.transform_one(parsed)?;
    let mut best: Option<(usize, f64)> = None;
    for &id in unlabeled {
        let z = scaler.transform_one(&dataset.candidates[id].features)?;
        let d = z
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let better = match best {
            None => true,
            Some((bid, bd)) => d < bd || (d == bd && id < bid),
        };
        if better {
            best = Some((id, d));
        }
    }
    let (id, d) = best.expect("non-empty");
    Ok((id, 1.0 / (1.0 + d)))
}

/// Matches a proposal to an unlabeled candidate. A rerank failure falls back
/// to the offline matcher.
pub fn match_to_pool(
    parsed: &[f64],
    raw_text: &str,
    dataset: &Dataset,
    unlabeled: &[usize],
    backend: &mut MatcherBackend,
    retry: &RetryPolicy,
) -> Result<(usize, f64)> {
    if unlabeled.is_empty() {
        return Err(Error::Exhausted);
    }
    match backend {
        MatcherBackend::OfflineNearest => offline_nearest(parsed, dataset, unlabeled),
        MatcherBackend::RerankApi(reranker) => {
            let docs: Vec<String> = unlabeled.iter().map(|&id| dataset.parameter_string(id)).collect();
            match retry.run(|| reranker.top_match(raw_text, &docs)) {
                Ok((idx, score)) if idx < unlabeled.len() => Ok((unlabeled[idx], score.clamp(0.0, 1.0))),
                Ok((idx, _)) => {
                    log::warn!("rerank returned index {idx} outside {} documents; using nearest match", docs.len());
                    offline_nearest(parsed, dataset, unlabeled)
                }
                Err(e) => {
                    log::warn!("rerank failed ({e}); using nearest match");
                    offline_nearest(parsed, dataset, unlabeled)
                }
            }
        }
    }
}
