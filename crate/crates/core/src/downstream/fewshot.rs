//! Prototype classification from `k` labelled examples per class.

use super::metrics::{argmax, classification_report, mean_ci95, MetricError};
use crate::taxonomy::NUM_CLASSES;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FewShotError {
    #[error("class {class} has no support samples")]
    NoSupport { class: usize },
    #[error("class {class} has {available} support samples, {k} requested")]
    InsufficientSupport { class: usize, available: usize, k: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

pub fn mean_vector(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut m = vec![0.0; d];
    for r in rows {
        m.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= rows.len().max(1) as f64);
    m
}

/// Class whose prototype has the highest cosine similarity to `x`.
pub fn nearest_prototype(prototypes: &[Vec<f64>], x: &[f64]) -> usize {
    let sims: Vec<f64> = prototypes.iter().map(|p| cosine(p, x)).collect();
    argmax(&sims)
}

pub fn prototypes(support: &[(&[f64], usize)], classes: usize) -> Result<Vec<Vec<f64>>, FewShotError> {
    (0..classes)
        .map(|c| {
            let rows: Vec<&[f64]> = support.iter().filter(|(_, y)| *y == c).map(|(x, _)| *x).collect();
            if rows.is_empty() {
                return Err(FewShotError::NoSupport { class: c });
            }
            Ok(mean_vector(&rows))
        })
        .collect()
}

/// How support sizes are handled when a class has fewer than `k` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupportPolicy {
    Strict,
    /// Use every available sample of the short class.
    Cap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotResult {
    pub k: usize,
    pub episodes: usize,
    pub mean_macro_f1: f64,
    pub ci95: f64,
    /// Classes whose support was capped below `k`.
    pub capped_classes: Vec<usize>,
}

/// Macro-F1 of prototype classification of `query` over `episodes` random
/// support draws of `k` per class from `pool`.
pub fn fewshot_episodes(
    pool: &[(&[f64], usize)],
    query: &[(&[f64], usize)],
    k: usize,
    episodes: usize,
    seed: u64,
    policy: SupportPolicy,
) -> Result<FewShotResult, FewShotError> {
    let by_class: Vec<Vec<&[f64]>> = (0..NUM_CLASSES).map(|c| pool.iter().filter(|(_, y)| *y == c).map(|(x, _)| *x).collect()).collect();
    let mut capped = Vec::new();
    for (c, rows) in by_class.iter().enumerate() {
        if rows.is_empty() {
            return Err(FewShotError::NoSupport { class: c });
        }
        if rows.len() < k {
            if policy == SupportPolicy::Strict {
                return Err(FewShotError::InsufficientSupport {
                    class: c,
                    available: rows.len(),
                    k,
                });
            }
            capped.push(c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<usize> = query.iter().map(|(_, y)| *y).collect();
    let mut scores = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let protos: Vec<Vec<f64>> = by_class
            .iter()
            .map(|rows| {
                let chosen: Vec<&[f64]> = rows.choose_multiple(&mut rng, k.min(rows.len())).copied().collect();
                mean_vector(&chosen)
            })
            .collect();
        let pred: Vec<usize> = query.iter().map(|(x, _)| nearest_prototype(&protos, x)).collect();
        scores.push(classification_report(&pred, &truth, NUM_CLASSES)?.macro_f1);
    }
    let (mean, ci95) = mean_ci95(&scores)?;
    Ok(FewShotResult {
        k,
        episodes,
        mean_macro_f1: mean,
        ci95,
        capped_classes: capped,
    })
}
