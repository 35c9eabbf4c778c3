//! Severity structure of the embedding space: centroid interpolation,
//! severity-offset transfer across damage types, and deterioration timelines.

use super::fewshot::{cosine, mean_vector};
use crate::taxonomy::{class_of, DamageType, Severity};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("{0:?} has no severity grades")]
    Ungraded(DamageType),
    #[error("no embeddings for class {0}")]
    MissingClass(&'static str),
}

/// An embedding with its class and generator severity.
#[derive(Clone, Copy, Debug)]
pub struct Point<'a> {
    pub id: u64,
    pub class_index: usize,
    pub severity_scalar: f64,
    pub embedding: &'a [f64],
}

fn graded_class(t: DamageType, s: Severity) -> Result<usize, GeometryError> {
    if !t.has_severity() {
        return Err(GeometryError::Ungraded(t));
    }
    Ok(class_of(t, s).expect("graded classes exist"))
}

pub fn class_centroid(points: &[Point], class_index: usize) -> Result<Vec<f64>, GeometryError> {
    let rows: Vec<&[f64]> = points.iter().filter(|p| p.class_index == class_index).map(|p| p.embedding).collect();
    if rows.is_empty() {
        return Err(GeometryError::MissingClass(crate::taxonomy::class_name(class_index)));
    }
    Ok(mean_vector(&rows))
}

/// Indices of the `k` most cosine-similar points, most similar first; ties
/// by index.
pub fn top_k(points: &[Point], query: &[f64], k: usize) -> Vec<usize> {
    let mut sims: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, cosine(p.embedding, query))).collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.into_iter().take(k).map(|(i, _)| i).collect()
}

pub fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterpolationReport {
    pub damage_type: String,
    /// Nearest point id at each step.
    pub neighbours: Vec<u64>,
    /// Severity-regressor score of each neighbour.
    pub scores: Vec<f64>,
    pub monotone_steps: usize,
    pub total_steps: usize,
    /// Cosine distance from the path midpoint to the Medium centroid.
    pub midpoint_distance: f64,
}

impl InterpolationReport {
    pub fn monotone_rate(&self) -> f64 {
        self.monotone_steps as f64 / self.total_steps.max(1) as f64
    }
}

/// `steps` evenly spaced points from the Low to the High centroid of `t`;
/// each is mapped to its nearest neighbour in `points` and scored with
/// `score`.
pub fn interpolate_centroids(points: &[Point], t: DamageType, steps: usize, score: impl Fn(&[f64]) -> f64) -> Result<InterpolationReport, GeometryError> {
    let low = class_centroid(points, graded_class(t, Severity::Low)?)?;
    let mid = class_centroid(points, graded_class(t, Severity::Medium)?)?;
    let high = class_centroid(points, graded_class(t, Severity::High)?)?;
    let path = interpolation_path(&low, &high, steps);
    let neighbours: Vec<&Point> = path.iter().map(|q| &points[top_k(points, q, 1)[0]]).collect();
    let scores: Vec<f64> = neighbours.iter().map(|p| score(p.embedding)).collect();
    let monotone_steps = scores.windows(2).filter(|w| w[1] >= w[0]).count();
    Ok(InterpolationReport {
        damage_type: t.name().to_string(),
        neighbours: neighbours.iter().map(|p| p.id).collect(),
        scores,
        monotone_steps,
        total_steps: steps.saturating_sub(1),
        midpoint_distance: 1.0 - cosine(&lerp(&low, &high, 0.5), &mid),
    })
}

pub fn interpolation_path(low: &[f64], high: &[f64], steps: usize) -> Vec<Vec<f64>> {
    (0..steps)
        .map(|i| {
            let t = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
            lerp(low, high, t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferReport {
    pub damage_type: String,
    pub queries: usize,
    pub hits: usize,
}

impl TransferReport {
    pub fn rate(&self) -> f64 {
        self.hits as f64 / self.queries.max(1) as f64
    }
}

/// Severity offset `High − Low` of `source` centroids, added to every Low
/// query of `target`; a hit is a top-3 neighbour in `gallery` from the
/// target type's High class.
pub fn severity_arithmetic(gallery: &[Point], queries: &[Point], source: DamageType, target: DamageType) -> Result<TransferReport, GeometryError> {
    let offset: Vec<f64> = {
        let hi = class_centroid(gallery, graded_class(source, Severity::High)?)?;
        let lo = class_centroid(gallery, graded_class(source, Severity::Low)?)?;
        hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
    };
    let want_low = graded_class(target, Severity::Low)?;
    let want_high = graded_class(target, Severity::High)?;
    let mut report = TransferReport {
        damage_type: target.name().to_string(),
        queries: 0,
        hits: 0,
    };
    for q in queries.iter().filter(|q| q.class_index == want_low) {
        let shifted: Vec<f64> = q.embedding.iter().zip(&offset).map(|(a, b)| a + b).collect();
        report.queries += 1;
        if top_k(gallery, &shifted, 3).iter().any(|&i| gallery[i].class_index == want_high) {
            report.hits += 1;
        }
    }
    if report.queries == 0 {
        return Err(GeometryError::MissingClass(crate::taxonomy::class_name(want_low)));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimelineEntry {
    pub id: u64,
    pub severity_scalar: f64,
    pub score: f64,
}

/// Walk from the Low toward the High centroid of `t` in `length` steps,
/// taking the nearest unvisited point of the type's graded classes each time.
pub fn deterioration_timeline(points: &[Point], t: DamageType, length: usize, score: impl Fn(&[f64]) -> f64) -> Result<Vec<TimelineEntry>, GeometryError> {
    let classes = [Severity::Low, Severity::Medium, Severity::High].map(|s| graded_class(t, s));
    let classes: Vec<usize> = classes.into_iter().collect::<Result<_, _>>()?;
    let low = class_centroid(points, classes[0])?;
    let high = class_centroid(points, classes[2])?;
    let candidates: Vec<&Point> = points.iter().filter(|p| classes.contains(&p.class_index)).collect();
    let mut used = vec![false; candidates.len()];
    let mut out = Vec::new();
    for q in interpolation_path(&low, &high, length) {
        let best = candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, p)| (i, cosine(p.embedding, &q)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((i, _)) = best else { break };
        used[i] = true;
        let p = candidates[i];
        out.push(TimelineEntry {
            id: p.id,
            severity_scalar: p.severity_scalar,
            score: score(p.embedding),
        });
    }
    Ok(out)
}
