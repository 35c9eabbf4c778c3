//! End-to-end drivers for each downstream task on an embedding store.

use super::anomaly::{AnomalyError, AnomalyModel};
use super::embed::{EmbeddingRecord, EmbeddingStore};
use super::fewshot::{fewshot_episodes, FewShotError, FewShotResult, SupportPolicy};
use super::geometry::{deterioration_timeline, interpolate_centroids, severity_arithmetic, GeometryError, InterpolationReport, Point, TimelineEntry, TransferReport};
use super::heads::{fit_head, Head, HeadConfig, Objective, Targets};
use super::metrics::{
    auroc, classification_report, error_breakdown, mae, r_squared, rmse, spearman, within_one, ClassificationReport, ErrorBreakdown, MetricError,
};
use super::recommend::{action_for_class, urgency_mae, MaintenanceAction};
use crate::data::augment::augment;
use crate::data::synth::noise_image;
use crate::data::{NormStats, Split};
use crate::model::{image_batch, Dart, GateMode};
use crate::scalar::Scalar;
use crate::taxonomy::{DamageType, NUM_CLASSES};
use crate::tensor::TensorError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{0}")]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    FewShot(#[from] FewShotError),
    #[error("{0}")]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Anomaly(#[from] AnomalyError),
    #[error("store has no {0} records")]
    EmptySplit(&'static str),
}

pub type TaskResult<T> = Result<T, TaskError>;

fn records(store: &EmbeddingStore, split: Split) -> TaskResult<Vec<&EmbeddingRecord>> {
    let r = store.split(split);
    if r.is_empty() {
        return Err(TaskError::EmptySplit(split.name()));
    }
    Ok(r)
}

fn class_counts(labels: &[usize]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for &y in labels {
        c[y] += 1;
    }
    c
}

pub struct ClassifyOutcome {
    pub head: Head,
    pub test: ClassificationReport,
    pub breakdown: ErrorBreakdown,
    /// Accuracy of always predicting the most frequent training class.
    pub majority_accuracy: f64,
}

/// Focal-loss MLP on train embeddings, early-stopped on validation macro-F1.
pub fn train_classifier_head(store: &EmbeddingStore, cfg: &HeadConfig) -> TaskResult<ClassifyOutcome> {
    let (train, val, test) = (records(store, Split::Train)?, records(store, Split::Val)?, records(store, Split::Test)?);
    let y = EmbeddingStore::labels(&train);
    let counts = class_counts(&y);
    let objective = Objective::Focal {
        classes: NUM_CLASSES,
        weights: crate::data::splits::inverse_frequency_weights(&counts).to_vec(),
        gamma: 2.0,
    };
    let val_y = EmbeddingStore::labels(&val);
    let head = fit_head(&EmbeddingStore::matrix(&train), &Targets::Classes(y), &objective, cfg, &EmbeddingStore::matrix(&val), |h, v| {
        h.predict_classes(v)
            .ok()
            .and_then(|p| classification_report(&p, &val_y, NUM_CLASSES).ok())
            .map_or(f64::NEG_INFINITY, |r| r.macro_f1)
    })?;
    let truth = EmbeddingStore::labels(&test);
    let pred = head.predict_classes(&EmbeddingStore::matrix(&test))?;
    let report = classification_report(&pred, &truth, NUM_CLASSES)?;
    let majority = (0..NUM_CLASSES).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
    let majority_accuracy = truth.iter().filter(|&&t| t == majority).count() as f64 / truth.len() as f64;
    Ok(ClassifyOutcome {
        head,
        breakdown: error_breakdown(&report.confusion),
        test: report,
        majority_accuracy,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SeverityMetrics {
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    /// Zero when undefined, with `spearman_defined` false.
    pub spearman: f64,
    pub spearman_defined: bool,
    pub within_one: f64,
}

pub fn severity_metrics(pred: &[f64], ordinal: &[usize]) -> TaskResult<SeverityMetrics> {
    let truth: Vec<f64> = ordinal.iter().map(|&o| o as f64).collect();
    let rho = spearman(pred, &truth)?;
    Ok(SeverityMetrics {
        count: pred.len(),
        mae: mae(pred, &truth)?,
        rmse: rmse(pred, &truth)?,
        r2: r_squared(pred, &truth)?,
        spearman: rho.unwrap_or(0.0),
        spearman_defined: rho.is_some(),
        within_one: within_one(pred, ordinal)?,
    })
}

fn graded(records: Vec<&EmbeddingRecord>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let g: Vec<&EmbeddingRecord> = records.into_iter().filter(|r| r.label().severity.ordinal().is_some()).collect();
    let ord = g.iter().map(|r| r.label().severity.ordinal().expect("filtered")).collect();
    (EmbeddingStore::matrix(&g), ord)
}

pub struct SeverityOutcome {
    pub head: Head,
    pub test: SeverityMetrics,
}

/// MSE regressor on Low = 0, Medium = 1, High = 2 over graded samples only,
/// early-stopped on validation MAE.
pub fn severity_regress(store: &EmbeddingStore, cfg: &HeadConfig) -> TaskResult<SeverityOutcome> {
    let (x, y) = graded(records(store, Split::Train)?);
    let (vx, vy) = graded(records(store, Split::Val)?);
    let vt: Vec<f64> = vy.iter().map(|&o| o as f64).collect();
    let head = fit_head(&x, &Targets::Values(y.iter().map(|&o| o as f64).collect()), &Objective::Mse, cfg, &vx, |h, v| {
        h.predict_values(v).ok().and_then(|p| mae(&p, &vt).ok()).map_or(f64::NEG_INFINITY, |m| -m)
    })?;
    let (tx, ty) = graded(records(store, Split::Test)?);
    let pred = head.predict_values(&tx)?;
    Ok(SeverityOutcome {
        test: severity_metrics(&pred, &ty)?,
        head,
    })
}

/// Prototype episodes drawing support from the train split and querying the
/// test split, for each `k`.
pub fn fewshot(store: &EmbeddingStore, ks: &[usize], episodes: usize, seed: u64, policy: SupportPolicy) -> TaskResult<Vec<FewShotResult>> {
    let pool: Vec<(&[f64], usize)> = records(store, Split::Train)?.into_iter().map(|r| (r.embedding.as_slice(), r.class_index)).collect();
    let query: Vec<(&[f64], usize)> = records(store, Split::Test)?.into_iter().map(|r| (r.embedding.as_slice(), r.class_index)).collect();
    ks.iter()
        .map(|&k| Ok(fewshot_episodes(&pool, &query, k, episodes, seed, policy)?))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TimelineSummary {
    pub damage_type: String,
    pub entries: Vec<TimelineEntry>,
    /// Rank correlation of generator severity with step index.
    pub spearman: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeometryOutcome {
    pub interpolations: Vec<InterpolationReport>,
    /// Offsets from Chafing applied to CutStrands and Placking.
    pub transfers: Vec<TransferReport>,
    /// The Chafing offset applied to Chafing itself.
    pub self_transfer: TransferReport,
    pub timelines: Vec<TimelineSummary>,
}

impl GeometryOutcome {
    pub fn monotone_rate(&self) -> f64 {
        let steps: usize = self.interpolations.iter().map(|r| r.monotone_steps).sum();
        let total: usize = self.interpolations.iter().map(|r| r.total_steps).sum();
        steps as f64 / total.max(1) as f64
    }

    pub fn cross_type_rate(&self) -> f64 {
        let hits: usize = self.transfers.iter().map(|r| r.hits).sum();
        let queries: usize = self.transfers.iter().map(|r| r.queries).sum();
        hits as f64 / queries.max(1) as f64
    }
}

fn points(records: Vec<&EmbeddingRecord>) -> Vec<Point<'_>> {
    records
        .into_iter()
        .map(|r| Point {
            id: r.id,
            class_index: r.class_index,
            severity_scalar: r.severity_scalar,
            embedding: r.embedding.as_slice(),
        })
        .collect()
}

/// Interpolation over the train split (scored by `severity`), offset
/// transfer with test queries against the train gallery, and timelines.
pub fn geometry(store: &EmbeddingStore, severity: &Head, steps: usize, timeline_length: usize) -> TaskResult<GeometryOutcome> {
    let gallery = points(records(store, Split::Train)?);
    let queries = points(records(store, Split::Test)?);
    let score = |e: &[f64]| severity.predict_values(&[e.to_vec()]).expect("regressor input dimension")[0];
    let graded = [DamageType::Chafing, DamageType::CutStrands, DamageType::Placking];
    let mut out = GeometryOutcome {
        interpolations: Vec::new(),
        transfers: Vec::new(),
        self_transfer: severity_arithmetic(&gallery, &queries, DamageType::Chafing, DamageType::Chafing)?,
        timelines: Vec::new(),
    };
    for t in graded {
        out.interpolations.push(interpolate_centroids(&gallery, t, steps, score)?);
        if t != DamageType::Chafing {
            out.transfers.push(severity_arithmetic(&gallery, &queries, DamageType::Chafing, t)?);
        }
        let entries = deterioration_timeline(&gallery, t, timeline_length, score)?;
        let idx: Vec<f64> = (0..entries.len()).map(|i| i as f64).collect();
        let sev: Vec<f64> = entries.iter().map(|e| e.severity_scalar).collect();
        out.timelines.push(TimelineSummary {
            damage_type: t.name().to_string(),
            spearman: spearman(&idx, &sev)?.unwrap_or(0.0),
            entries,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct RecommendMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub urgency_mae: f64,
}

pub struct RecommendOutcome {
    pub head: Head,
    pub test: RecommendMetrics,
}

/// Linear probe from embeddings to rule-derived actions.
pub fn recommend(store: &EmbeddingStore, cfg: &HeadConfig) -> TaskResult<RecommendOutcome> {
    let actions = |rs: &[&EmbeddingRecord]| -> Vec<usize> { rs.iter().map(|r| action_for_class(r.class_index).index()).collect() };
    let (train, val, test) = (records(store, Split::Train)?, records(store, Split::Val)?, records(store, Split::Test)?);
    let n = MaintenanceAction::ALL.len();
    let y = actions(&train);
    let mut counts = [0usize; NUM_CLASSES];
    for &a in &y {
        counts[a] += 1;
    }
    let weights = crate::data::splits::inverse_frequency_weights(&counts)[..n].iter().map(|w| w * NUM_CLASSES as f64 / n as f64).collect();
    let val_y = actions(&val);
    let head = fit_head(
        &EmbeddingStore::matrix(&train),
        &Targets::Classes(y),
        &Objective::Focal { classes: n, weights, gamma: 0.0 },
        cfg,
        &EmbeddingStore::matrix(&val),
        |h, v| h.predict_classes(v).ok().and_then(|p| classification_report(&p, &val_y, n).ok()).map_or(f64::NEG_INFINITY, |r| r.macro_f1),
    )?;
    let truth = actions(&test);
    let pred = head.predict_classes(&EmbeddingStore::matrix(&test))?;
    let report = classification_report(&pred, &truth, n)?;
    let as_actions = |v: &[usize]| -> Vec<MaintenanceAction> { v.iter().map(|&i| MaintenanceAction::from_index(i).expect("action index")).collect() };
    Ok(RecommendOutcome {
        head,
        test: RecommendMetrics {
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            urgency_mae: urgency_mae(&as_actions(&pred), &as_actions(&truth)),
        },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AnomalyMetrics {
    pub threshold: f64,
    pub train_flag_rate: f64,
    pub test_flag_rate: f64,
    pub noise_flag_rate: f64,
    /// Noise images as positives against in-distribution test images.
    pub auroc: f64,
}

/// Embed `count` pure-noise images. Each is paired with a description
/// taken in turn from the training split so the text path sees in-vocabulary
/// input.
pub fn noise_embeddings<S: Scalar>(model: &Dart<S>, norm: &NormStats, store: &EmbeddingStore, count: usize, seed: u64, mode: GateMode) -> TaskResult<Vec<Vec<f64>>> {
    let train = records(store, Split::Train)?;
    let mut out = Vec::with_capacity(count);
    let ids: Vec<u64> = (0..count as u64).map(|i| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i)).collect();
    for part in ids.chunks(32) {
        let images = image_batch::<S>(part.iter().map(|&s| augment(&noise_image(s), norm, None)));
        let texts: Vec<&str> = part.iter().enumerate().map(|(i, _)| train[(out.len() + i) % train.len()].description.as_str()).collect();
        let labels: Vec<usize> = part.iter().enumerate().map(|(i, _)| train[(out.len() + i) % train.len()].class_index).collect();
        out.extend(model.infer(&images, &texts, mode, Some(&labels))?.embeddings);
    }
    Ok(out)
}

/// Fit on train embeddings and screen test and noise embeddings.
pub fn anomaly(store: &EmbeddingStore, noise: &[Vec<f64>]) -> TaskResult<(AnomalyModel, AnomalyMetrics)> {
    let train = records(store, Split::Train)?;
    let test = records(store, Split::Test)?;
    let model = AnomalyModel::fit(&EmbeddingStore::matrix(&train), &EmbeddingStore::labels(&train))?;
    let scores = |rs: &[Vec<f64>]| -> TaskResult<Vec<f64>> { rs.iter().map(|e| Ok(model.score(e)?.score)).collect() };
    let rate = |s: &[f64]| s.iter().filter(|&&v| v > model.threshold).count() as f64 / s.len().max(1) as f64;
    let train_s = scores(&EmbeddingStore::matrix(&train))?;
    let test_s = scores(&EmbeddingStore::matrix(&test))?;
    let noise_s = scores(noise)?;
    let mut all = test_s.clone();
    all.extend(&noise_s);
    let positive: Vec<bool> = (0..all.len()).map(|i| i >= test_s.len()).collect();
    let metrics = AnomalyMetrics {
        threshold: model.threshold,
        train_flag_rate: rate(&train_s),
        test_flag_rate: rate(&test_s),
        noise_flag_rate: rate(&noise_s),
        auroc: auroc(&all, &positive)?,
    };
    Ok((model, metrics))
}
