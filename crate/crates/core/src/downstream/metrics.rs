//! Classification, regression and ranking metrics.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} predictions, {1} targets")]
    Length(usize, usize),
    #[error("label {0} outside {1} classes")]
    Label(usize, usize),
    #[error("AUROC needs both positives and negatives")]
    OneClass,
}

pub type MetricResult<T> = Result<T, MetricError>;

fn check<A, B>(a: &[A], b: &[B]) -> MetricResult<()> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    if a.len() != b.len() {
        return Err(MetricError::Length(a.len(), b.len()));
    }
    Ok(())
}

/// `m[true][pred]` counts.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], classes: usize) -> MetricResult<Vec<Vec<usize>>> {
    check(pred, truth)?;
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(MetricError::Label(p.max(t), classes));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub support: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

/// Macro-F1 averages over classes present in the targets or predictions.
pub fn classification_report(pred: &[usize], truth: &[usize], classes: usize) -> MetricResult<ClassificationReport> {
    let m = confusion_matrix(pred, truth, classes)?;
    let n = pred.len();
    let correct: usize = (0..classes).map(|c| m[c][c]).sum();
    let support: Vec<usize> = m.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<usize> = (0..classes).map(|c| m.iter().map(|r| r[c]).sum()).collect();
    let f1: Vec<f64> = (0..classes)
        .map(|c| {
            let denom = support[c] + predicted[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * m[c][c] as f64 / denom as f64
            }
        })
        .collect();
    let present: Vec<usize> = (0..classes).filter(|&c| support[c] + predicted[c] > 0).collect();
    let macro_f1 = present.iter().map(|&c| f1[c]).sum::<f64>() / present.len() as f64;
    let weighted_f1 = (0..classes).map(|c| f1[c] * support[c] as f64).sum::<f64>() / n as f64;
    Ok(ClassificationReport {
        accuracy: correct as f64 / n as f64,
        macro_f1,
        weighted_f1,
        per_class_f1: f1,
        support,
        confusion: m,
    })
}

pub fn mae(pred: &[f64], truth: &[f64]) -> MetricResult<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> MetricResult<f64> {
    check(pred, truth)?;
    Ok((pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// `1 - SS_res / SS_tot`; zero-variance targets give 1 for a perfect fit
/// and 0 otherwise.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> MetricResult<f64> {
    check(pred, truth)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// 1-based ranks, ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spearman ρ with average-rank ties. `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> MetricResult<Option<f64>> {
    check(a, b)?;
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Fraction with `|round(pred) - truth| ≤ 1`.
pub fn within_one(pred: &[f64], truth: &[usize]) -> MetricResult<f64> {
    check(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, &t)| (p.round() - t as f64).abs() <= 1.0).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Rank-based AUROC: the probability a positive outscores a negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> MetricResult<f64> {
    check(scores, positive)?;
    let ranks = average_ranks(scores);
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return Err(MetricError::OneClass);
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Ok((rank_sum - (np * (np + 1)) as f64 / 2.0) / (np * nn) as f64)
}

/// Mean and half-width of the normal-approximation 95% interval.
pub fn mean_ci95(x: &[f64]) -> MetricResult<(f64, f64)> {
    if x.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * (var / n).sqrt()))
}

/// Mean and sample standard deviation.
pub fn mean_std(x: &[f64]) -> MetricResult<(f64, f64)> {
    if x.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() == 1 {
        return Ok((mean, 0.0));
    }
    Ok((mean, (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()))
}

/// Error decomposition of a 14-class confusion matrix: correct predictions,
/// errors that keep the damage type but miss the severity, and cross-type
/// errors. The three always add up to the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ErrorBreakdown {
    pub correct: usize,
    pub within_type: usize,
    pub cross_type: usize,
    pub total: usize,
}

pub fn error_breakdown(confusion: &[Vec<usize>]) -> ErrorBreakdown {
    use crate::taxonomy::DamageLabel;
    let mut b = ErrorBreakdown {
        correct: 0,
        within_type: 0,
        cross_type: 0,
        total: 0,
    };
    for (t, row) in confusion.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            b.total += n;
            if t == p {
                b.correct += n;
                continue;
            }
            let (lt, lp) = (DamageLabel::from_class(t), DamageLabel::from_class(p));
            match (lt, lp) {
                (Some(a), Some(c)) if a.damage_type == c.damage_type && a.damage_type.has_severity() && a.compound_partner().is_none() && c.compound_partner().is_none() => {
                    b.within_type += n
                }
                _ => b.cross_type += n,
            }
        }
    }
    b
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
