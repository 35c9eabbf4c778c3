//! Structured inspection reports and their rendered text.

use super::anomaly::{AnomalyModel, AnomalyScore};
use super::fewshot::cosine;
use super::heads::Head;
use super::metrics::argmax;
use super::recommend::{action_for_class, MaintenanceAction};
use crate::taxonomy::{class_name, DamageLabel, Severity};
use serde::Serialize;
use std::fmt::Write as _;

pub const SECTIONS: [&str; 6] = [
    "Identification",
    "Damage Assessment",
    "Severity",
    "Recommended Action",
    "Anomaly Screening",
    "Similar Cases",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarCase {
    pub id: u64,
    pub class_name: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectionReport {
    pub sample_id: u64,
    pub class_index: usize,
    pub class_name: String,
    pub confidence: f64,
    /// Regressor output on the 0 (Low) to 2 (High) scale; absent for
    /// classes without severity grades.
    pub severity_score: Option<f64>,
    pub action: MaintenanceAction,
    pub urgency: f64,
    pub colour: String,
    pub anomaly: AnomalyScore,
    pub similar: Vec<SimilarCase>,
    pub summary: String,
}

/// Training exemplar: id, class and embedding.
pub type GalleryItem = (u64, usize, Vec<f64>);

/// Fitted pieces a report draws on.
pub struct ReportContext<'a> {
    pub severity: &'a Head,
    pub anomaly: &'a AnomalyModel,
    pub gallery: &'a [GalleryItem],
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn severity_word(score: f64) -> &'static str {
    match score {
        s if s < 0.5 => "low",
        s if s < 1.5 => "medium",
        _ => "high",
    }
}

pub fn generate_report(sample_id: u64, embedding: &[f64], logits: &[f64], ctx: &ReportContext) -> Result<InspectionReport, super::anomaly::AnomalyError> {
    let class_index = argmax(logits);
    let label = DamageLabel::from_class(class_index).expect("logit index is a class");
    let confidence = softmax(logits)[class_index];
    let severity_score = if label.severity != Severity::None {
        Some(ctx.severity.predict_values(&[embedding.to_vec()]).expect("head dimensions match")[0])
    } else {
        None
    };
    let action = action_for_class(class_index);
    let anomaly = ctx.anomaly.score(embedding)?;
    let mut sims: Vec<(f64, &GalleryItem)> = ctx.gallery.iter().map(|g| (cosine(&g.2, embedding), g)).collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1 .0.cmp(&b.1 .0)));
    let similar = sims
        .iter()
        .take(3)
        .map(|(s, g)| SimilarCase {
            id: g.0,
            class_name: class_name(g.1).to_string(),
            similarity: *s,
        })
        .collect();
    let mut summary = format!("{} detected with confidence {:.0}%", label.name(), 100.0 * confidence);
    if let Some(s) = severity_score {
        let _ = write!(summary, ", {} severity", severity_word(s));
    }
    let _ = write!(summary, "; recommended action: {}", action.name().to_lowercase());
    if anomaly.flagged {
        summary.push_str("; appearance is unusual, manual review advised");
    }
    summary.push('.');
    Ok(InspectionReport {
        sample_id,
        class_index,
        class_name: label.name().to_string(),
        confidence,
        severity_score,
        action,
        urgency: action.urgency(),
        colour: action.colour().to_string(),
        anomaly,
        similar,
        summary,
    })
}

impl InspectionReport {
    /// Plain-text document with the fixed section order; the Severity
    /// section is left out for classes without grades.
    pub fn render(&self) -> String {
        let mut out = format!("INSPECTION REPORT  sample {:016x}\n", self.sample_id);
        let mut section = |title: &str, body: String| {
            let _ = write!(out, "\n## {title}\n{body}\n");
        };
        section(SECTIONS[0], format!("Class: {}\nConfidence: {:.3}", self.class_name, self.confidence));
        section(SECTIONS[1], self.summary.clone());
        if let Some(s) = self.severity_score {
            section(SECTIONS[2], format!("Score: {s:.3} on a 0 (low) to 2 (high) scale, {}", severity_word(s)));
        }
        section(
            SECTIONS[3],
            format!("[{}] {} (urgency {:.2})", self.colour, self.action.name(), self.urgency),
        );
        section(
            SECTIONS[4],
            format!(
                "Score: {:.3}  Status: {}",
                self.anomaly.score,
                if self.anomaly.flagged { "FLAGGED" } else { "normal" }
            ),
        );
        let cases: Vec<String> = self
            .similar
            .iter()
            .map(|c| format!("- {:016x} {} (cosine {:.3})", c.id, c.class_name, c.similarity))
            .collect();
        section(SECTIONS[5], cases.join("\n"));
        out
    }
}
