//! The E1 to E6 comparison: every configuration trained on one fixed data
//! split under several training seeds, scored on the test split.

use super::{run_curriculum, TrainConfig, TrainError, TrainResult};
use crate::data::{Dataset, NormStats, Sample, Splits};
use crate::downstream::metrics::{classification_report, mean_std, ClassificationReport};
use crate::model::{Ablation, Dart};
use crate::scalar::Scalar;
use crate::taxonomy::NUM_CLASSES;
use serde::Serialize;
use std::fmt::Write as _;

pub const ABLATION_SEEDS: [u64; 3] = [42, 123, 999];

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub ablation: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub ablation: String,
    pub description: String,
    /// (mean, sample std) over seeds.
    pub accuracy: (f64, f64),
    pub macro_f1: (f64, f64),
    pub weighted_f1: (f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

pub fn evaluate_model<S: Scalar>(model: &Dart<S>, data: &Dataset, norm: &NormStats, cfg: &TrainConfig) -> TrainResult<ClassificationReport> {
    let refs: Vec<&Sample> = data.samples.iter().collect();
    let inf = model.infer_samples(&refs, norm, cfg.gate_mode, cfg.eval_batch)?;
    classification_report(&inf.predictions, &data.labels(), NUM_CLASSES).map_err(|e| TrainError::Config(e.to_string()))
}

/// One curriculum under `ablation` and `seed`, scored on the test split at
/// the best validation epoch.
pub fn run_one<S: Scalar>(base: &TrainConfig, splits: &Splits, ablation: Ablation, seed: u64) -> TrainResult<AblationRun> {
    let cfg = TrainConfig {
        seed,
        ablation,
        ..base.clone()
    };
    let cur = run_curriculum::<S>(&cfg, splits, |_| {})?;
    let test = evaluate_model(&cur.best, &splits.test, &cur.norm, &cfg)?;
    log::info!("{} seed {} acc {:.4} macro-F1 {:.4}", ablation.tag(), seed, test.accuracy, test.macro_f1);
    Ok(AblationRun {
        ablation: ablation.tag().to_string(),
        seed,
        best_epoch: cur.best_epoch,
        accuracy: test.accuracy,
        macro_f1: test.macro_f1,
        weighted_f1: test.weighted_f1,
    })
}

/// Group runs by configuration, keeping first-seen order.
pub fn summarize(runs: Vec<AblationRun>) -> AblationTable {
    let mut rows: Vec<AblationRow> = Vec::new();
    for r in &runs {
        if rows.iter().any(|row| row.ablation == r.ablation) {
            continue;
        }
        let mine: Vec<&AblationRun> = runs.iter().filter(|x| x.ablation == r.ablation).collect();
        let stat = |f: fn(&AblationRun) -> f64| mean_std(&mine.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or((f64::NAN, f64::NAN));
        rows.push(AblationRow {
            ablation: r.ablation.clone(),
            description: Ablation::parse(&r.ablation).map_or("", |a| a.description()).to_string(),
            accuracy: stat(|r| r.accuracy),
            macro_f1: stat(|r| r.macro_f1),
            weighted_f1: stat(|r| r.weighted_f1),
        });
    }
    AblationTable { runs, rows }
}

/// Train `base` once per (ablation, seed) pair. Only `seed` and `ablation`
/// are overridden; the split stays fixed.
pub fn run_ablations<S: Scalar>(
    base: &TrainConfig,
    splits: &Splits,
    ablations: &[Ablation],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun),
) -> TrainResult<AblationTable> {
    let mut runs = Vec::new();
    for &a in ablations {
        for &seed in seeds {
            let run = run_one::<S>(base, splits, a, seed)?;
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(summarize(runs))
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a.tag())
    }

    /// Percent-scaled `mean ± std` table, one row per configuration.
    pub fn render(&self) -> String {
        let mut out = format!("{:<4} {:<28} {:>16} {:>16} {:>16}\n", "cfg", "description", "accuracy", "macro-F1", "weighted-F1");
        let pm = |(m, s): (f64, f64)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<4} {:<28} {:>16} {:>16} {:>16}",
                r.ablation,
                r.description,
                pm(r.accuracy),
                pm(r.macro_f1),
                pm(r.weighted_f1)
            );
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("ablation,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,weighted_f1_mean,weighted_f1_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.ablation, r.accuracy.0, r.accuracy.1, r.macro_f1.0, r.macro_f1.1, r.weighted_f1.0, r.weighted_f1.1
            );
        }
        out
    }
}
