//! Two-phase training: per-step orchestration, the curriculum loop and the
//! ablation matrix.

pub mod ablate;
pub mod config;
pub mod gradcheck;
pub mod optim;

pub use config::TrainConfig;
pub use optim::{clip_grad_norm, cosine_schedule, grad_norm, AdamW};

use crate::data::augment::augment;
use crate::data::{Dataset, NormStats, Sample, Splits};
use crate::downstream::metrics::{classification_report, ClassificationReport};
use crate::fusion::Alpha;
use crate::hd_mask::{build_mask_plan, recon_weights};
use crate::loss::{focal_loss, recon_loss, severity_infonce, total_loss, type_orthogonality, LossBreakdown, LossConfig};
use crate::model::{default_vocabulary, image_batch, Dart, Phase};
use crate::scalar::Scalar;
use crate::taxonomy::{DamageLabel, NUM_CLASSES};
use crate::tensor::{Graph, ParamGroup, ParamStore, Tensor, TensorError, Var};
use crate::vision::ema_update;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {}: {}", .0.step, .0.csv_row())]
    NonFinite(Box<StepRecord>),
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: u8,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,phase,lr_backbone,lr_head,l_recon,l_sev,l_orth,l_focal,total,grad_norm";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{:e},{:e},{},{},{},{},{},{}",
            self.step, self.epoch, self.phase, self.lr_backbone, self.lr_head, l.recon, l.severity, l.orthogonality, l.focal, l.total, self.grad_norm
        )
    }
}

pub fn log_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(StepRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3} phase {} loss {:.4} val acc {:.3} macro-F1 {:.3}",
            self.epoch, self.phase, self.mean_loss, self.val_accuracy, self.val_macro_f1
        )
    }
}

/// Model, optimizer and sampling state of one run.
/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub struct Trainer<S: Scalar> {
    pub cfg: TrainConfig,
    pub model: Dart<S>,
    pub opt: AdamW,
    pub loss_cfg: LossConfig,
    pub norm: NormStats,
    pub phase: Phase,
    pub step: usize,
    pub log: Vec<StepRecord>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: TrainConfig, class_weights: [f64; NUM_CLASSES], norm: NormStats) -> TrainResult<Self> {
        cfg.validate().map_err(TrainError::Config)?;
        let model = Dart::new(cfg.model_config(), default_vocabulary(), cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            loss_cfg: cfg.loss_config(class_weights.to_vec()),
            opt: AdamW::new(cfg.weight_decay),
            model,
            norm,
            phase: Phase::One,
            step: 0,
            log: Vec::new(),
            rng,
            cfg,
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn set_rng_state(&mut self, s: &RngState) {
        self.rng = ChaCha8Rng::from_seed(s.seed);
        self.rng.set_stream(s.stream);
        self.rng.set_word_pos(s.word_pos);
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.model.set_phase(phase);
    }

    /// `(backbone, head)` rates at `step` of a phase lasting `total` steps.
    pub fn learning_rates(&self, phase: Phase, step: usize, total: usize) -> (f64, f64) {
        let c = &self.cfg;
        let k = c.lr_scale;
        match phase {
            Phase::One => {
                let lr = cosine_schedule(step, total, k * c.lr_phase1, k * c.lr_phase1_end);
                (lr, lr)
            }
            Phase::Two => (
                cosine_schedule(step, total, k * c.lr_phase2_backbone, k * c.lr_phase2_end),
                cosine_schedule(step, total, k * c.lr_phase2_head, k * c.lr_phase2_end),
            ),
        }
    }

    /// Forward, loss and backward on one batch; leaves gradients in the
    /// online store and returns the loss breakdown.
    pub fn compute_gradients(&mut self, batch: &[&Sample]) -> TrainResult<LossBreakdown> {
        if batch.is_empty() {
            return Err(TrainError::Config("empty batch".into()));
        }
        let seeds: Vec<u64> = (0..batch.len()).map(|_| self.rng.random()).collect();
        let prepared = PreparedBatch::new(&self.model, batch, &self.norm, &seeds, &mut self.rng)?;
        let m = &self.model;
        // With equal online and EMA vision weights the target encoding is the
        // online full-image encoding; it is gradient-blocked either way.
        let synced = m.vision_ids().iter().all(|&id| m.params.value(id).data() == m.ema.value(id).data());
        let full = self.phase == Phase::Two || self.cfg.phase1_full_loss;
        let g = Graph::new();
        let (total, breakdown) = objective(&g, m, &m.params, (!synced).then_some(&m.ema), &prepared, &self.loss_cfg, full, Some(&mut self.rng))?;
        self.model.params.zero_grads();
        if breakdown.total.is_finite() {
            let grads = g.backward(total)?;
            grads.accumulate_into(&mut self.model.params);
        }
        Ok(breakdown)
    }

    /// One optimizer step at the given `(backbone, head)` rates.
    pub fn train_step(&mut self, batch: &[&Sample], lrs: (f64, f64), epoch: usize) -> TrainResult<StepRecord> {
        let loss = self.compute_gradients(batch)?;
        let grad_norm = clip_grad_norm(&mut self.model.params, self.cfg.grad_clip);
        let record = StepRecord {
            step: self.step,
            epoch,
            phase: if self.phase == Phase::One { 1 } else { 2 },
            lr_backbone: lrs.0,
            lr_head: lrs.1,
            loss,
            grad_norm,
        };
        if !loss.total.is_finite() || !grad_norm.is_finite() {
            log::error!("{}\n{}", StepRecord::CSV_HEADER, record.csv_row());
            return Err(TrainError::NonFinite(Box::new(record)));
        }
        let ids = self.model.vision_ids();
        let ema_before = cfg!(debug_assertions).then(|| self.model.ema.subset_hash(&ids));
        self.opt.step(&mut self.model.params, |g| match g {
            ParamGroup::Backbone => lrs.0,
            ParamGroup::Head => lrs.1,
        });
        debug_assert_eq!(ema_before, cfg!(debug_assertions).then(|| self.model.ema.subset_hash(&ids)));
        ema_update(&mut self.model.ema, &self.model.params, &ids, self.cfg.ema_lambda)?;
        self.model.params.zero_grads();
        self.step += 1;
        self.log.push(record);
        Ok(record)
    }

    /// Shuffled batches of indices into `data` for one epoch.
    pub fn epoch_batches(&mut self, len: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    pub fn evaluate(&self, data: &Dataset) -> TrainResult<ClassificationReport> {
        let refs: Vec<&Sample> = data.samples.iter().collect();
        let inf = self.model.infer_samples(&refs, &self.norm, self.cfg.gate_mode, self.cfg.eval_batch)?;
        classification_report(&inf.predictions, &data.labels(), NUM_CLASSES).map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// A batch with augmentation and mask plans already drawn, so the objective
/// is a deterministic function of the parameters apart from dropout.
pub struct PreparedBatch<S: Scalar> {
    pub images: Tensor<S>,
    pub labels: Vec<DamageLabel>,
    pub texts: Vec<String>,
    /// Masked token indices per image.
    pub targets: Vec<Vec<usize>>,
}

impl<S: Scalar> PreparedBatch<S> {
    /// Augment each image with its seed and draw mask plans from the current
    /// saliency scores.
    pub fn new<R: Rng + ?Sized>(m: &Dart<S>, batch: &[&Sample], norm: &NormStats, seeds: &[u64], rng: &mut R) -> TrainResult<Self> {
        let images = image_batch::<S>(batch.iter().zip(seeds).map(|(s, &seed)| augment(&s.image, norm, Some(seed))));
        let g = Graph::new();
        let sal = m.saliency.forward(&g, &m.params, &images)?.value().to_f64_vec();
        let n = m.cfg.vit.num_tokens();
        let targets = (0..batch.len())
            .map(|i| Ok(build_mask_plan(&sal[i * n..(i + 1) * n], &m.cfg.mask, rng)?.target))
            .collect::<TrainResult<_>>()?;
        Ok(PreparedBatch {
            images,
            labels: batch.iter().map(|s| s.label).collect(),
            texts: batch.iter().map(|s| s.description.clone()).collect(),
            targets,
        })
    }
}

/// The weighted training objective on `store`. Reconstruction targets come
/// from `ema` when given, otherwise from the detached online encoding.
/// Without `full` the severity and orthogonality terms are skipped.
#[allow(clippy::too_many_arguments)]
pub fn objective<'g, S: Scalar, R: Rng + ?Sized>(
    g: &'g Graph<S>,
    m: &Dart<S>,
    store: &ParamStore<S>,
    ema: Option<&ParamStore<S>>,
    batch: &PreparedBatch<S>,
    lc: &LossConfig,
    full: bool,
    dropout_rng: Option<&mut R>,
) -> TrainResult<(Var<'g, S>, LossBreakdown)> {
    let b = batch.labels.len();
    let classes: Vec<usize> = batch.labels.iter().map(|l| l.class_index).collect();
    let texts: Vec<&str> = batch.texts.iter().map(String::as_str).collect();
    let tokens = m.vision.embed_patches(g, store, &batch.images)?;
    let v_full = m.vision.encode(g, store, tokens, None)?;
    let (n, d) = (v_full.shape()[1], v_full.shape()[2]);

    let saliency = m.saliency.forward(g, store, &batch.images)?;
    let mut visible = vec![true; b * n];
    let mut targets = Vec::new();
    let mut weights = Vec::with_capacity(b);
    for (i, plan) in batch.targets.iter().enumerate() {
        for &t in plan {
            visible[i * n + t] = false;
            targets.push(i * n + t);
        }
        let row = saliency.index_select(0, &[i])?.reshape(vec![n])?;
        weights.push(recon_weights(row, plan)?);
    }
    let weights = g.concat(&weights, 0)?;
    let context = m.vision.encode_masked(g, store, tokens, &visible)?;
    let z_hat = m.predictor.predict_batch(g, store, context, &visible, &targets)?;
    let target_full = match ema {
        Some(ema) => m.vision.forward(g, ema, &batch.images, None)?.detach(),
        None => v_full.detach(),
    };
    let z_target = target_full.reshape(vec![b * n, d])?.index_select(0, &targets)?;

    let text = m.text_features(g, store, &texts)?;
    let p = m.fuse(g, store, v_full, text.as_ref(), &Alpha::Classes(classes.clone()))?;
    let logits = m.logits(g, store, p, dropout_rng)?;

    let mut lambdas = lc.lambdas;
    if !full {
        lambdas[1] = 0.0;
        lambdas[2] = 0.0;
    }
    let terms = [
        Some(recon_loss(z_hat, z_target, Some(weights), lc.smooth_l1_beta)?),
        full.then(|| severity_infonce(p, &batch.labels, lc.tau)).transpose()?,
        full.then(|| type_orthogonality(p, &batch.labels, lc.beta_orth)).transpose()?,
        Some(focal_loss(logits, &classes, &lc.class_weights, lc.gamma_focal)?),
    ];
    Ok(total_loss(g, terms, lambdas)?)
}

pub fn steps_per_epoch(samples: usize, batch: usize) -> usize {
    samples.div_ceil(batch.max(1))
}

/// Result of a full curriculum run.
pub struct Curriculum<S: Scalar> {
    pub last: Dart<S>,
    pub best: Dart<S>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub epochs: Vec<EpochRecord>,
    pub log: Vec<StepRecord>,
    pub norm: NormStats,
}

/// Phase one for `phase1_epochs`, then phase two; the snapshot with the
/// highest validation macro-F1 is kept as `best`, the later one on ties.
/// `on_epoch` sees every epoch summary as it completes.
pub fn run_curriculum<S: Scalar>(cfg: &TrainConfig, splits: &Splits, mut on_epoch: impl FnMut(&EpochRecord)) -> TrainResult<Curriculum<S>> {
    let mut tr = Trainer::<S>::new(cfg.clone(), splits.class_weights, splits.norm)?;
    let spe = steps_per_epoch(splits.train.len(), cfg.batch_size);
    let epochs = cfg.phase1_epochs + cfg.phase2_epochs;
    let mut best: Option<(Dart<S>, usize, f64)> = None;
    let mut summaries = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (phase, offset, phase_epochs) = if epoch < cfg.phase1_epochs {
            (Phase::One, 0, cfg.phase1_epochs)
        } else {
            (Phase::Two, cfg.phase1_epochs, cfg.phase2_epochs)
        };
        if epoch == 0 || epoch == cfg.phase1_epochs {
            tr.set_phase(phase);
        }
        let total = phase_epochs * spe;
        let mut loss_sum = 0.0;
        let batches = tr.epoch_batches(splits.train.len());
        for (k, idx) in batches.iter().enumerate() {
            let lrs = tr.learning_rates(phase, (epoch - offset) * spe + k, total);
            let batch: Vec<&Sample> = idx.iter().map(|&i| &splits.train.samples[i]).collect();
            loss_sum += tr.train_step(&batch, lrs, epoch)?.loss.total;
        }
        let val = tr.evaluate(&splits.val)?;
        let rec = EpochRecord {
            epoch,
            phase: if phase == Phase::One { 1 } else { 2 },
            mean_loss: loss_sum / batches.len() as f64,
            val_accuracy: val.accuracy,
            val_macro_f1: val.macro_f1,
        };
        log::info!("{rec}");
        on_epoch(&rec);
        if best.as_ref().is_none_or(|(_, _, f)| val.macro_f1 >= *f) {
            best = Some((tr.model.clone(), epoch, val.macro_f1));
        }
        summaries.push(rec);
    }
    let (best, best_epoch, best_val_f1) = best.expect("at least one epoch");
    Ok(Curriculum {
        last: tr.model,
        best,
        best_epoch,
        best_val_f1,
        epochs: summaries,
        log: tr.log,
        norm: tr.norm,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate_sample, make_splits, SplitCounts};

    pub(crate) fn tiny_train_config() -> TrainConfig {
        TrainConfig::toy()
    }

    fn batch(n: usize) -> Vec<Sample> {
        (0..n).map(|i| generate_sample(i % NUM_CLASSES, 100 + i as u64)).collect()
    }

    fn trainer(c: TrainConfig) -> Trainer<f64> {
        Trainer::new(c, [1.0; NUM_CLASSES], NormStats::default()).unwrap()
    }

    #[test]
    fn phase_one_step_leaves_vit_unchanged() {
        let mut tr = trainer(tiny_train_config());
        let data = batch(6);
        let refs: Vec<&Sample> = data.iter().collect();
        let ids = tr.model.vision_ids();
        let before: Vec<_> = ids.iter().map(|&id| tr.model.params.value(id).clone()).collect();
        let rec = tr.train_step(&refs, (1e-3, 1e-3), 0).unwrap();
        assert!(rec.loss.total.is_finite());
        for (id, b) in ids.iter().zip(&before) {
            assert_eq!(tr.model.params.value(*id).max_abs_diff(b), 0.0);
        }
        // Something else did move.
        let cls = tr.model.classifier.ids()[0];
        assert!(tr.opt.state.contains_key(&cls));
    }

    #[test]
    fn phase_two_moves_only_the_vit_tail() {
        let mut tr = trainer(tiny_train_config());
        tr.set_phase(Phase::Two);
        let data = batch(6);
        let refs: Vec<&Sample> = data.iter().collect();
        let head = tr.model.vision.blocks[0].ids();
        let tail = tr.model.vision.tail_ids(1);
        let before = tr.model.params.clone();
        tr.train_step(&refs, (1e-3, 1e-3), 0).unwrap();
        for id in head {
            assert_eq!(tr.model.params.value(id).max_abs_diff(before.value(id)), 0.0);
        }
        assert!(tail.iter().any(|&id| tr.model.params.value(id).max_abs_diff(before.value(id)) > 0.0));
    }

    #[test]
    fn ema_drift_is_bounded() {
        let mut tr = trainer(tiny_train_config());
        tr.set_phase(Phase::Two);
        let data = batch(6);
        let refs: Vec<&Sample> = data.iter().collect();
        let ids = tr.model.vision_ids();
        let dist = |a: &crate::tensor::ParamStore<f64>, b: &crate::tensor::ParamStore<f64>| -> f64 {
            ids.iter()
                .map(|&id| a.value(id).data().iter().zip(b.value(id).data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        };
        for _ in 0..3 {
            let ema_before = tr.model.ema.clone();
            tr.train_step(&refs, (1e-3, 1e-3), 0).unwrap();
            let moved = dist(&tr.model.ema, &ema_before);
            let gap = dist(&ema_before, &tr.model.params);
            assert!(moved <= (1.0 - tr.cfg.ema_lambda) * gap + 1e-12, "{moved} vs {gap}");
        }
    }

    #[test]
    fn overfits_one_batch() {
        let mut c = tiny_train_config();
        c.phase1_full_loss = true;
        let mut tr = trainer(c);
        tr.set_phase(Phase::Two);
        let data = batch(8);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(tr.train_step(&refs, (1e-3, 1e-3), 0).unwrap().loss.total);
        }
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.7 * head, "{head} -> {tail}");
    }

    #[test]
    fn phase_one_logs_only_recon_and_focal() {
        let mut tr = trainer(tiny_train_config());
        let data = batch(6);
        let refs: Vec<&Sample> = data.iter().collect();
        let r = tr.train_step(&refs, (1e-4, 1e-4), 0).unwrap();
        assert_eq!((r.loss.severity, r.loss.orthogonality), (0.0, 0.0));
        assert!((r.loss.total - (r.loss.recon + r.loss.focal)).abs() < 1e-12);
        tr.set_phase(Phase::Two);
        let r = tr.train_step(&refs, (1e-4, 1e-4), 0).unwrap();
        assert!(r.loss.orthogonality > 0.0);
    }

    #[test]
    fn curriculum_is_deterministic_and_keeps_best() {
        let mut c = tiny_train_config();
        c.phase1_epochs = 1;
        c.phase2_epochs = 1;
        let splits = make_splits(&SplitCounts::default().scaled(0.03), 5).unwrap();
        let mut seen = Vec::new();
        let a = run_curriculum::<f64>(&c, &splits, |r| seen.push(r.phase)).unwrap();
        assert_eq!(seen, vec![1, 2]);
        let b = run_curriculum::<f64>(&c, &splits, |_| {}).unwrap();
        let bits = |r: &Curriculum<f64>| r.log.iter().map(|s| s.loss.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.last.params.content_hash(), b.last.params.content_hash());
        let last_f1 = a.epochs.last().unwrap().val_macro_f1;
        assert!(a.best_val_f1 >= last_f1);
        assert!(a.log.iter().all(|s| (s.phase == 1) == (s.epoch < 1)));
    }

    #[test]
    fn vision_only_never_calls_text() {
        let mut c = tiny_train_config();
        c.ablation = crate::model::Ablation::E4;
        let mut tr = trainer(c);
        let data = batch(4);
        let refs: Vec<&Sample> = data.iter().collect();
        tr.train_step(&refs, (1e-4, 1e-4), 0).unwrap();
        tr.evaluate(&Dataset { samples: data.clone() }).unwrap();
        assert_eq!(tr.model.text_calls(), 0);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let r = StepRecord {
            step: 3,
            epoch: 0,
            phase: 1,
            lr_backbone: 1e-4,
            lr_head: 1e-4,
            loss: LossBreakdown::default(),
            grad_norm: 0.5,
        };
        let csv = log_csv(&[r, r]);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), StepRecord::CSV_HEADER.split(',').count());
    }
}
