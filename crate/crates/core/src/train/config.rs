//! Training configuration as flat `key = value` text.

use crate::fusion::FusionKind;
use crate::hd_mask::MaskStrategy;
use crate::loss::LossConfig;
use crate::model::{Ablation, GateMode, ModelConfig, TextMode};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase1_end: f64,
    pub lr_phase2_backbone: f64,
    pub lr_phase2_head: f64,
    pub lr_phase2_end: f64,
    /// Multiplier applied to every learning rate above.
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_lambda: f64,
    pub gate_mode: GateMode,
    pub text_mode: TextMode,
    /// Run all four loss terms in phase one too.
    pub phase1_full_loss: bool,
    pub lambda_recon: f64,
    pub lambda_severity: f64,
    pub lambda_orth: f64,
    pub lambda_focal: f64,
    pub tau: f64,
    pub beta_orth: f64,
    pub gamma_focal: f64,
    /// Masking probability of the uniform-masking ablation.
    pub uniform_mask_p: f64,
    pub dense_fraction: f64,
    pub p_dense: f64,
    pub p_background: f64,
    pub min_visible: usize,
    pub vit_depth: usize,
    pub vit_dim: usize,
    pub vit_heads: usize,
    pub patch_size: usize,
    pub text_depth: usize,
    pub text_dim: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
    pub text_trainable_blocks: usize,
    pub predictor_depth: usize,
    pub fusion_heads: usize,
    pub classifier_hidden: usize,
    pub classifier_dropout: f64,
    /// Inference batch size for validation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            ablation: Ablation::E1,
            phase1_epochs: 10,
            phase2_epochs: 40,
            batch_size: 32,
            lr_phase1: 1e-4,
            lr_phase1_end: 1e-6,
            lr_phase2_backbone: 3e-6,
            lr_phase2_head: 3e-5,
            lr_phase2_end: 1e-7,
            lr_scale: 10.0,
            weight_decay: 0.05,
            grad_clip: 1.0,
            ema_lambda: 0.996,
            gate_mode: GateMode::Predicted,
            text_mode: TextMode::Paired,
            phase1_full_loss: false,
            lambda_recon: 1.0,
            lambda_severity: 0.5,
            lambda_orth: 0.3,
            lambda_focal: 1.0,
            tau: 0.07,
            beta_orth: 0.5,
            gamma_focal: 2.0,
            uniform_mask_p: 0.46,
            dense_fraction: 0.4,
            p_dense: 0.7,
            p_background: 0.3,
            min_visible: 10,
            vit_depth: 4,
            vit_dim: 64,
            vit_heads: 4,
            patch_size: 8,
            text_depth: 6,
            text_dim: 48,
            text_heads: 4,
            text_max_len: 32,
            text_trainable_blocks: 1,
            predictor_depth: 2,
            fusion_heads: 4,
            classifier_hidden: 512,
            classifier_dropout: 0.1,
            eval_batch: 64,
        }
    }
}

/// Documentation for every key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed for weights, batching, masking, augmentation and dropout"),
    ("ablation", "E1 full, E2 fixed gates, E3 uniform masking, E4 vision only, E5 frozen text, E6 concat fusion"),
    ("phase1_epochs", "epochs with the vision encoder frozen"),
    ("phase2_epochs", "epochs with the vision tail unfrozen"),
    ("batch_size", "training batch size"),
    ("lr_phase1", "phase-one start learning rate"),
    ("lr_phase1_end", "phase-one final learning rate"),
    ("lr_phase2_backbone", "phase-two start rate of the unfrozen vision tail"),
    ("lr_phase2_head", "phase-two start rate of every other trainable module"),
    ("lr_phase2_end", "phase-two final learning rate of both groups"),
    ("lr_scale", "multiplier on every learning rate, keeping their ratios"),
    ("weight_decay", "decoupled weight decay on weight matrices"),
    ("grad_clip", "global gradient-norm clip"),
    ("ema_lambda", "EMA momentum of the target encoder"),
    ("gate_mode", "validation gate selection: label, predicted or mean"),
    ("text_mode", "paired descriptions or a learned null text"),
    ("phase1_full_loss", "true to train all four loss terms in phase one"),
    ("lambda_recon", "reconstruction loss weight"),
    ("lambda_severity", "severity contrastive loss weight"),
    ("lambda_orth", "type orthogonality loss weight"),
    ("lambda_focal", "focal classification loss weight"),
    ("tau", "contrastive temperature"),
    ("beta_orth", "intra-type compactness weight"),
    ("gamma_focal", "focal focusing exponent"),
    ("uniform_mask_p", "masking probability for the E3 ablation"),
    ("dense_fraction", "share of patches in the dense saliency tier"),
    ("p_dense", "masking probability of dense patches"),
    ("p_background", "masking probability of background patches"),
    ("min_visible", "minimum visible context patches"),
    ("vit_depth", "vision transformer blocks"),
    ("vit_dim", "vision embedding width"),
    ("vit_heads", "vision attention heads"),
    ("patch_size", "patch side in pixels"),
    ("text_depth", "text transformer blocks"),
    ("text_dim", "text embedding width"),
    ("text_heads", "text attention heads"),
    ("text_max_len", "description length in tokens"),
    ("text_trainable_blocks", "trailing text blocks that train"),
    ("predictor_depth", "predictor blocks"),
    ("fusion_heads", "cross-attention heads"),
    ("classifier_hidden", "classifier hidden width"),
    ("classifier_dropout", "classifier dropout"),
    ("eval_batch", "inference batch size"),
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {v}")),
    }
}

impl TrainConfig {
    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{k}: cannot parse {v:?}"))
        }
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "ablation" => self.ablation = Ablation::parse(v).ok_or_else(|| format!("ablation: unknown tag {v:?}"))?,
            "phase1_epochs" => self.phase1_epochs = num(key, v)?,
            "phase2_epochs" => self.phase2_epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr_phase1" => self.lr_phase1 = num(key, v)?,
            "lr_phase1_end" => self.lr_phase1_end = num(key, v)?,
            "lr_phase2_backbone" => self.lr_phase2_backbone = num(key, v)?,
            "lr_phase2_head" => self.lr_phase2_head = num(key, v)?,
            "lr_phase2_end" => self.lr_phase2_end = num(key, v)?,
            "lr_scale" => self.lr_scale = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "ema_lambda" => self.ema_lambda = num(key, v)?,
            "gate_mode" => self.gate_mode = GateMode::parse(v).ok_or_else(|| format!("gate_mode: unknown mode {v:?}"))?,
            "text_mode" => self.text_mode = TextMode::parse(v).ok_or_else(|| format!("text_mode: unknown mode {v:?}"))?,
            "phase1_full_loss" => self.phase1_full_loss = parse_bool(v)?,
            "lambda_recon" => self.lambda_recon = num(key, v)?,
            "lambda_severity" => self.lambda_severity = num(key, v)?,
            "lambda_orth" => self.lambda_orth = num(key, v)?,
            "lambda_focal" => self.lambda_focal = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "beta_orth" => self.beta_orth = num(key, v)?,
            "gamma_focal" => self.gamma_focal = num(key, v)?,
            "uniform_mask_p" => self.uniform_mask_p = num(key, v)?,
            "dense_fraction" => self.dense_fraction = num(key, v)?,
            "p_dense" => self.p_dense = num(key, v)?,
            "p_background" => self.p_background = num(key, v)?,
            "min_visible" => self.min_visible = num(key, v)?,
            "vit_depth" => self.vit_depth = num(key, v)?,
            "vit_dim" => self.vit_dim = num(key, v)?,
            "vit_heads" => self.vit_heads = num(key, v)?,
            "patch_size" => self.patch_size = num(key, v)?,
            "text_depth" => self.text_depth = num(key, v)?,
            "text_dim" => self.text_dim = num(key, v)?,
            "text_heads" => self.text_heads = num(key, v)?,
            "text_max_len" => self.text_max_len = num(key, v)?,
            "text_trainable_blocks" => self.text_trainable_blocks = num(key, v)?,
            "predictor_depth" => self.predictor_depth = num(key, v)?,
            "fusion_heads" => self.fusion_heads = num(key, v)?,
            "classifier_hidden" => self.classifier_hidden = num(key, v)?,
            "classifier_dropout" => self.classifier_dropout = num(key, v)?,
            "eval_batch" => self.eval_batch = num(key, v)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "ablation" => self.ablation.tag().to_string(),
            "phase1_epochs" => self.phase1_epochs.to_string(),
            "phase2_epochs" => self.phase2_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_phase1" => self.lr_phase1.to_string(),
            "lr_phase1_end" => self.lr_phase1_end.to_string(),
            "lr_phase2_backbone" => self.lr_phase2_backbone.to_string(),
            "lr_phase2_head" => self.lr_phase2_head.to_string(),
            "lr_phase2_end" => self.lr_phase2_end.to_string(),
            "lr_scale" => self.lr_scale.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "ema_lambda" => self.ema_lambda.to_string(),
            "gate_mode" => self.gate_mode.name().to_string(),
            "text_mode" => self.text_mode.name().to_string(),
            "phase1_full_loss" => self.phase1_full_loss.to_string(),
            "lambda_recon" => self.lambda_recon.to_string(),
            "lambda_severity" => self.lambda_severity.to_string(),
            "lambda_orth" => self.lambda_orth.to_string(),
            "lambda_focal" => self.lambda_focal.to_string(),
            "tau" => self.tau.to_string(),
            "beta_orth" => self.beta_orth.to_string(),
            "gamma_focal" => self.gamma_focal.to_string(),
            "uniform_mask_p" => self.uniform_mask_p.to_string(),
            "dense_fraction" => self.dense_fraction.to_string(),
            "p_dense" => self.p_dense.to_string(),
            "p_background" => self.p_background.to_string(),
            "min_visible" => self.min_visible.to_string(),
            "vit_depth" => self.vit_depth.to_string(),
            "vit_dim" => self.vit_dim.to_string(),
            "vit_heads" => self.vit_heads.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "text_depth" => self.text_depth.to_string(),
            "text_dim" => self.text_dim.to_string(),
            "text_heads" => self.text_heads.to_string(),
            "text_max_len" => self.text_max_len.to_string(),
            "text_trainable_blocks" => self.text_trainable_blocks.to_string(),
            "predictor_depth" => self.predictor_depth.to_string(),
            "fusion_heads" => self.fusion_heads.to_string(),
            "classifier_hidden" => self.classifier_hidden.to_string(),
            "classifier_dropout" => self.classifier_dropout.to_string(),
            "eval_batch" => self.eval_batch.to_string(),
            _ => return None,
        })
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, String> {
        let mut c = TrainConfig::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), String> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            self.set(k.trim(), v).map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(())
    }

    /// Every key with its documentation as a comment.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{k} = {}", self.get(k).expect("documented key"));
        }
        out
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), String> {
        let rates = [
            ("lr_phase1", self.lr_phase1),
            ("lr_phase1_end", self.lr_phase1_end),
            ("lr_phase2_backbone", self.lr_phase2_backbone),
            ("lr_phase2_head", self.lr_phase2_head),
            ("lr_phase2_end", self.lr_phase2_end),
            ("lr_scale", self.lr_scale),
        ];
        if let Some((k, _)) = rates.iter().find(|(_, r)| !(*r > 0.0)) {
            return Err(format!("{k} must be positive"));
        }
        if self.phase1_epochs + self.phase2_epochs == 0 {
            return Err("at least one epoch is required".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_lambda) {
            return Err("ema_lambda must be in [0, 1]".into());
        }
        let mc = self.model_config();
        mc.vit.validate()?;
        if self.text_trainable_blocks > self.text_depth {
            return Err("text_trainable_blocks exceeds text_depth".into());
        }
        self.loss_config(vec![1.0; crate::taxonomy::NUM_CLASSES]).validate()
    }

    /// Model wiring, with the ablation applied.
    /// Small architecture for fast tests and gradient checks.
    pub fn toy() -> Self {
        TrainConfig {
            vit_depth: 2,
            vit_dim: 32,
            text_depth: 3,
            text_dim: 16,
            classifier_hidden: 32,
            predictor_depth: 1,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::default();
        m.vit.depth = self.vit_depth;
        m.vit.embed_dim = self.vit_dim;
        m.vit.heads = self.vit_heads;
        m.vit.patch_size = self.patch_size;
        m.text.depth = self.text_depth;
        m.text.dim = self.text_dim;
        m.text.heads = self.text_heads;
        m.text.max_len = self.text_max_len;
        m.text.taps = text_taps(self.text_depth);
        m.text.trainable_blocks = self.text_trainable_blocks;
        m.predictor_depth = self.predictor_depth;
        m.predictor_heads = self.vit_heads;
        m.fusion_heads = self.fusion_heads;
        m.classifier_hidden = self.classifier_hidden;
        m.classifier_dropout = self.classifier_dropout;
        m.text_mode = self.text_mode;
        m.mask.dense_fraction = self.dense_fraction;
        m.mask.p_dense = self.p_dense;
        m.mask.p_background = self.p_background;
        m.mask.min_visible = self.min_visible;
        match self.ablation {
            Ablation::E1 => {}
            Ablation::E2 => m.fusion_kind = FusionKind::FixedGate,
            Ablation::E3 => m.mask.strategy = MaskStrategy::Uniform(self.uniform_mask_p),
            Ablation::E4 => m.fusion_kind = FusionKind::VisionOnly,
            Ablation::E5 => m.text.trainable_blocks = 0,
            Ablation::E6 => m.fusion_kind = FusionKind::Concat,
        }
        m
    }

    pub fn loss_config(&self, class_weights: Vec<f64>) -> LossConfig {
        LossConfig {
            lambdas: [self.lambda_recon, self.lambda_severity, self.lambda_orth, self.lambda_focal],
            tau: self.tau,
            beta_orth: self.beta_orth,
            gamma_focal: self.gamma_focal,
            class_weights,
            smooth_l1_beta: 1.0,
        }
    }
}

/// Three taps spread evenly over the depth, ending at the last block.
pub fn text_taps(depth: usize) -> [usize; 3] {
    let d = depth.max(1);
    [(d / 3).max(1), (2 * d / 3).max(1), d]
}
