//! The assembled model: online and EMA vision encoders, saliency scorer,
//! latent predictor, text encoder, fusion and classification head.

use crate::data::augment::augment;
use crate::data::describe::template_corpus;
use crate::data::{NormStats, Sample};
use crate::downstream::metrics::argmax;
use crate::fusion::{Alpha, Fusion, FusionConfig, FusionKind, TextInput};
use crate::hd_mask::{MaskConfig, SaliencyNet};
use crate::nn::{Init, Mlp};
use crate::predictor::{Predictor, PredictorConfig};
use crate::scalar::Scalar;
use crate::taxonomy::NUM_CLASSES;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, TensorResult, Var};
use crate::text::{TextConfig, TextEncoder, TokenBatch, Vocabulary};
use crate::vision::{VisionEncoder, VitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextMode {
    /// Each image is paired with its description.
    Paired,
    /// A learned constant stands in for the description.
    Null,
}

impl TextMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paired" => Some(TextMode::Paired),
            "null" => Some(TextMode::Null),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TextMode::Paired => "paired",
            TextMode::Null => "null",
        }
    }
}

/// Gate selection at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Label,
    /// First pass with the mean gate, second with the predicted class's gate.
    Predicted,
    Mean,
}

impl GateMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "label" => Some(GateMode::Label),
            "predicted" => Some(GateMode::Predicted),
            "mean" => Some(GateMode::Mean),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateMode::Label => "label",
            GateMode::Predicted => "predicted",
            GateMode::Mean => "mean",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Ablation::E1, Ablation::E2, Ablation::E3, Ablation::E4, Ablation::E5, Ablation::E6];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag().eq_ignore_ascii_case(s))
    }

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::E1 => "E1",
            Ablation::E2 => "E2",
            Ablation::E3 => "E3",
            Ablation::E4 => "E4",
            Ablation::E5 => "E5",
            Ablation::E6 => "E6",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Ablation::E1 => "full model",
            Ablation::E2 => "gates fixed at one",
            Ablation::E3 => "uniform random masking",
            Ablation::E4 => "vision only",
            Ablation::E5 => "frozen text encoder",
            Ablation::E6 => "concat fusion",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub text: TextConfig,
    pub predictor_depth: usize,
    pub predictor_heads: usize,
    pub fusion_kind: FusionKind,
    pub fusion_heads: usize,
    pub classifier_hidden: usize,
    pub classifier_dropout: f64,
    pub text_mode: TextMode,
    pub mask: MaskConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vit: VitConfig::default(),
            text: TextConfig::default(),
            predictor_depth: 2,
            predictor_heads: 4,
            fusion_kind: FusionKind::Gated,
            fusion_heads: 4,
            classifier_hidden: 512,
            classifier_dropout: 0.1,
            text_mode: TextMode::Paired,
            mask: MaskConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn uses_text(&self) -> bool {
        self.fusion_kind != FusionKind::VisionOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
}

/// Outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[B, D]` pooled embeddings from the final pass.
    pub embeddings: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    /// Predictions of the mean-gate first pass in predicted mode.
    pub first_pass: Option<Vec<usize>>,
}

pub struct Dart<S: Scalar> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub vision: VisionEncoder,
    pub saliency: SaliencyNet,
    pub predictor: Predictor,
    pub text: Option<TextEncoder>,
    pub fusion: Fusion,
    pub classifier: Mlp,
    pub params: ParamStore<S>,
    /// EMA copy; only the vision parameters are ever read from it.
    pub ema: ParamStore<S>,
    text_calls: Cell<usize>,
}

impl<S: Scalar> Clone for Dart<S> {
    fn clone(&self) -> Self {
        Dart {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            vision: self.vision.clone(),
            saliency: self.saliency.clone(),
            predictor: self.predictor.clone(),
            text: self.text.clone(),
            fusion: self.fusion.clone(),
            classifier: self.classifier.clone(),
            params: self.params.clone(),
            ema: self.ema.clone(),
            text_calls: Cell::new(self.text_calls.get()),
        }
    }
}

pub fn default_vocabulary() -> Vocabulary {
    let corpus = template_corpus();
    Vocabulary::from_corpus(corpus.iter().map(|s| s.as_str()))
}

impl<S: Scalar> Dart<S> {
    /// Build with weights drawn from `seed`; the EMA copy starts equal to the
    /// online weights. Parameters start in phase-one trainability.
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let vit = cfg.vit.clone();
        let vision = VisionEncoder::new(&mut params, vit.clone(), &mut rng);
        let saliency = SaliencyNet::new(&mut params, vit.image_size, vit.patch_size, &mut rng);
        let predictor = Predictor::new(
            &mut params,
            PredictorConfig {
                depth: cfg.predictor_depth,
                heads: cfg.predictor_heads,
                dim: vit.embed_dim,
                num_tokens: vit.num_tokens(),
            },
            &mut rng,
        );
        let text = cfg.uses_text().then(|| TextEncoder::new(&mut params, cfg.text.clone(), vocab.len(), &mut rng));
        let fusion = Fusion::new(
            &mut params,
            FusionConfig {
                vision_dim: vit.embed_dim,
                text_dim: cfg.text.dim,
                heads: cfg.fusion_heads,
                kind: cfg.fusion_kind,
            },
            &mut rng,
        );
        let mut classifier = Mlp::new(&mut params, "cls", (vit.embed_dim, cfg.classifier_hidden, NUM_CLASSES), Init::FanIn, &mut rng);
        classifier.dropout = cfg.classifier_dropout;
        let ema = params.clone();
        let mut m = Dart {
            cfg,
            vocab,
            vision,
            saliency,
            predictor,
            text,
            fusion,
            classifier,
            params,
            ema,
            text_calls: Cell::new(0),
        };
        for id in m.ema.ids().collect::<Vec<_>>() {
            m.ema.set_trainable(id, false);
        }
        m.set_phase(Phase::One);
        m
    }

    /// Number of text-encoder forward calls so far.
    pub fn text_calls(&self) -> usize {
        self.text_calls.get()
    }

    pub fn vision_ids(&self) -> Vec<ParamId> {
        self.vision.param_ids()
    }

    /// Parameters trained in `phase`.
    pub fn trainable_ids(&self, phase: Phase) -> Vec<ParamId> {
        let mut ids = self.saliency.param_ids();
        ids.extend(self.predictor.param_ids());
        ids.extend(self.fusion.param_ids());
        ids.extend(self.classifier.ids());
        if let Some(t) = &self.text {
            if t.cfg.trainable_blocks > 0 {
                ids.extend(t.tail_ids(t.cfg.trainable_blocks));
            }
            if self.cfg.text_mode == TextMode::Null {
                ids.push(t.null_text);
            }
        }
        if phase == Phase::Two {
            ids.extend(self.vision.tail_ids(self.cfg.vit.phase2_trainable_blocks()));
        }
        ids
    }

    pub fn set_phase(&mut self, phase: Phase) {
        let all: Vec<ParamId> = self.params.ids().collect();
        for id in all {
            self.params.set_trainable(id, false);
        }
        for id in self.trainable_ids(phase) {
            self.params.set_trainable(id, true);
        }
    }

    /// Text features and validity mask, or `None` without a text path.
    pub fn text_features<'g>(&self, g: &'g Graph<S>, store: &ParamStore<S>, texts: &[&str]) -> TensorResult<Option<(Var<'g, S>, Vec<bool>)>> {
        let Some(enc) = &self.text else { return Ok(None) };
        match self.cfg.text_mode {
            TextMode::Paired => {
                self.text_calls.set(self.text_calls.get() + 1);
                let tokens = TokenBatch::new(&self.vocab, texts, enc.cfg.max_len);
                Ok(Some((enc.encode(g, store, &tokens)?, tokens.valid)))
            }
            TextMode::Null => {
                let tokens = TokenBatch::all_valid(texts.len(), enc.cfg.max_len);
                Ok(Some((enc.null_features(g, store, texts.len())?, tokens.valid)))
            }
        }
    }

    pub fn fuse<'g>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        v: Var<'g, S>,
        text: Option<&(Var<'g, S>, Vec<bool>)>,
        alpha: &Alpha,
    ) -> TensorResult<Var<'g, S>> {
        let ti = text.map(|(f, valid)| TextInput {
            features: *f,
            valid: valid.as_slice(),
        });
        self.fusion.forward(g, store, v, ti, alpha)
    }

    pub fn logits<'g, R: Rng + ?Sized>(&self, g: &'g Graph<S>, store: &ParamStore<S>, p: Var<'g, S>, rng: Option<&mut R>) -> TensorResult<Var<'g, S>> {
        self.classifier.forward(g, store, p, rng)
    }

    /// Forward pass without dropout. `labels` is required in label mode.
    pub fn infer(&self, images: &Tensor<S>, texts: &[&str], mode: GateMode, labels: Option<&[usize]>) -> TensorResult<Inference> {
        let g = Graph::new();
        let store = &self.params;
        let batch = images.shape()[0];
        if texts.len() != batch {
            return Err(TensorError::Contract(format!("{} texts for {batch} images", texts.len())));
        }
        let v = self.vision.forward(&g, store, images, None)?;
        let text = self.text_features(&g, store, texts)?;
        let gated = self.cfg.fusion_kind == FusionKind::Gated;
        let pass = |alpha: &Alpha| -> TensorResult<(Tensor<S>, Tensor<S>)> {
            let p = self.fuse(&g, store, v, text.as_ref(), alpha)?;
            let l = self.logits(&g, store, p, None::<&mut ChaCha8Rng>)?;
            Ok((p.value(), l.value()))
        };
        let rows = |t: &Tensor<S>| -> Vec<Vec<f64>> {
            let w = t.shape()[1];
            t.data().chunks(w).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect()
        };
        let (p, l, first) = match (mode, gated) {
            (_, false) | (GateMode::Mean, true) => {
                let (p, l) = pass(&Alpha::Mean)?;
                (p, l, None)
            }
            (GateMode::Label, true) => {
                let labels = labels.ok_or_else(|| TensorError::Contract("label gate mode needs labels".into()))?;
                let (p, l) = pass(&Alpha::Classes(labels.to_vec()))?;
                (p, l, None)
            }
            (GateMode::Predicted, true) => {
                let (_, l0) = pass(&Alpha::Mean)?;
                let first: Vec<usize> = rows(&l0).iter().map(|r| argmax(r)).collect();
                let (p, l) = pass(&Alpha::Classes(first.clone()))?;
                (p, l, Some(first))
            }
        };
        let logits = rows(&l);
        Ok(Inference {
            embeddings: rows(&p),
            predictions: logits.iter().map(|r| argmax(r)).collect(),
            logits,
            first_pass: first,
        })
    }

    /// Inference over samples in chunks, with evaluation preprocessing.
    pub fn infer_samples(&self, samples: &[&Sample], norm: &NormStats, mode: GateMode, chunk: usize) -> TensorResult<Inference> {
        let mut out = Inference {
            embeddings: Vec::new(),
            logits: Vec::new(),
            predictions: Vec::new(),
            first_pass: None,
        };
        let mut first = Vec::new();
        for part in samples.chunks(chunk.max(1)) {
            let images = image_batch(part.iter().map(|s| augment(&s.image, norm, None)));
            let texts: Vec<&str> = part.iter().map(|s| s.description.as_str()).collect();
            let labels: Vec<usize> = part.iter().map(|s| s.label.class_index).collect();
            let r = self.infer(&images, &texts, mode, Some(&labels))?;
            out.embeddings.extend(r.embeddings);
            out.logits.extend(r.logits);
            out.predictions.extend(r.predictions);
            if let Some(f) = r.first_pass {
                first.extend(f);
            }
        }
        if !first.is_empty() {
            out.first_pass = Some(first);
        }
        Ok(out)
    }
}

/// Stack preprocessed `[3, H, W]` images into `[B, 3, H, W]`.
pub fn image_batch<S: Scalar>(images: impl IntoIterator<Item = Vec<f32>>) -> Tensor<S> {
    let mut data = Vec::new();
    let mut b = 0;
    for img in images {
        data.extend(img.into_iter().map(|v| S::of(v as f64)));
        b += 1;
    }
    let side = ((data.len() / b.max(1) / 3) as f64).sqrt() as usize;
    Tensor::new(vec![b, 3, side, side], data).expect("square images")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sample;

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.vit.depth = 2;
        c.vit.embed_dim = 32;
        c.text.depth = 3;
        c.text.dim = 16;
        c.text.taps = [1, 2, 3];
        c.classifier_hidden = 32;
        c.predictor_depth = 1;
        c
    }

    #[test]
    fn phase_trainability() {
        let m = Dart::<f64>::new(ModelConfig::default(), default_vocabulary(), 1);
        for id in m.vision_ids() {
            assert!(!m.params.get(id).requires_grad);
        }
        let mut m2 = m.clone();
        m2.set_phase(Phase::Two);
        let tail = m2.vision.tail_ids(1);
        for id in m2.vision_ids() {
            assert_eq!(m2.params.get(id).requires_grad, tail.contains(&id));
        }
        let t = m.text.as_ref().unwrap();
        assert!(!m.params.get(t.tok_embed).requires_grad);
        assert!(m.params.get(t.blocks[5].ln1.gamma).requires_grad);
        assert!(!m.params.get(t.blocks[4].ln1.gamma).requires_grad);
    }

    #[test]
    fn ema_starts_equal_to_online() {
        let m = Dart::<f64>::new(tiny_config(), default_vocabulary(), 3);
        assert_eq!(m.params.subset_hash(&m.vision_ids()), m.ema.subset_hash(&m.vision_ids()));
    }

    #[test]
    fn vision_only_has_fewer_parameters_and_no_text_calls() {
        let mut c = tiny_config();
        let full = Dart::<f64>::new(c.clone(), default_vocabulary(), 1);
        c.fusion_kind = FusionKind::VisionOnly;
        let vo = Dart::<f64>::new(c, default_vocabulary(), 1);
        assert!(vo.params.num_scalars() < full.params.num_scalars());
        let s = generate_sample(0, 1);
        let norm = NormStats::default();
        vo.infer_samples(&[&s], &norm, GateMode::Predicted, 8).unwrap();
        assert_eq!(vo.text_calls(), 0);
        full.infer_samples(&[&s], &norm, GateMode::Predicted, 8).unwrap();
        assert_eq!(full.text_calls(), 1);
    }

    #[test]
    fn gate_modes_agree_when_gates_are_equal() {
        let m = Dart::<f64>::new(tiny_config(), default_vocabulary(), 2);
        let samples: Vec<_> = (0..3).map(|c| generate_sample(c * 4, c as u64)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let norm = NormStats::default();
        let a = m.infer_samples(&refs, &norm, GateMode::Mean, 8).unwrap();
        let b = m.infer_samples(&refs, &norm, GateMode::Predicted, 8).unwrap();
        let c = m.infer_samples(&refs, &norm, GateMode::Label, 8).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits, c.logits);
    }

    #[test]
    fn inference_is_deterministic_and_chunk_invariant() {
        let m = Dart::<f64>::new(tiny_config(), default_vocabulary(), 2);
        let samples: Vec<_> = (0..5).map(|c| generate_sample(c, 10 + c as u64)).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let norm = NormStats::default();
        let a = m.infer_samples(&refs, &norm, GateMode::Mean, 5).unwrap();
        let b = m.infer_samples(&refs, &norm, GateMode::Mean, 5).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        let c = m.infer_samples(&refs, &norm, GateMode::Mean, 2).unwrap();
        for (x, y) in a.logits.iter().flatten().zip(c.logits.iter().flatten()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn ablation_tags_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.tag()), Some(a));
        }
        assert_eq!(Ablation::parse("E7"), None);
    }
}
