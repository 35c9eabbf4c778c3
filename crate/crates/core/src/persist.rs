//! Checkpoint container: a text header naming every blob, a little-endian
//! `f64` payload and a SHA-256 trailer over everything before it.

use crate::data::NormStats;
use crate::model::{Dart, ModelConfig, Phase};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};
use crate::text::Vocabulary;
use crate::train::optim::MomentState;
use crate::train::{EpochRecord, RngState, StepRecord, TrainConfig, Trainer};
use crate::taxonomy::NUM_CLASSES;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const VERSION: u32 = 1;
const MAGIC: &str = "DARTCKPT";
const HASH_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint integrity check failed: stored hash does not match contents")]
    Integrity,
    #[error("checkpoint format version {found}, this build reads version {supported}; re-save the checkpoint with a matching build")]
    Version { found: String, supported: u32 },
    #[error("header line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("config mismatch in {field}: checkpoint has {saved}, model has {current}")]
    ConfigMismatch { field: String, saved: String, current: String },
    #[error("parameter {name}: checkpoint shape {saved:?}, model shape {current:?}")]
    Shape { name: String, saved: Vec<usize>, current: Vec<usize> },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("checkpoint scalar type {saved}, requested {current}")]
    Scalar { saved: String, current: String },
}

pub type PersistResult<T> = Result<T, PersistError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub scalar: String,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub norm: NormStats,
    pub class_weights: Vec<f64>,
    pub phase: u8,
    pub step: usize,
    pub rng: Option<RngState>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub online: Vec<NamedTensor>,
    pub ema: Vec<NamedTensor>,
    /// Optimizer moments keyed by parameter name.
    pub optimizer: Vec<(String, MomentState)>,
}

fn tensors<S: Scalar>(store: &ParamStore<S>) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|(_, p)| NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}

fn load_store<S: Scalar>(store: &mut ParamStore<S>, saved: &[NamedTensor]) -> PersistResult<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let t = saved.iter().find(|t| t.name == name).ok_or_else(|| PersistError::MissingParam(name.clone()))?;
        let current = store.value(id).shape().to_vec();
        if t.shape != current {
            return Err(PersistError::Shape {
                name,
                saved: t.shape.clone(),
                current,
            });
        }
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| S::of(v)).collect()).expect("shape checked");
        store.set_value(id, value).expect("shape checked");
    }
    Ok(())
}

/// Every model-shaping field with its value, for mismatch reports.
pub fn model_fields(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("vit.image_size", c.vit.image_size.to_string()),
        ("vit.patch_size", c.vit.patch_size.to_string()),
        ("vit.embed_dim", c.vit.embed_dim.to_string()),
        ("vit.depth", c.vit.depth.to_string()),
        ("vit.heads", c.vit.heads.to_string()),
        ("vit.mlp_ratio", c.vit.mlp_ratio.to_string()),
        ("text.depth", c.text.depth.to_string()),
        ("text.dim", c.text.dim.to_string()),
        ("text.heads", c.text.heads.to_string()),
        ("text.max_len", c.text.max_len.to_string()),
        ("text.taps", format!("{:?}", c.text.taps)),
        ("predictor_depth", c.predictor_depth.to_string()),
        ("predictor_heads", c.predictor_heads.to_string()),
        ("fusion_kind", format!("{:?}", c.fusion_kind)),
        ("fusion_heads", c.fusion_heads.to_string()),
        ("classifier_hidden", c.classifier_hidden.to_string()),
    ]
}

fn phase_of(p: u8) -> Phase {
    if p == 2 {
        Phase::Two
    } else {
        Phase::One
    }
}

impl Checkpoint {
    /// Model weights with their normalisation and history; no optimizer or
    /// RNG state.
    pub fn of_model<S: Scalar>(model: &Dart<S>, config: &TrainConfig, norm: NormStats, class_weights: &[f64], phase: u8, epochs: &[EpochRecord]) -> Self {
        Checkpoint {
            scalar: S::DTYPE.to_string(),
            config: config.clone(),
            vocab: model.vocab.tokens().to_vec(),
            norm,
            class_weights: class_weights.to_vec(),
            phase,
            step: 0,
            rng: None,
            epochs: epochs.to_vec(),
            steps: Vec::new(),
            online: tensors(&model.params),
            ema: tensors(&model.ema),
            optimizer: Vec::new(),
        }
    }

    /// Full resumable training state.
    pub fn of_trainer<S: Scalar>(tr: &Trainer<S>, epochs: &[EpochRecord]) -> Self {
        let mut c = Self::of_model(&tr.model, &tr.cfg, tr.norm, &tr.loss_cfg.class_weights, if tr.phase == Phase::Two { 2 } else { 1 }, epochs);
        c.step = tr.step;
        c.rng = Some(tr.rng_state());
        c.steps = tr.log.clone();
        c.optimizer = tr.opt.state.iter().map(|(id, m)| (tr.model.params.get(*id).name.clone(), m.clone())).collect();
        c
    }

    /// Copy the weights into `model`, which must have the same layout.
    pub fn restore_into<S: Scalar>(&self, model: &mut Dart<S>) -> PersistResult<()> {
        if self.scalar != S::DTYPE {
            return Err(PersistError::Scalar {
                saved: self.scalar.clone(),
                current: S::DTYPE.to_string(),
            });
        }
        let saved = model_fields(&self.config.model_config());
        for ((field, a), (_, b)) in saved.into_iter().zip(model_fields(&model.cfg)) {
            if a != b {
                return Err(PersistError::ConfigMismatch {
                    field: field.to_string(),
                    saved: a,
                    current: b,
                });
            }
        }
        load_store(&mut model.params, &self.online)?;
        load_store(&mut model.ema, &self.ema)?;
        model.set_phase(phase_of(self.phase));
        Ok(())
    }

    pub fn model<S: Scalar>(&self) -> PersistResult<Dart<S>> {
        let vocab = Vocabulary::from_tokens(self.vocab.clone()).map_err(|msg| PersistError::Format { line: 0, msg })?;
        let mut m = Dart::new(self.config.model_config(), vocab, self.config.seed);
        self.restore_into(&mut m)?;
        Ok(m)
    }

    /// Trainer positioned exactly where the saved one stopped.
    pub fn trainer<S: Scalar>(&self) -> PersistResult<Trainer<S>> {
        let weights: [f64; NUM_CLASSES] = self.class_weights.clone().try_into().map_err(|_| PersistError::Format {
            line: 0,
            msg: "class_weights must have 14 entries".into(),
        })?;
        let mut tr = Trainer::<S>::new(self.config.clone(), weights, self.norm).map_err(|e| PersistError::Format { line: 0, msg: e.to_string() })?;
        tr.model = self.model()?;
        tr.set_phase(phase_of(self.phase));
        tr.step = self.step;
        tr.log = self.steps.clone();
        if let Some(r) = &self.rng {
            tr.set_rng_state(r);
        }
        for (name, m) in &self.optimizer {
            let id = tr.model.params.id_of(name).ok_or_else(|| PersistError::MissingParam(name.clone()))?;
            tr.opt.state.insert(id, m.clone());
        }
        Ok(tr)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {VERSION}\nscalar {}\n", self.scalar);
        for line in self.config.to_kv().lines().filter(|l| !l.starts_with('#')) {
            let _ = writeln!(header, "config {line}");
        }
        for t in &self.vocab {
            let _ = writeln!(header, "vocab {t}");
        }
        let _ = writeln!(header, "norm {}", json(&self.norm));
        let _ = writeln!(header, "class_weights {}", json(&self.class_weights));
        let _ = writeln!(header, "phase {}\nstep {}", self.phase, self.step);
        if let Some(r) = &self.rng {
            let _ = writeln!(header, "rng {} {} {}", hex::encode(r.seed), r.stream, r.word_pos);
        }
        let _ = writeln!(header, "epochs {}", json(&self.epochs));
        let _ = writeln!(header, "steps {}", json(&self.steps));
        let mut payload: Vec<f64> = Vec::new();
        for (kind, list) in [("online", &self.online), ("ema", &self.ema)] {
            for t in list {
                let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
                let _ = writeln!(header, "tensor {kind} {} {} {} {}", t.name, dims.join(","), payload.len(), t.data.len());
                payload.extend(&t.data);
            }
        }
        for (name, m) in &self.optimizer {
            let _ = writeln!(header, "adam {name} {} {} {}", m.t, payload.len(), m.m.len());
            payload.extend(&m.m);
            payload.extend(&m.v);
        }
        let _ = writeln!(header, "payload {}", payload.len());
        let mut out = header.into_bytes();
        for v in payload {
            out.extend(v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend(digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> PersistResult<Self> {
        if !bytes.starts_with(MAGIC.as_bytes()) || bytes.len() < HASH_LEN {
            return Err(PersistError::Format { line: 1, msg: "not a checkpoint".into() });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(PersistError::Integrity);
        }
        let mut pos = 0;
        let mut lines: Vec<&str> = Vec::new();
        let payload_len = loop {
            let end = body[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| PersistError::Format {
                line: lines.len() + 1,
                msg: "header not terminated".into(),
            })?;
            let line = std::str::from_utf8(&body[pos..pos + end]).map_err(|_| PersistError::Format {
                line: lines.len() + 1,
                msg: "header is not UTF-8".into(),
            })?;
            pos += end + 1;
            lines.push(line);
            if let Some(n) = line.strip_prefix("payload ") {
                break n.parse::<usize>().map_err(|_| PersistError::Format {
                    line: lines.len(),
                    msg: "bad payload length".into(),
                })?;
            }
        };
        let data = &body[pos..];
        if data.len() != payload_len * 8 {
            return Err(PersistError::Format {
                line: lines.len(),
                msg: format!("payload has {} bytes, header says {}", data.len(), payload_len * 8),
            });
        }
        let payload: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        parse(&lines, &payload)
    }

    pub fn save(&self, path: &Path) -> PersistResult<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> PersistResult<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn parse(lines: &[&str], payload: &[f64]) -> PersistResult<Checkpoint> {
    let bad = |line: usize, msg: String| PersistError::Format { line: line + 1, msg };
    let version = lines[0].strip_prefix(MAGIC).map(str::trim).unwrap_or("");
    if version != VERSION.to_string() {
        return Err(PersistError::Version {
            found: version.to_string(),
            supported: VERSION,
        });
    }
    let slice = |i: usize, off: &str, len: &str| -> PersistResult<Vec<f64>> {
        let off: usize = off.parse().map_err(|_| bad(i, "bad offset".into()))?;
        let len: usize = len.parse().map_err(|_| bad(i, "bad length".into()))?;
        payload.get(off..off + len).map(|s| s.to_vec()).ok_or_else(|| bad(i, "blob outside payload".into()))
    };
    let mut kv = String::new();
    let mut c = Checkpoint {
        scalar: String::new(),
        config: TrainConfig::default(),
        vocab: Vec::new(),
        norm: NormStats::default(),
        class_weights: Vec::new(),
        phase: 1,
        step: 0,
        rng: None,
        epochs: Vec::new(),
        steps: Vec::new(),
        online: Vec::new(),
        ema: Vec::new(),
        optimizer: Vec::new(),
    };
    for (i, line) in lines.iter().enumerate().skip(1) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let json_err = |e: serde_json::Error| bad(i, e.to_string());
        match key {
            "scalar" => c.scalar = rest.to_string(),
            "config" => {
                kv.push_str(rest);
                kv.push('\n');
            }
            "vocab" => c.vocab.push(rest.to_string()),
            "norm" => c.norm = serde_json::from_str(rest).map_err(json_err)?,
            "class_weights" => c.class_weights = serde_json::from_str(rest).map_err(json_err)?,
            "phase" => c.phase = rest.parse().map_err(|_| bad(i, "bad phase".into()))?,
            "step" => c.step = rest.parse().map_err(|_| bad(i, "bad step".into()))?,
            "epochs" => c.epochs = serde_json::from_str(rest).map_err(json_err)?,
            "steps" => c.steps = serde_json::from_str(rest).map_err(json_err)?,
            "rng" => {
                let f: Vec<&str> = rest.split(' ').collect();
                let [seed, stream, word] = f[..] else { return Err(bad(i, "rng needs three fields".into())) };
                let seed: [u8; 32] = hex::decode(seed).ok().and_then(|v| v.try_into().ok()).ok_or_else(|| bad(i, "bad rng seed".into()))?;
                c.rng = Some(RngState {
                    seed,
                    stream: stream.parse().map_err(|_| bad(i, "bad rng stream".into()))?,
                    word_pos: word.parse().map_err(|_| bad(i, "bad rng position".into()))?,
                });
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                let [kind, name, shape, off, len] = f[..] else { return Err(bad(i, "tensor needs five fields".into())) };
                let shape: Vec<usize> = shape.split(',').map(|d| d.parse()).collect::<Result<_, _>>().map_err(|_| bad(i, "bad shape".into()))?;
                let data = slice(i, off, len)?;
                if shape.iter().product::<usize>() != data.len() {
                    return Err(bad(i, format!("shape {shape:?} does not hold {} values", data.len())));
                }
                let t = NamedTensor { name: name.to_string(), shape, data };
                match kind {
                    "online" => c.online.push(t),
                    "ema" => c.ema.push(t),
                    _ => return Err(bad(i, format!("unknown tensor kind {kind}"))),
                }
            }
            "adam" => {
                let f: Vec<&str> = rest.split(' ').collect();
                let [name, t, off, len] = f[..] else { return Err(bad(i, "adam needs four fields".into())) };
                let n: usize = len.parse().map_err(|_| bad(i, "bad length".into()))?;
                let both = slice(i, off, &(2 * n).to_string())?;
                c.optimizer.push((
                    name.to_string(),
                    MomentState {
                        m: both[..n].to_vec(),
                        v: both[n..].to_vec(),
                        t: t.parse().map_err(|_| bad(i, "bad step count".into()))?,
                    },
                ));
            }
            "payload" => {}
            _ => return Err(bad(i, format!("unknown header entry {key}"))),
        }
    }
    c.config = TrainConfig::from_kv(&kv).map_err(|msg| bad(0, format!("config: {msg}")))?;
    Ok(c)
}
