//! Small heads trained on frozen embeddings: classification, severity
//! regression and the maintenance-action probe.

use crate::loss::focal_loss;
use crate::nn::{dropout, Init, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, TensorResult, Var};
use crate::train::AdamW;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Hidden width; `None` gives a linear head.
    pub hidden: Option<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl HeadConfig {
    pub fn classifier(seed: u64) -> Self {
        HeadConfig {
            hidden: Some(512),
            dropout: 0.1,
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            patience: 30,
            seed,
        }
    }

    pub fn regressor(seed: u64) -> Self {
        HeadConfig {
            hidden: Some(256),
            dropout: 0.0,
            ..Self::classifier(seed)
        }
    }

    pub fn linear(seed: u64) -> Self {
        HeadConfig {
            hidden: None,
            dropout: 0.0,
            ..Self::classifier(seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Focal loss over `classes` with per-class weights.
    Focal { classes: usize, weights: Vec<f64>, gamma: f64 },
    Mse,
}

/// Training targets: class indices or real values.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }
}

/// Input-standardising MLP (or linear map) on `f64`.
#[derive(Clone, Debug)]
pub struct Head {
    pub layers: Vec<Linear>,
    pub dropout: f64,
    pub store: ParamStore<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

impl Head {
    fn new(dim: usize, out: usize, cfg: &HeadConfig, x: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let layers = match cfg.hidden {
            Some(h) => vec![
                Linear::new(&mut store, "head.fc1", dim, h, Init::FanIn, rng),
                Linear::new(&mut store, "head.fc2", h, out, Init::FanIn, rng),
            ],
            None => vec![Linear::new(&mut store, "head.fc", dim, out, Init::FanIn, rng)],
        };
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-8)
            })
            .collect();
        Head {
            layers,
            dropout: cfg.dropout,
            store,
            mean,
            std,
            best_epoch: 0,
        }
    }

    fn input<'g>(&self, g: &'g Graph<f64>, x: &[&[f64]]) -> TensorResult<Var<'g, f64>> {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(x.len() * d);
        for row in x {
            data.extend(row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
        }
        Ok(g.constant(Tensor::new(vec![x.len(), d], data)?))
    }

    fn forward<'g>(&self, g: &'g Graph<f64>, x: Var<'g, f64>, rng: Option<&mut ChaCha8Rng>) -> TensorResult<Var<'g, f64>> {
        match self.layers.as_slice() {
            [fc1, fc2] => {
                let h = fc1.forward(g, &self.store, x)?.gelu();
                let h = dropout(h, self.dropout, rng)?;
                fc2.forward(g, &self.store, h)
            }
            [fc] => fc.forward(g, &self.store, x),
            _ => unreachable!("one or two layers"),
        }
    }

    /// Eval-mode outputs, one row per input.
    pub fn predict(&self, x: &[Vec<f64>]) -> TensorResult<Vec<Vec<f64>>> {
        let g = Graph::new();
        let refs: Vec<&[f64]> = x.iter().map(|r| r.as_slice()).collect();
        let y = self.forward(&g, self.input(&g, &refs)?, None)?.value();
        let w = y.shape()[1];
        Ok(y.data().chunks(w).map(|r| r.to_vec()).collect())
    }

    pub fn predict_classes(&self, x: &[Vec<f64>]) -> TensorResult<Vec<usize>> {
        Ok(self.predict(x)?.iter().map(|r| super::metrics::argmax(r)).collect())
    }

    pub fn predict_values(&self, x: &[Vec<f64>]) -> TensorResult<Vec<f64>> {
        Ok(self.predict(x)?.into_iter().map(|r| r[0]).collect())
    }
}

/// Train a head with AdamW, keeping the weights with the best `score` on the
/// validation inputs (higher is better) and stopping after `patience`
/// epochs without improvement.
pub fn fit_head(
    x: &[Vec<f64>],
    y: &Targets,
    objective: &Objective,
    cfg: &HeadConfig,
    val_x: &[Vec<f64>],
    score: impl Fn(&Head, &[Vec<f64>]) -> f64,
) -> TensorResult<Head> {
    assert_eq!(x.len(), y.len(), "one target per input");
    let dim = x.first().map(|r| r.len()).unwrap_or(0);
    let out = match objective {
        Objective::Focal { classes, .. } => *classes,
        Objective::Mse => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = Head::new(dim, out, cfg, x, &mut rng);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut best = (f64::NEG_INFINITY, head.store.clone(), 0);
    let mut order: Vec<usize> = (0..x.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let g = Graph::new();
            let rows: Vec<&[f64]> = idx.iter().map(|&i| x[i].as_slice()).collect();
            let input = head.input(&g, &rows)?;
            let out = head.forward(&g, input, Some(&mut rng))?;
            let loss = match (objective, y) {
                (Objective::Focal { weights, gamma, .. }, Targets::Classes(c)) => {
                    let labels: Vec<usize> = idx.iter().map(|&i| c[i]).collect();
                    focal_loss(out, &labels, weights, *gamma)?
                }
                (Objective::Mse, Targets::Values(v)) => {
                    let t: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
                    let t = g.constant(Tensor::new(vec![idx.len(), 1], t)?);
                    out.sub(&t)?.square().mean()
                }
                _ => panic!("objective and targets disagree"),
            };
            let grads = g.backward(loss)?;
            head.store.zero_grads();
            grads.accumulate_into(&mut head.store);
            opt.step(&mut head.store, |_| cfg.lr);
        }
        let s = score(&head, val_x);
        if s > best.0 {
            best = (s, head.store.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    head.store = best.1;
    head.best_epoch = best.2;
    Ok(head)
}
