//! Cosine schedule, global-norm clipping and AdamW.

use crate::scalar::Scalar;
use crate::tensor::{ParamGroup, ParamId, ParamStore};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·step/total))`; a zero-length
/// schedule stays at `lr_start`.
pub fn cosine_schedule(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total_steps == 0 {
        return lr_start;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (PI * t).cos())
}

/// L2 norm over every accumulated gradient of trainable parameters.
pub fn grad_norm<S: Scalar>(store: &ParamStore<S>) -> f64 {
    store
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm > 0.0 {
        let c = S::of(max_norm / norm);
        for (_, p) in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|x| *x *= c);
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Decoupled weight decay Adam with per-parameter step counts, so modules
/// unfrozen late start their bias correction from zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<ParamId, MomentState>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Update every trainable parameter holding a gradient, at the rate
    /// `lr(group)`.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, lr: impl Fn(ParamGroup) -> f64) {
        for (id, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = &p.grad else { continue };
            let rate = lr(p.group);
            let n = grad.len();
            let st = self.state.entry(id).or_insert_with(|| MomentState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let decay = if p.decay { 1.0 - rate * self.weight_decay } else { 1.0 };
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w = S::of(w.as_f64() * decay - update);
            }
        }
    }
}
