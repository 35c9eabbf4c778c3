//! Saliency-guided two-tier masking.
//!
//! A small convolutional net scores every patch; the top `dense_fraction`
//! of patches by score are masked with probability `p_dense`, the rest with
//! `p_background`. A floor keeps at least `min_visible` patches as context.

use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, TensorError, TensorResult, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum MaskStrategy {
    /// Saliency-ranked two-tier Bernoulli masking.
    Saliency,
    /// Every patch masked with the same probability.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub dense_fraction: f64,
    pub p_dense: f64,
    pub p_background: f64,
    pub min_visible: usize,
    pub strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            dense_fraction: 0.4,
            p_dense: 0.7,
            p_background: 0.3,
            min_visible: 10,
            strategy: MaskStrategy::Saliency,
        }
    }
}

impl MaskConfig {
    /// Expected masked fraction before the floor is applied.
    pub fn expected_ratio(&self) -> f64 {
        match self.strategy {
            MaskStrategy::Saliency => self.dense_fraction * self.p_dense + (1.0 - self.dense_fraction) * self.p_background,
            MaskStrategy::Uniform(p) => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Visible patch indices, ascending.
    pub context: Vec<usize>,
    /// Masked patch indices, ascending.
    pub target: Vec<usize>,
    pub dense: Vec<bool>,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.dense.len()
    }

    /// Context rows of `[1, N, D]` tokens, in original order.
    pub fn split_tokens<'g, S: Scalar>(&self, tokens: Var<'g, S>) -> TensorResult<(Var<'g, S>, &[usize])> {
        let n = tokens.shape()[1];
        if n != self.num_patches() {
            return Err(TensorError::IndexOutOfRange {
                op: "split_tokens",
                index: self.num_patches(),
                size: n,
            });
        }
        if self.target.is_empty() {
            return Ok((tokens, &self.target));
        }
        Ok((tokens.index_select(1, &self.context)?, &self.target))
    }
}

/// Indices ranked by descending saliency, ties by ascending index.
pub fn rank_by_saliency(saliency: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..saliency.len()).collect();
    order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
    order
}

/// Dense flags for the top `⌈fraction·N⌉` patches.
pub fn dense_flags(saliency: &[f64], fraction: f64) -> Vec<bool> {
    let k = (fraction * saliency.len() as f64 - 1e-9).ceil() as usize;
    let mut flags = vec![false; saliency.len()];
    for &i in rank_by_saliency(saliency).iter().take(k) {
        flags[i] = true;
    }
    flags
}

/// Finish a plan from raw mask draws: apply the visibility floor by
/// unmasking the lowest-saliency masked patches, and, if nothing is masked,
/// mask the highest-saliency patch so a reconstruction target exists.
pub fn plan_from_draws(saliency: &[f64], mut masked: Vec<bool>, cfg: &MaskConfig) -> MaskPlan {
    let n = saliency.len();
    let order = rank_by_saliency(saliency);
    let mut visible = masked.iter().filter(|&&m| !m).count();
    for &i in order.iter().rev() {
        if visible >= cfg.min_visible {
            break;
        }
        if masked[i] {
            masked[i] = false;
            visible += 1;
        }
    }
    if visible == n {
        masked[order[0]] = true;
    }
    MaskPlan {
        context: (0..n).filter(|&i| !masked[i]).collect(),
        target: (0..n).filter(|&i| masked[i]).collect(),
        dense: dense_flags(saliency, cfg.dense_fraction),
    }
}

pub fn build_mask_plan<R: Rng + ?Sized>(saliency: &[f64], cfg: &MaskConfig, rng: &mut R) -> TensorResult<MaskPlan> {
    let n = saliency.len();
    if n <= cfg.min_visible {
        return Err(TensorError::Contract(format!(
            "{n} patches cannot satisfy a floor of {} visible plus one target",
            cfg.min_visible
        )));
    }
    let dense = dense_flags(saliency, cfg.dense_fraction);
    let masked = dense
        .iter()
        .map(|&d| {
            let p = match cfg.strategy {
                MaskStrategy::Saliency if d => cfg.p_dense,
                MaskStrategy::Saliency => cfg.p_background,
                MaskStrategy::Uniform(p) => p,
            };
            rng.random::<f64>() < p
        })
        .collect();
    Ok(plan_from_draws(saliency, masked, cfg))
}

/// Four-layer convolutional patch scorer: `3→32→64→64→32` channels, 3×3
/// kernels with GELU, stride-2 layers down to the patch grid, then a 1×1
/// projection and a sigmoid.
#[derive(Clone, Debug)]
pub struct SaliencyNet {
    pub convs: Vec<(ParamId, ParamId, usize)>,
    pub head: (ParamId, ParamId),
    pub grid: usize,
}

impl SaliencyNet {
    pub const CHANNELS: [usize; 5] = [3, 32, 64, 64, 32];

    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, image_size: usize, patch_size: usize, rng: &mut R) -> Self {
        assert!(patch_size.is_power_of_two(), "patch size must be a power of two");
        let downs = patch_size.trailing_zeros() as usize;
        assert!(downs <= 4, "at most four stride-2 layers");
        let convs = (0..4)
            .map(|i| {
                let (cin, cout) = (Self::CHANNELS[i], Self::CHANNELS[i + 1]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = store.add(format!("sal.conv{i}.w"), Tensor::randn(vec![cout, cin, 3, 3], std, rng), ParamGroup::Head, true);
                let b = store.add(format!("sal.conv{i}.b"), Tensor::zeros(vec![cout]), ParamGroup::Head, false);
                (w, b, if i < downs { 2 } else { 1 })
            })
            .collect();
        let w = store.add("sal.head.w", Tensor::randn(vec![1, 32, 1, 1], (1.0 / 32.0f64).sqrt(), rng), ParamGroup::Head, true);
        let b = store.add("sal.head.b", Tensor::zeros(vec![1]), ParamGroup::Head, false);
        SaliencyNet {
            convs,
            head: (w, b),
            grid: image_size / patch_size,
        }
    }

    /// Scores `[B, G·G]` in `(0, 1)`, row-major over the patch grid.
    pub fn forward<'g, S: Scalar>(&self, g: &'g Graph<S>, store: &ParamStore<S>, images: &Tensor<S>) -> TensorResult<Var<'g, S>> {
        let mut x = g.constant(images.clone());
        for &(w, b, stride) in &self.convs {
            x = x.conv2d(&g.param(store, w), &g.param(store, b), stride, 1)?.gelu();
        }
        let y = x.conv2d(&g.param(store, self.head.0), &g.param(store, self.head.1), 1, 0)?.sigmoid();
        let s = y.shape();
        if s[2] != self.grid || s[3] != self.grid {
            return Err(TensorError::ShapeMismatch {
                op: "saliency",
                lhs: s,
                rhs: vec![self.grid, self.grid],
            });
        }
        y.reshape(vec![s[0], self.grid * self.grid])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.convs.iter().flat_map(|&(w, b, _)| [w, b]).collect();
        v.extend([self.head.0, self.head.1]);
        v
    }
}

/// Per-target reconstruction weights: saliency at the target patches scaled
/// to mean one. Stays on the tape so the reconstruction loss trains the
/// saliency net.
pub fn recon_weights<'g, S: Scalar>(saliency_row: Var<'g, S>, targets: &[usize]) -> TensorResult<Var<'g, S>> {
    let s = saliency_row.index_select(0, targets)?;
    let m = s.mean();
    s.div(&m)
}
