//! Latent predictor: fills target positions with a shared mask token and
//! predicts their target-encoder embeddings from the visible context.

use crate::nn::Block;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, TensorError, TensorResult, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub num_tokens: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            depth: 2,
            heads: 4,
            dim: 64,
            num_tokens: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
}

impl Predictor {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: PredictorConfig, rng: &mut R) -> Self {
        assert!(cfg.dim.is_multiple_of(cfg.heads));
        let mask_token = store.add("pred.mask_token", Tensor::randn(vec![cfg.dim], 0.02, rng), ParamGroup::Head, false);
        let pos = store.add("pred.pos", Tensor::randn(vec![cfg.num_tokens, cfg.dim], 0.02, rng), ParamGroup::Head, false);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("pred.block{i}"), cfg.dim, cfg.heads, 4, true, rng))
            .collect();
        Predictor {
            cfg,
            mask_token,
            pos,
            blocks,
        }
    }

    /// `context` is `[1, |ctx|, D]` with rows for `context_idx`; returns
    /// `[1, |targets|, D]` with one row per entry of `target_idx`, in that
    /// order.
    pub fn predict<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        context: Var<'g, S>,
        context_idx: &[usize],
        target_idx: &[usize],
    ) -> TensorResult<Var<'g, S>> {
        let n = self.cfg.num_tokens;
        if target_idx.is_empty() {
            return Err(TensorError::Contract("predictor needs at least one target".into()));
        }
        let cs = context.shape();
        if cs.len() != 3 || cs[0] != 1 || cs[1] != context_idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "predict",
                lhs: cs,
                rhs: vec![1, context_idx.len(), self.cfg.dim],
            });
        }
        // Source row for each grid position: context rows first, then one
        // mask-token row.
        let mut source = vec![usize::MAX; n];
        for (r, &i) in context_idx.iter().enumerate() {
            source[i] = r;
        }
        for &t in target_idx {
            if t >= n || source[t] != usize::MAX {
                return Err(TensorError::IndexOutOfRange {
                    op: "predict",
                    index: t,
                    size: n,
                });
            }
            source[t] = context_idx.len();
        }
        if source.contains(&usize::MAX) {
            return Err(TensorError::Contract("context and targets do not cover the grid".into()));
        }
        let m = g.param(store, self.mask_token).reshape(vec![1, 1, self.cfg.dim])?;
        let rows = g.concat(&[context, m], 1)?;
        let mut x = rows.index_select(1, &source)?.add(&g.param(store, self.pos))?;
        for b in &self.blocks {
            x = b.forward(g, store, x, None)?;
        }
        x.index_select(1, target_idx)
    }

    /// Batched form over a full `[B, N, D]` context grid: rows flagged
    /// invisible in `visible` (`B·N`) are replaced by the mask token.
    /// `targets` index the flattened `B·N` rows; returns `[T, D]`.
    pub fn predict_batch<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        context: Var<'g, S>,
        visible: &[bool],
        targets: &[usize],
    ) -> TensorResult<Var<'g, S>> {
        let cs = context.shape();
        let (n, d) = (self.cfg.num_tokens, self.cfg.dim);
        if cs.len() != 3 || cs[1] != n || cs[2] != d || visible.len() != cs[0] * n {
            return Err(TensorError::ShapeMismatch {
                op: "predict_batch",
                lhs: cs,
                rhs: vec![visible.len() / n.max(1), n, d],
            });
        }
        if targets.is_empty() {
            return Err(TensorError::Contract("predictor needs at least one target".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= visible.len() || visible[t]) {
            return Err(TensorError::IndexOutOfRange {
                op: "predict_batch",
                index: t,
                size: visible.len(),
            });
        }
        let keep: Vec<S> = visible.iter().map(|&v| if v { S::one() } else { S::zero() }).collect();
        let hide: Vec<S> = visible.iter().map(|&v| if v { S::zero() } else { S::one() }).collect();
        let keep = g.constant(Tensor::new(vec![cs[0], n, 1], keep)?);
        let hide = g.constant(Tensor::new(vec![cs[0], n, 1], hide)?);
        let m = g.param(store, self.mask_token).reshape(vec![1, 1, d])?;
        let mut x = context.mul(&keep)?.add(&hide.mul(&m)?)?.add(&g.param(store, self.pos))?;
        for b in &self.blocks {
            x = b.forward(g, store, x, None)?;
        }
        x.reshape(vec![cs[0] * n, d])?.index_select(0, targets)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.mask_token, self.pos];
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v
    }
}
