//! Patch-token vision transformer and its EMA target copy.

use crate::nn::{Block, Init, LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, TensorError, TensorResult, Var};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        Ok(())
    }

    /// Blocks unfrozen in phase 2: the same 6-of-32 fraction, rounded up.
    pub fn phase2_trainable_blocks(&self) -> usize {
        (self.depth * 6).div_ceil(32)
    }
}

/// Rearrange `[B, 3, H, W]` pixels into `[B, N, 3·P·P]` patch vectors in
/// row-major grid order. Each vector is channel-major within its patch.
pub fn patchify<S: Scalar>(images: &Tensor<S>, cfg: &VitConfig) -> TensorResult<Tensor<S>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(TensorError::ShapeMismatch {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![0, 3, cfg.image_size, cfg.image_size],
        });
    }
    let (b, hw, p, grid) = (s[0], cfg.image_size, cfg.patch_size, cfg.grid());
    let pd = cfg.patch_dim();
    let src = images.data();
    let mut out = Vec::with_capacity(b * grid * grid * pd);
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..3 {
                    for y in 0..p {
                        let row = ((bi * 3 + c) * hw + gy * p + y) * hw + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, grid * grid, pd], out)
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub cfg: VitConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl VisionEncoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: VitConfig, rng: &mut R) -> Self {
        cfg.validate().expect("invalid VitConfig");
        let d = cfg.embed_dim;
        let patch = Linear::new(store, "vit.patch", cfg.patch_dim(), d, Init::FanIn, rng);
        let pos = store.add("vit.pos", Tensor::randn(vec![cfg.num_tokens(), d], 0.02, rng), ParamGroup::Backbone, false);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("vit.block{i}"), d, cfg.heads, cfg.mlp_ratio, false, rng))
            .collect();
        let norm = LayerNorm::new(store, "vit.norm", d);
        let enc = VisionEncoder {
            cfg,
            patch,
            pos,
            blocks,
            norm,
        };
        for id in enc.param_ids() {
            store.set_group(id, ParamGroup::Backbone);
        }
        enc
    }

    /// Patch embedding plus positional embedding: `[B, N, D]`.
    pub fn embed_patches<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        images: &Tensor<S>,
    ) -> TensorResult<Var<'g, S>> {
        let patches = g.constant(patchify(images, &self.cfg)?);
        self.patch.forward(g, store, patches)?.add(&g.param(store, self.pos))
    }

    /// Run every block and the final norm over the selected tokens. With
    /// `visible` the tokens keep their original positional embeddings and
    /// appear in the given order.
    pub fn encode<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        tokens: Var<'g, S>,
        visible: Option<&[usize]>,
    ) -> TensorResult<Var<'g, S>> {
        let mut x = match visible {
            Some([]) => return Err(TensorError::Contract("empty visible token set".into())),
            Some(idx) => tokens.index_select(1, idx)?,
            None => tokens,
        };
        for block in &self.blocks {
            x = block.forward(g, store, x, None)?;
        }
        self.norm.forward(g, store, x)
    }

    /// Batched masked encoding: every token position is computed but each
    /// image attends only to its own visible tokens (`visible` is `B·N`), so
    /// visible rows match [`encode`](Self::encode) on the subset.
    pub fn encode_masked<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        tokens: Var<'g, S>,
        visible: &[bool],
    ) -> TensorResult<Var<'g, S>> {
        let s = tokens.shape();
        if visible.len() != s[0] * s[1] {
            return Err(TensorError::Contract(format!("{} visibility flags for {} tokens", visible.len(), s[0] * s[1])));
        }
        if visible.chunks(s[1]).any(|row| !row.contains(&true)) {
            return Err(TensorError::Contract("empty visible token set".into()));
        }
        let mut x = tokens;
        for block in &self.blocks {
            x = block.forward(g, store, x, Some(visible))?;
        }
        self.norm.forward(g, store, x)
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        images: &Tensor<S>,
        visible: Option<&[usize]>,
    ) -> TensorResult<Var<'g, S>> {
        let t = self.embed_patches(g, store, images)?;
        self.encode(g, store, t, visible)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.patch.ids();
        v.push(self.pos);
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v.extend(self.norm.ids());
        v
    }

    /// Last `n` blocks plus the final norm.
    pub fn tail_ids(&self, n: usize) -> Vec<ParamId> {
        let start = self.blocks.len().saturating_sub(n);
        let mut v: Vec<ParamId> = self.blocks[start..].iter().flat_map(|b| b.ids()).collect();
        v.extend(self.norm.ids());
        v
    }
}

/// `target ← λ·target + (1-λ)·online` over `ids`.
pub fn ema_update<S: Scalar>(target: &mut ParamStore<S>, online: &ParamStore<S>, ids: &[ParamId], lambda: f64) -> TensorResult<()> {
    let one_minus = S::of(1.0 - lambda);
    for &id in ids {
        let src = online.value(id);
        let dst = &mut target.get_mut(id).value;
        if src.shape() != dst.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ema_update",
                lhs: dst.shape().to_vec(),
                rhs: src.shape().to_vec(),
            });
        }
        for (t, &o) in dst.data_mut().iter_mut().zip(src.data()) {
            *t += one_minus * (o - *t);
        }
    }
    Ok(())
}
