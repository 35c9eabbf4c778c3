//! Parameterised building blocks shared by the encoders, predictor and heads.

use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, TensorResult, Var};
use rand::Rng;

/// Weight initialisation for a [`Linear`].
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    /// `N(0, 1/fan_in)`.
    FanIn,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Normal(std) => Tensor::randn(vec![fan_in, fan_out], std, rng),
            Init::FanIn => Tensor::randn(vec![fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros(vec![fan_in, fan_out]),
        };
        let w = store.add(format!("{name}.w"), w, ParamGroup::Head, true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]), ParamGroup::Head, false);
        Linear {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'g, S: Scalar>(&self, g: &'g Graph<S>, store: &ParamStore<S>, x: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let y = x.matmul(&g.param(store, self.w))?;
        match self.b {
            Some(b) => y.add(&g.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![dim]), ParamGroup::Head, false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), ParamGroup::Head, false),
            eps: 1e-5,
        }
    }

    pub fn forward<'g, S: Scalar>(&self, g: &'g Graph<S>, store: &ParamStore<S>, x: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        x.layer_norm(&g.param(store, self.gamma), &g.param(store, self.beta), self.eps)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Inverted dropout: kept activations are scaled by `1/(1-p)` so evaluation
/// is the identity. `rng = None` means eval mode.
pub fn dropout<'g, S: Scalar, R: Rng + ?Sized>(x: Var<'g, S>, p: f64, rng: Option<&mut R>) -> TensorResult<Var<'g, S>> {
    match rng {
        Some(rng) if p > 0.0 => {
            let shape = x.shape();
            let keep = S::of(1.0 / (1.0 - p));
            let n = shape.iter().product();
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
                .collect();
            let m = x.graph().constant(Tensor::new(shape, mask)?);
            x.mul(&m)
        }
        _ => Ok(x),
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dims: (usize, usize, usize),
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, Init::FanIn, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, out_init, rng),
            dropout: 0.0,
        }
    }

    pub fn forward<'g, S: Scalar, R: Rng + ?Sized>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        x: Var<'g, S>,
        rng: Option<&mut R>,
    ) -> TensorResult<Var<'g, S>> {
        let h = self.fc1.forward(g, store, x)?.gelu();
        let h = dropout(h, self.dropout, rng)?;
        self.fc2.forward(g, store, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.fc1.ids();
        v.extend(self.fc2.ids());
        v
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let init = Init::Normal(0.02_f64.max((1.0 / dim as f64).sqrt() * 0.5));
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, init, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, init, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, init, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, out_init, rng),
            heads,
        }
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        queries: Var<'g, S>,
        context: Var<'g, S>,
        key_valid: Option<&[bool]>,
    ) -> TensorResult<Var<'g, S>> {
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let a = q.attention(&k, &v, self.heads, key_valid)?;
        self.o.forward(g, store, a)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.ids()).collect()
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    /// `zero_out` zero-initialises both residual output projections so the
    /// block starts as the identity.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        zero_out: bool,
        rng: &mut R,
    ) -> Self {
        let out_init = if zero_out {
            Init::Zero
        } else {
            Init::Normal(0.02_f64.max((1.0 / dim as f64).sqrt() * 0.5))
        };
        Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, out_init, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (dim, dim * mlp_ratio, dim), out_init, rng),
        }
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        x: Var<'g, S>,
        key_valid: Option<&[bool]>,
    ) -> TensorResult<Var<'g, S>> {
        let h = self.ln1.forward(g, store, x)?;
        let x = x.add(&self.attn.forward(g, store, h, h, key_valid)?)?;
        let h = self.ln2.forward(g, store, x)?;
        x.add(&self.mlp.forward(g, store, h, None::<&mut rand_chacha::ChaCha8Rng>)?)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.ln1.ids();
        v.extend(self.attn.ids());
        v.extend(self.ln2.ids());
        v.extend(self.mlp.ids());
        v
    }
}
