//! Severity-conditioned cross-modal fusion.
//!
//! Text features are projected to the vision width and normalised, vision
//! tokens cross-attend to them, and the attention residual is scaled by a
//! per-class sigmoid gate before a feed-forward refinement and mean pooling.

use crate::nn::{Attention, Init, LayerNorm, Linear, Mlp};
use crate::scalar::Scalar;
use crate::taxonomy::NUM_CLASSES;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, TensorError, TensorResult, Var};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Gated cross-attention (full model).
    Gated,
    /// Cross-attention with the gate fixed at one.
    FixedGate,
    /// No text: `p = mean(V + FFN(LN(V)))`.
    VisionOnly,
    /// `p = MLP([mean V, mean T̂])`.
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub vision_dim: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub kind: FusionKind,
}

/// How the gate value α is chosen per sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Alpha {
    /// `σ(g_c)` for each sample's class.
    Classes(Vec<usize>),
    /// `σ(mean g)` for every sample.
    Mean,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub proj: Option<Linear>,
    pub ln_text: Option<LayerNorm>,
    pub ln_query: Option<LayerNorm>,
    pub attn: Option<Attention>,
    pub gates: Option<ParamId>,
    pub ln_ffn: Option<LayerNorm>,
    pub ffn: Option<Mlp>,
    pub concat_mlp: Option<Mlp>,
}

/// Text input to the fusion: features `[B, L, D_T]` and the `B·L` validity
/// mask.
#[derive(Clone, Copy)]
pub struct TextInput<'g, 'a, S: Scalar> {
    pub features: Var<'g, S>,
    pub valid: &'a [bool],
}

impl Fusion {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: FusionConfig, rng: &mut R) -> Self {
        let (dv, dt) = (cfg.vision_dim, cfg.text_dim);
        let uses_text = cfg.kind != FusionKind::VisionOnly;
        let attends = matches!(cfg.kind, FusionKind::Gated | FusionKind::FixedGate);
        let proj = uses_text.then(|| Linear::new(store, "fusion.proj", dt, dv, Init::FanIn, rng));
        let ln_text = uses_text.then(|| LayerNorm::new(store, "fusion.ln_text", dv));
        let ln_query = attends.then(|| LayerNorm::new(store, "fusion.ln_query", dv));
        let attn = attends.then(|| Attention::new(store, "fusion.attn", dv, cfg.heads, Init::FanIn, rng));
        let gates = (cfg.kind == FusionKind::Gated)
            .then(|| store.add("fusion.gates", Tensor::zeros(vec![NUM_CLASSES]), ParamGroup::Head, false));
        let refines = cfg.kind != FusionKind::Concat;
        let ln_ffn = refines.then(|| LayerNorm::new(store, "fusion.ln_ffn", dv));
        let ffn = refines.then(|| Mlp::new(store, "fusion.ffn", (dv, 2 * dv, dv), Init::FanIn, rng));
        let concat_mlp = (cfg.kind == FusionKind::Concat).then(|| Mlp::new(store, "fusion.concat", (2 * dv, 2 * dv, dv), Init::FanIn, rng));
        Fusion {
            cfg,
            proj,
            ln_text,
            ln_query,
            attn,
            gates,
            ln_ffn,
            ffn,
            concat_mlp,
        }
    }

    pub fn uses_text(&self) -> bool {
        self.proj.is_some()
    }

    /// `T̂ = LN(W_proj T + b)`.
    pub fn project_text<'g, S: Scalar>(&self, g: &'g Graph<S>, store: &ParamStore<S>, t: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let (proj, ln) = match (&self.proj, &self.ln_text) {
            (Some(p), Some(l)) => (p, l),
            _ => return Err(TensorError::Contract("fusion has no text path".into())),
        };
        let shape = t.shape();
        if shape.last() != Some(&self.cfg.text_dim) {
            return Err(TensorError::ShapeMismatch {
                op: "project_text",
                lhs: shape,
                rhs: vec![self.cfg.text_dim],
            });
        }
        let h = proj.forward(g, store, t)?;
        ln.forward(g, store, h)
    }

    /// `A = MHA(LN(V), T̂, T̂)` with invalid text keys masked.
    pub fn cross_attend<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        v: Var<'g, S>,
        t_hat: Var<'g, S>,
        valid: &[bool],
    ) -> TensorResult<Var<'g, S>> {
        let (ln, attn) = match (&self.ln_query, &self.attn) {
            (Some(l), Some(a)) => (l, a),
            _ => return Err(TensorError::Contract("fusion has no cross-attention".into())),
        };
        let q = ln.forward(g, store, v)?;
        attn.forward(g, store, q, t_hat, Some(valid))
    }

    /// Per-sample gate `[B, 1, 1]` (or `[1, 1, 1]` when shared).
    pub fn alpha<'g, S: Scalar>(&self, g: &'g Graph<S>, store: &ParamStore<S>, alpha: &Alpha) -> TensorResult<Var<'g, S>> {
        let fixed = |a: f64| g.constant(Tensor::full(vec![1, 1, 1], S::of(a)));
        match (self.cfg.kind, alpha) {
            (FusionKind::Gated, Alpha::Classes(ids)) => {
                if let Some(&bad) = ids.iter().find(|&&c| c >= NUM_CLASSES) {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gate",
                        index: bad,
                        size: NUM_CLASSES,
                    });
                }
                let gates = g.param(store, self.gates.expect("gated fusion has gates"));
                gates.index_select(0, ids)?.sigmoid().reshape(vec![ids.len(), 1, 1])
            }
            (FusionKind::Gated, Alpha::Mean) => {
                let gates = g.param(store, self.gates.expect("gated fusion has gates"));
                gates.mean().sigmoid().reshape(vec![1, 1, 1])
            }
            (_, Alpha::Fixed(a)) => Ok(fixed(*a)),
            (FusionKind::FixedGate, _) => Ok(fixed(1.0)),
            (FusionKind::VisionOnly, _) => Ok(fixed(0.0)),
            (FusionKind::Concat, _) => Err(TensorError::Contract("concat fusion has no gate".into())),
        }
    }

    /// `F' = F + FFN(LN(F))`.
    pub fn ffn_refine<'g, S: Scalar>(&self, g: &'g Graph<S>, store: &ParamStore<S>, f: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let (ln, ffn) = match (&self.ln_ffn, &self.ffn) {
            (Some(l), Some(m)) => (l, m),
            _ => return Err(TensorError::Contract("fusion has no FFN".into())),
        };
        let h = ln.forward(g, store, f)?;
        f.add(&ffn.forward(g, store, h, None::<&mut rand_chacha::ChaCha8Rng>)?)
    }

    /// Mean over the token axis.
    pub fn pool<'g, S: Scalar>(f: Var<'g, S>) -> TensorResult<Var<'g, S>> {
        f.mean_axis(1)
    }

    /// Pooled embedding `p`, `[B, D_V]`.
    pub fn forward<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        store: &ParamStore<S>,
        v: Var<'g, S>,
        text: Option<TextInput<'g, '_, S>>,
        alpha: &Alpha,
    ) -> TensorResult<Var<'g, S>> {
        let batch = v.shape()[0];
        match self.cfg.kind {
            FusionKind::VisionOnly => Self::pool(self.ffn_refine(g, store, v)?),
            FusionKind::Concat => {
                let text = text.ok_or_else(|| TensorError::Contract("concat fusion needs text".into()))?;
                let t_hat = self.project_text(g, store, text.features)?;
                let l = t_hat.shape()[1];
                let mut w = vec![S::zero(); batch * l];
                for b in 0..batch {
                    let row = &text.valid[b * l..(b + 1) * l];
                    let n = row.iter().filter(|&&x| x).count().max(1);
                    for (j, &ok) in row.iter().enumerate() {
                        if ok {
                            w[b * l + j] = S::one() / S::of_usize(n);
                        }
                    }
                }
                let w = g.constant(Tensor::new(vec![batch, l, 1], w)?);
                let t_mean = t_hat.mul(&w)?.sum_axis(1)?;
                let v_mean = Self::pool(v)?;
                let joint = g.concat(&[v_mean, t_mean], 1)?;
                let mlp = self.concat_mlp.as_ref().expect("concat fusion has an MLP");
                mlp.forward(g, store, joint, None::<&mut rand_chacha::ChaCha8Rng>)
            }
            FusionKind::Gated | FusionKind::FixedGate => {
                let text = text.ok_or_else(|| TensorError::Contract("cross-attention fusion needs text".into()))?;
                let t_hat = self.project_text(g, store, text.features)?;
                let a = self.cross_attend(g, store, v, t_hat, text.valid)?;
                let alpha = self.alpha(g, store, alpha)?;
                let f = v.add(&a.mul(&alpha)?)?;
                Self::pool(self.ffn_refine(g, store, f)?)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for l in [&self.proj].into_iter().flatten() {
            v.extend(l.ids());
        }
        for l in [&self.ln_text, &self.ln_query, &self.ln_ffn].into_iter().flatten() {
            v.extend(l.ids());
        }
        if let Some(a) = &self.attn {
            v.extend(a.ids());
        }
        v.extend(self.gates);
        for m in [&self.ffn, &self.concat_mlp].into_iter().flatten() {
            v.extend(m.ids());
        }
        v
    }

    /// `(class, g_c, σ(g_c))` rows as CSV.
    pub fn gates_csv<S: Scalar>(&self, store: &ParamStore<S>) -> Option<String> {
        let g = store.value(self.gates?);
        let mut out = String::from("class,gate,alpha\n");
        for (c, v) in g.data().iter().enumerate() {
            let x = v.as_f64();
            out.push_str(&format!("{},{x},{}\n", crate::taxonomy::class_name(c), 1.0 / (1.0 + (-x).exp())));
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{param_gradient_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: FusionKind, dt: usize) -> (ParamStore<f64>, Fusion, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            vision_dim: 8,
            text_dim: dt,
            heads: 2,
            kind,
        };
        let f = Fusion::new(&mut store, cfg, &mut rng);
        (store, f, rng)
    }

    #[test]
    fn project_text_examples() {
        let (mut store, f, mut rng) = setup(FusionKind::Gated, 6);
        let g = Graph::new();
        let t = f.project_text(&g, &store, g.constant(Tensor::zeros(vec![2, 4, 6]))).unwrap();
        assert_eq!(t.shape(), vec![2, 4, 8]);
        let beta = store.value(f.ln_text.as_ref().unwrap().beta).clone();
        assert!(t.value().data().chunks(8).all(|r| r == beta.data()));
        assert!(f.project_text(&g, &store, g.constant(Tensor::zeros(vec![2, 4, 5]))).is_err());

        let (mut sq, fs, _) = setup(FusionKind::Gated, 8);
        let proj = fs.proj.as_ref().unwrap();
        let mut eye = Tensor::zeros(vec![8, 8]);
        (0..8).for_each(|i| eye.data_mut()[i * 9] = 1.0);
        sq.set_value(proj.w, eye).unwrap();
        let x = Tensor::randn(vec![1, 3, 8], 1.0, &mut rng);
        let g = Graph::new();
        let a = fs.project_text(&g, &sq, g.constant(x.clone())).unwrap().value();
        let ln = fs.ln_text.as_ref().unwrap();
        let b = g
            .constant(x)
            .layer_norm(&g.param(&sq, ln.gamma), &g.param(&sq, ln.beta), ln.eps)
            .unwrap()
            .value();
        assert_eq!(a, b);
        store.zero_grads();
    }

    #[test]
    fn identical_text_rows_give_value_projection() {
        let (store, f, mut rng) = setup(FusionKind::Gated, 6);
        let g = Graph::new();
        let row = Tensor::randn(vec![8], 1.0, &mut rng);
        let t_hat: Vec<f64> = (0..4).flat_map(|_| row.data().to_vec()).collect();
        let t_hat = g.constant(Tensor::new(vec![1, 4, 8], t_hat).unwrap());
        let v = g.constant(Tensor::randn(vec![1, 5, 8], 1.0, &mut rng));
        let a = f.cross_attend(&g, &store, v, t_hat, &[true, true, false, true]).unwrap().value();
        let attn = f.attn.as_ref().unwrap();
        let t1 = g.constant(row.reshape(vec![1, 8]).unwrap());
        let expect = attn.o.forward(&g, &store, attn.v.forward(&g, &store, t1).unwrap()).unwrap().value();
        for r in 0..5 {
            for d in 0..8 {
                assert!((a.data()[r * 8 + d] - expect.data()[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pad_keys_never_change_attention() {
        let (store, f, mut rng) = setup(FusionKind::Gated, 6);
        let v = Tensor::randn(vec![1, 5, 8], 1.0, &mut rng);
        let mut t = Tensor::randn(vec![1, 4, 8], 1.0, &mut rng);
        let valid = [true, true, false, false];
        let run = |t: &Tensor<f64>| {
            let g = Graph::new();
            f.cross_attend(&g, &store, g.constant(v.clone()), g.constant(t.clone()), &valid).unwrap().value()
        };
        let base = run(&t);
        t.data_mut()[2 * 8..].iter_mut().for_each(|x| *x += 3.0);
        assert_eq!(base, run(&t));
        // A single valid token takes all the weight.
        let one = [true, false, false, false];
        let g = Graph::new();
        let a = f.cross_attend(&g, &store, g.constant(v.clone()), g.constant(t.clone()), &one).unwrap().value();
        let attn = f.attn.as_ref().unwrap();
        let t0 = g.constant(Tensor::new(vec![1, 8], t.data()[..8].to_vec()).unwrap());
        let expect = attn.o.forward(&g, &store, attn.v.forward(&g, &store, t0).unwrap()).unwrap().value();
        assert!(a.data().chunks(8).all(|r| r.iter().zip(expect.data()).all(|(x, y)| (x - y).abs() < 1e-12)));
    }

    #[test]
    fn gate_values() {
        let (mut store, f, _) = setup(FusionKind::Gated, 6);
        let g = Graph::new();
        let a = f.alpha(&g, &store, &Alpha::Classes(vec![0, 1])).unwrap().value();
        assert_eq!(a.data(), &[0.5, 0.5]);
        let a = f.alpha(&g, &store, &Alpha::Mean).unwrap().value();
        assert_eq!(a.data(), &[0.5]);
        let mut gates = Tensor::zeros(vec![14]);
        gates.data_mut()[1] = 2.0;
        store.set_value(f.gates.unwrap(), gates).unwrap();
        let g = Graph::new();
        let a = f.alpha(&g, &store, &Alpha::Classes(vec![0, 1])).unwrap().value();
        assert_eq!(a.data()[0], 0.5);
        assert!((a.data()[1] - 0.8808).abs() < 1e-4);
        assert!((a.data()[1] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!(f.alpha(&g, &store, &Alpha::Classes(vec![14])).is_err());
    }

    #[test]
    fn equal_gates_make_modes_agree() {
        let (mut store, f, _) = setup(FusionKind::Gated, 6);
        store.set_value(f.gates.unwrap(), Tensor::full(vec![14], 0.7)).unwrap();
        let g = Graph::new();
        let by_class = f.alpha(&g, &store, &Alpha::Classes(vec![3, 9])).unwrap().value();
        let mean = f.alpha(&g, &store, &Alpha::Mean).unwrap().value();
        assert!(by_class.data().iter().all(|&x| x == mean.data()[0]));
    }

    #[test]
    fn strongly_negative_gate_suppresses_text() {
        let (mut store, f, mut rng) = setup(FusionKind::Gated, 6);
        store.set_value(f.gates.unwrap(), Tensor::full(vec![14], -60.0)).unwrap();
        let v = Tensor::randn(vec![2, 5, 8], 1.0, &mut rng);
        let t = Tensor::randn(vec![2, 4, 6], 1.0, &mut rng);
        let valid = [true; 8];
        let g = Graph::new();
        let text = TextInput {
            features: g.constant(t),
            valid: &valid,
        };
        let p = f.forward(&g, &store, g.constant(v.clone()), Some(text), &Alpha::Classes(vec![0, 1])).unwrap().value();
        let q = Fusion::pool(f.ffn_refine(&g, &store, g.constant(v)).unwrap()).unwrap().value();
        assert!(p.max_abs_diff(&q) < 1e-20);
    }

    #[test]
    fn zero_ffn_output_is_identity() {
        let (mut store, f, mut rng) = setup(FusionKind::Gated, 6);
        let fc2 = &f.ffn.as_ref().unwrap().fc2;
        store.set_value(fc2.w, Tensor::zeros(vec![16, 8])).unwrap();
        let x = Tensor::randn(vec![2, 3, 8], 1.0, &mut rng);
        let g = Graph::new();
        let y = f.ffn_refine(&g, &store, g.constant(x.clone())).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 8]);
        assert_eq!(y.value(), x);
    }

    #[test]
    fn pooling_examples() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_f64(vec![1, 3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap());
        assert_eq!(Fusion::pool(c).unwrap().value().data(), &[1.0, 2.0]);
        let ab = g.constant(Tensor::from_f64(vec![1, 2, 2], &[1.0, 4.0, 3.0, 0.0]).unwrap());
        assert_eq!(Fusion::pool(ab).unwrap().value().data(), &[2.0, 2.0]);
        let ba = g.constant(Tensor::from_f64(vec![1, 2, 2], &[3.0, 0.0, 1.0, 4.0]).unwrap());
        assert_eq!(Fusion::pool(ba).unwrap().value().data(), &[2.0, 2.0]);
    }

    #[test]
    fn ffn_composite_gradient() {
        let (mut store, f, mut rng) = setup(FusionKind::Gated, 6);
        let x = Tensor::randn(vec![2, 3, 8], 1.0, &mut rng);
        let w = Tensor::randn(vec![2, 3, 8], 1.0, &mut rng);
        let mut ids = f.ffn.as_ref().unwrap().ids();
        ids.extend(f.ln_ffn.as_ref().unwrap().ids());
        let r = param_gradient_check(
            &mut store,
            &ids,
            |g, st| {
                let y = f.ffn_refine(g, st, g.constant(x.clone()))?;
                Ok(y.mul(&g.constant(w.clone()))?.sum())
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn gates_only_learn_from_their_class() {
        let (store, f, mut rng) = setup(FusionKind::Gated, 6);
        let v = Tensor::randn(vec![2, 5, 8], 1.0, &mut rng);
        let t = Tensor::randn(vec![2, 4, 6], 1.0, &mut rng);
        let valid = [true; 8];
        let g = Graph::new();
        let text = TextInput {
            features: g.constant(t),
            valid: &valid,
        };
        let p = f.forward(&g, &store, g.constant(v), Some(text), &Alpha::Classes(vec![3, 7])).unwrap();
        let grads = g.backward(p.square().sum()).unwrap();
        let gg = grads.param(&store, f.gates.unwrap()).unwrap();
        for (c, &x) in gg.iter().enumerate() {
            assert_eq!(x == 0.0, c != 3 && c != 7, "class {c}");
        }
    }

    #[test]
    fn variant_layouts() {
        let (s1, full, _) = setup(FusionKind::Gated, 6);
        let (s4, vis, _) = setup(FusionKind::VisionOnly, 6);
        let (_, fixed, _) = setup(FusionKind::FixedGate, 6);
        let (s6, concat, mut rng) = setup(FusionKind::Concat, 6);
        assert!(s4.num_scalars() < s1.num_scalars());
        assert!(vis.gates.is_none() && fixed.gates.is_none() && !vis.uses_text());
        let g = Graph::new();
        let valid = [true, true, false, false];
        let text = TextInput {
            features: g.constant(Tensor::randn(vec![1, 4, 6], 1.0, &mut rng)),
            valid: &valid,
        };
        let p = concat
            .forward(&g, &s6, g.constant(Tensor::randn(vec![1, 5, 8], 1.0, &mut rng)), Some(text), &Alpha::Mean)
            .unwrap();
        assert_eq!(p.shape(), vec![1, 8]);
        assert!(full.gates_csv(&s1).unwrap().lines().count() == 15);
    }
}
