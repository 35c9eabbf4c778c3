//! The four-term training objective: latent reconstruction, severity
//! contrast, type orthogonality and focal classification.

use crate::scalar::Scalar;
use crate::taxonomy::{DamageLabel, NUM_CLASSES};
use crate::tensor::{Graph, Tensor, TensorError, TensorResult, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// (recon, severity, orthogonality, focal)
    pub lambdas: [f64; 4],
    pub tau: f64,
    pub beta_orth: f64,
    pub gamma_focal: f64,
    pub class_weights: Vec<f64>,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambdas: [1.0, 0.5, 0.3, 1.0],
            tau: 0.07,
            beta_orth: 0.5,
            gamma_focal: 2.0,
            class_weights: vec![1.0; NUM_CLASSES],
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lambdas.iter().any(|&l| l < 0.0) {
            return Err("loss weights must be non-negative".into());
        }
        if self.tau <= 0.0 {
            return Err("temperature must be positive".into());
        }
        if self.class_weights.len() != NUM_CLASSES || self.class_weights.iter().any(|&w| w <= 0.0) {
            return Err("class weights must be 14 positive values".into());
        }
        Ok(())
    }
}

/// Smooth-L1 between L2-normalised predictions and targets `[T, D]`, mean
/// over dims, weighted per row by `weights` (if any), mean over rows.
pub fn recon_loss<'g, S: Scalar>(
    z_hat: Var<'g, S>,
    z_target: Var<'g, S>,
    weights: Option<Var<'g, S>>,
    beta: f64,
) -> TensorResult<Var<'g, S>> {
    let (a, b) = (z_hat.shape(), z_target.shape());
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op: "recon_loss",
            lhs: a,
            rhs: b,
        });
    }
    if a.len() < 2 || a[0] == 0 {
        return Err(TensorError::Contract("recon_loss needs at least one target row".into()));
    }
    let diff = z_hat.l2_normalize(1e-12).sub(&z_target.l2_normalize(1e-12))?;
    let per_row = diff.smooth_l1(beta).mean_axis(a.len() - 1)?;
    match weights {
        Some(w) => Ok(per_row.mul(&w.reshape(per_row.shape())?)?.mean()),
        None => Ok(per_row.mean()),
    }
}

/// Positive and negative partner sets of one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Positives share the damage type with a different severity; negatives
/// have a different type. Same type and severity is neither.
pub fn infonce_pairs(labels: &[DamageLabel]) -> Vec<PairSets> {
    labels
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut ps = PairSets {
                positives: vec![],
                negatives: vec![],
            };
            for (j, b) in labels.iter().enumerate() {
                if i == j {
                    continue;
                }
                if a.damage_type != b.damage_type {
                    ps.negatives.push(j);
                } else if a.severity != b.severity {
                    ps.positives.push(j);
                }
            }
            ps
        })
        .collect()
}

/// Severity-aware InfoNCE on pooled embeddings `[B, D]`, averaged over
/// anchors that have at least one positive.
pub fn severity_infonce<'g, S: Scalar>(p: Var<'g, S>, labels: &[DamageLabel], tau: f64) -> TensorResult<Var<'g, S>> {
    let g = p.graph();
    let b = labels.len();
    if p.shape()[0] != b {
        return Err(TensorError::Contract(format!("{} embeddings for {b} labels", p.shape()[0])));
    }
    let sets = infonce_pairs(labels);
    let anchors: Vec<usize> = (0..b).filter(|&i| !sets[i].positives.is_empty()).collect();
    if anchors.is_empty() {
        log::warn!("severity contrast: batch has no anchor with a positive partner");
        return Ok(g.constant(Tensor::scalar(S::zero())));
    }
    let mut pos = vec![S::zero(); b * b];
    let mut all = vec![S::zero(); b * b];
    let mut fill = vec![S::one(); b];
    for &i in &anchors {
        fill[i] = S::zero();
        for &j in &sets[i].positives {
            pos[i * b + j] = S::one();
            all[i * b + j] = S::one();
        }
        for &j in &sets[i].negatives {
            all[i * b + j] = S::one();
        }
    }
    let z = p.l2_normalize(1e-12);
    // Cosines are bounded by one, so shifting by 1/τ keeps every exponent ≤ 0.
    let e = z.matmul_t(&z)?.scale(1.0 / tau).offset(-1.0 / tau).exp();
    let fill = g.constant(Tensor::new(vec![b], fill)?);
    let num = e.mul(&g.constant(Tensor::new(vec![b, b], pos)?))?.sum_axis(1)?.add(&fill)?;
    let den = e.mul(&g.constant(Tensor::new(vec![b, b], all)?))?.sum_axis(1)?.add(&fill)?;
    let per_anchor = den.ln().sub(&num.ln())?;
    Ok(per_anchor.sum().scale(1.0 / anchors.len() as f64))
}

/// `mean_{i<j} cos²(c_i, c_j) + β·mean_b (1 - cos(p_b, c_{type(b)}))` over
/// batch-local type centroids of the normalised embeddings.
pub fn type_orthogonality<'g, S: Scalar>(p: Var<'g, S>, labels: &[DamageLabel], beta: f64) -> TensorResult<Var<'g, S>> {
    let g = p.graph();
    let b = labels.len();
    if b == 0 || p.shape()[0] != b {
        return Err(TensorError::Contract("type_orthogonality needs one label per embedding".into()));
    }
    let mut types: Vec<_> = labels.iter().map(|l| l.damage_type).collect();
    types.sort();
    types.dedup();
    let t = types.len();
    let slot: Vec<usize> = labels.iter().map(|l| types.binary_search(&l.damage_type).unwrap()).collect();
    let mut member = vec![S::zero(); t * b];
    for (i, &s) in slot.iter().enumerate() {
        member[s * b + i] = S::one();
    }
    for s in 0..t {
        let n = slot.iter().filter(|&&x| x == s).count();
        member[s * b..(s + 1) * b].iter_mut().for_each(|v| *v /= S::of_usize(n));
    }
    let z = p.l2_normalize(1e-12);
    let c = g.constant(Tensor::new(vec![t, b], member)?).matmul(&z)?;
    let cn = c.l2_normalize(1e-12);
    let inter = if t > 1 {
        let mut upper = vec![S::zero(); t * t];
        for i in 0..t {
            for j in i + 1..t {
                upper[i * t + j] = S::one();
            }
        }
        let pairs = t * (t - 1) / 2;
        cn.matmul_t(&cn)?
            .square()
            .mul(&g.constant(Tensor::new(vec![t, t], upper)?))?
            .sum()
            .scale(1.0 / pairs as f64)
    } else {
        g.constant(Tensor::scalar(S::zero()))
    };
    let own = cn.index_select(0, &slot)?;
    let cos = z.mul(&own)?.sum_axis(1)?;
    let intra = cos.mean().neg().offset(1.0);
    inter.add(&intra.scale(beta))
}

/// `mean_b w_y (1 - p_t)^γ (-log p_t)` over logits `[B, C]`.
pub fn focal_loss<'g, S: Scalar>(logits: Var<'g, S>, labels: &[usize], class_weights: &[f64], gamma: f64) -> TensorResult<Var<'g, S>> {
    let g = logits.graph();
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(TensorError::Contract(format!("logits {s:?} for {} labels", labels.len())));
    }
    let (b, c) = (s[0], s[1]);
    if class_weights.len() != c {
        return Err(TensorError::Contract(format!("{} class weights for {c} classes", class_weights.len())));
    }
    let mut onehot = vec![S::zero(); b * c];
    let mut w = vec![S::zero(); b];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(TensorError::IndexOutOfRange {
                op: "focal_loss",
                index: y,
                size: c,
            });
        }
        onehot[i * c + y] = S::one();
        w[i] = S::of(class_weights[y]);
    }
    let log_pt = logits
        .log_softmax()
        .mul(&g.constant(Tensor::new(vec![b, c], onehot)?))?
        .sum_axis(1)?;
    let focus = log_pt.exp().neg().offset(1.0).powf(gamma);
    let per = focus.mul(&log_pt.neg())?.mul(&g.constant(Tensor::new(vec![b], w)?))?;
    Ok(per.mean())
}

/// Scalar values of the four terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub severity: f64,
    pub orthogonality: f64,
    pub focal: f64,
    pub total: f64,
}

/// `λ₁ L_recon + λ₂ L_sev + λ₃ L_orth + λ₄ L_focal`. Terms with zero weight
/// are left off the tape.
pub fn total_loss<'g, S: Scalar>(
    g: &'g Graph<S>,
    terms: [Option<Var<'g, S>>; 4],
    lambdas: [f64; 4],
) -> TensorResult<(Var<'g, S>, LossBreakdown)> {
    let mut vals = [0.0; 4];
    let mut total = g.constant(Tensor::scalar(S::zero()));
    for (k, term) in terms.iter().enumerate() {
        if let Some(t) = term {
            vals[k] = t.item().as_f64();
            if lambdas[k] != 0.0 {
                total = total.add(&t.scale(lambdas[k]))?;
            }
        }
    }
    let bd = LossBreakdown {
        recon: vals[0],
        severity: vals[1],
        orthogonality: vals[2],
        focal: vals[3],
        total: total.item().as_f64(),
    };
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lab(c: usize) -> DamageLabel {
        DamageLabel::from_class(c).unwrap()
    }

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), d).unwrap()
    }

    #[test]
    fn recon_examples() {
        let g = Graph::<f64>::new();
        let z = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]));
        assert_eq!(recon_loss(z, z, None, 1.0).unwrap().item(), 0.0);
        let a = g.constant(t(&[1, 1], &[3.0]));
        let b = g.constant(t(&[1, 1], &[-0.2]));
        assert!((recon_loss(a, b, None, 1.0).unwrap().item() - 1.5).abs() < 1e-12);
        assert!(recon_loss(a, z, None, 1.0).is_err());
    }

    #[test]
    fn recon_blocks_target_gradient() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zh = g.variable(Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let zt = g.variable(Tensor::randn(vec![3, 4], 1.0, &mut rng)).detach();
        let grads = g.backward(recon_loss(zh, zt, None, 1.0).unwrap()).unwrap();
        assert!(grads.wrt(zt).is_none());
        assert!(grads.wrt(zh).is_some());
    }

    #[test]
    fn recon_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::randn(vec![5, 6], 1.0, &mut rng);
        let b = Tensor::randn(vec![5, 6], 1.0, &mut rng);
        let g = Graph::new();
        let base = recon_loss(g.constant(a.clone()), g.constant(b.clone()), None, 1.0).unwrap().item();
        for s in [0.01, 3.0, 250.0] {
            let scaled = g.constant(a.clone()).scale(s);
            let v = recon_loss(scaled, g.constant(b.clone()).scale(1.0 / s), None, 1.0).unwrap().item();
            assert!((v - base).abs() < 1e-10);
        }
    }

    #[test]
    fn infonce_closed_forms() {
        let g = Graph::<f64>::new();
        let p = g.constant(t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        assert!(severity_infonce(p, &[lab(0), lab(2)], 0.07).unwrap().item().abs() < 1e-9);

        let p = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let v = severity_infonce(p, &[lab(0), lab(2), lab(3)], 0.07).unwrap().item();
        assert!((v - 2f64.ln()).abs() < 1e-9);

        let p = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        assert_eq!(severity_infonce(p, &[lab(1), lab(1), lab(1)], 0.07).unwrap().item(), 0.0);
    }

    fn brute_force(labels: &[DamageLabel]) -> Vec<PairSets> {
        let mut out = vec![];
        for i in 0..labels.len() {
            let mut positives = vec![];
            let mut negatives = vec![];
            for j in 0..labels.len() {
                let same_type = labels[i].damage_type == labels[j].damage_type;
                let same_sev = labels[i].severity == labels[j].severity;
                if i != j && same_type && !same_sev {
                    positives.push(j);
                }
                if i != j && !same_type {
                    negatives.push(j);
                }
            }
            out.push(PairSets { positives, negatives });
        }
        out
    }

    #[test]
    fn pair_sets_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.random_range(1..=12);
            let labels: Vec<_> = (0..n).map(|_| lab(rng.random_range(0..14))).collect();
            assert_eq!(infonce_pairs(&labels), brute_force(&labels));
        }
    }

    #[test]
    fn severity_less_types_are_never_positive() {
        let labels: Vec<_> = (0..14).map(lab).collect();
        for (i, s) in infonce_pairs(&labels).iter().enumerate() {
            for &j in &s.positives {
                assert!(labels[j].damage_type.has_severity() && labels[i].damage_type.has_severity());
            }
        }
    }

    #[test]
    fn orthogonality_examples() {
        let g = Graph::<f64>::new();
        // Chafing rows along e0, CutStrands rows along e1.
        let p = g.constant(t(&[4, 2], &[2.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.5]));
        let labels = [lab(0), lab(1), lab(3), lab(5)];
        assert!(type_orthogonality(p, &labels, 0.5).unwrap().item().abs() < 1e-12);
        let p = g.constant(t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let v = type_orthogonality(p, &[lab(0), lab(3)], 0.5).unwrap().item();
        assert!((v - 1.0).abs() < 1e-12);
        // Three unit centroids pairwise at 60 degrees.
        let h = 3f64.sqrt() / 2.0;
        let s = (2.0f64 / 3.0).sqrt();
        let c = [[1.0, 0.0, 0.0], [0.5, h, 0.0], [0.5, h / 3.0, s]];
        let p = g.constant(t(&[3, 3], &c.concat()));
        let v = type_orthogonality(p, &[lab(0), lab(3), lab(6)], 0.5).unwrap().item();
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_zero_only_at_orthonormal_constant_types() {
        let g = Graph::<f64>::new();
        // Constant within type but not orthogonal across types.
        let p = g.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]));
        assert!(type_orthogonality(p, &[lab(0), lab(3)], 0.5).unwrap().item() > 0.1);
        // Orthogonal centroids but spread within a type.
        let p = g.constant(t(&[3, 3], &[1.0, 0.2, 0.0, 1.0, -0.2, 0.0, 0.0, 0.0, 1.0]));
        assert!(type_orthogonality(p, &[lab(0), lab(1), lab(3)], 0.5).unwrap().item() > 1e-4);
    }

    #[test]
    fn focal_examples() {
        let g = Graph::<f64>::new();
        let w = vec![1.0; 2];
        let sure = g.constant(t(&[1, 2], &[800.0, 0.0]));
        assert_eq!(focal_loss(sure, &[0], &w, 2.0).unwrap().item(), 0.0);
        let half = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let v = focal_loss(half, &[1], &w, 2.0).unwrap().item();
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.17329).abs() < 1e-5);
        assert!(focal_loss(half, &[2], &w, 2.0).is_err());
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::randn(vec![6, 14], 2.0, &mut rng);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..14)).collect();
        let g = Graph::<f64>::new();
        let v = focal_loss(g.constant(logits.clone()), &labels, &[1.0; 14], 0.0).unwrap().item();
        let ce: f64 = (0..6)
            .map(|i| {
                let row = logits.row(i);
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                lse - row[labels[i]]
            })
            .sum::<f64>()
            / 6.0;
        assert!((v - ce).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient() {
        let opts = GradCheckOptions::default();
        let r = finite_difference_check(
            |_, x| focal_loss(x[0], &[2], &[1.0, 2.0, 0.5], 2.0),
            &[t(&[1, 3], &[0.3, -1.2, 0.8])],
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn term_gradients() {
        let labels = [lab(0), lab(2), lab(1), lab(3), lab(9), lab(13)];
        for seed in [1, 2, 3] {
            let x = Tensor::<f64>::randn(vec![6, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let opts = GradCheckOptions::default();
            let r = finite_difference_check(|_, v| severity_infonce(v[0], &labels, 0.07), std::slice::from_ref(&x), &opts).unwrap();
            // 1/τ sharpens the curvature; small coordinates carry more truncation error.
            assert!(r.max_rel_error < 1e-4 && r.max_abs_error < 1e-8, "{r:?}");
            let r = finite_difference_check(|_, v| type_orthogonality(v[0], &labels, 0.5), std::slice::from_ref(&x), &opts).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
            let y = Tensor::<f64>::randn(vec![6, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 10));
            let w = Tensor::from_f64(vec![6], &[0.5, 1.0, 1.5, 0.7, 1.2, 1.1]).unwrap();
            let r = finite_difference_check(|g, v| recon_loss(v[0], g.constant(y.clone()), Some(v[1]), 1.0), &[x, w], &opts).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn total_examples() {
        let g = Graph::<f64>::new();
        let lam = LossConfig::default().lambdas;
        let zero = || Some(g.constant(Tensor::scalar(0.0)));
        let one = || Some(g.constant(Tensor::scalar(1.0)));
        assert_eq!(total_loss(&g, [zero(), zero(), zero(), zero()], lam).unwrap().1.total, 0.0);
        let (_, bd) = total_loss(&g, [one(), one(), one(), one()], lam).unwrap();
        assert!((bd.total - 2.8).abs() < 1e-12);
        let (_, bd) = total_loss(&g, [one(), one(), one(), one()], [1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(bd.total, 2.0);
        assert_eq!(bd.severity, 1.0);
    }

    proptest! {
        #[test]
        fn terms_are_non_negative(seed in 0u64..500, n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<_> = (0..n).map(|_| lab(rng.random_range(0..14))).collect();
            let x = Tensor::<f64>::randn(vec![n, 4], 1.0, &mut rng);
            let g = Graph::new();
            let p = g.constant(x);
            prop_assert!(severity_infonce(p, &labels, 0.07).unwrap().item() >= -1e-12);
            prop_assert!(type_orthogonality(p, &labels, 0.5).unwrap().item() >= -1e-12);
            let logits = g.constant(Tensor::randn(vec![n, 14], 1.0, &mut rng));
            let ys: Vec<usize> = labels.iter().map(|l| l.class_index).collect();
            prop_assert!(focal_loss(logits, &ys, &[1.0; 14], 2.0).unwrap().item() >= 0.0);
        }
    }
}
