use super::{Graph, ParamId, ParamStore, Tensor, TensorError, TensorResult, Var};
use crate::scalar::Scalar;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// (input, flat index) of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, idx: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-6);
        self.coords_checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((input, idx));
        }
    }
}

fn coords(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compare reverse-mode gradients of the scalar `f(inputs)` against central
/// differences. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn finite_difference_check<S, F>(f: F, inputs: &[Tensor<S>], opts: &GradCheckOptions) -> TensorResult<GradCheckReport>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &[Var<'g, S>]) -> TensorResult<Var<'g, S>>,
{
    let eval = |xs: &[Tensor<S>]| -> TensorResult<f64> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.item().as_f64())
    };
    let base = eval(inputs)?;
    if eval(inputs)? != base {
        return Err(TensorError::Contract("function is not deterministic".into()));
    }
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; inputs[ti].numel()],
        };
        for idx in coords(inputs[ti].numel(), opts.max_coords, &mut rng) {
            let orig = work[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + S::of(opts.step);
            let fp = eval(&work)?;
            work[ti].data_mut()[idx] = orig - S::of(opts.step);
            let fm = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            report.record(ti, idx, analytic[idx], (fp - fm) / (2.0 * opts.step));
        }
    }
    Ok(report)
}

/// Same check, differentiating with respect to parameters held in a store.
/// `f` must load parameters through [`Graph::param`].
pub fn param_gradient_check<S, F>(
    store: &mut ParamStore<S>,
    ids: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> TensorResult<GradCheckReport>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &ParamStore<S>) -> TensorResult<Var<'g, S>>,
{
    let eval = |st: &ParamStore<S>| -> TensorResult<f64> {
        let g = Graph::new();
        Ok(f(&g, st)?.item().as_f64())
    };
    let base = eval(store)?;
    if eval(store)? != base {
        return Err(TensorError::Contract("function is not deterministic".into()));
    }
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let loss = f(&g, store)?;
        let grads = g.backward(loss)?;
        ids.iter()
            .map(|&id| match grads.param(store, id) {
                Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; store.value(id).numel()],
            })
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (pi, &id) in ids.iter().enumerate() {
        for idx in coords(store.value(id).numel(), opts.max_coords, &mut rng) {
            let orig = store.value(id).data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + S::of(opts.step);
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig - S::of(opts.step);
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            report.record(pi, idx, analytic[pi][idx], (fp - fm) / (2.0 * opts.step));
        }
    }
    Ok(report)
}
