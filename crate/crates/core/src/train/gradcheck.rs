//! Finite-difference check of the full four-term objective.

use super::{objective, PreparedBatch, TrainConfig, TrainResult};
use crate::data::{generate_sample, NormStats, Sample};
use crate::model::{default_vocabulary, Dart};
use crate::tensor::{param_gradient_check, GradCheckOptions, GradCheckReport, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Classes of the toy batch: two share a severity, two share a type.
pub const TOY_CLASSES: [usize; 4] = [0, 3, 4, 10];

/// Check every parameter of a toy model (all unfrozen) on a four-sample
/// batch with all loss terms active. Dropout is off; augmentation and mask
/// plans are drawn once.
pub fn objective_gradient_check(seed: u64, opts: &GradCheckOptions) -> TrainResult<GradCheckReport> {
    let cfg = TrainConfig { seed, ..TrainConfig::toy() };
    let mut m = Dart::<f64>::new(cfg.model_config(), default_vocabulary(), seed);
    let ids: Vec<_> = m.params.ids().collect();
    for &id in &ids {
        m.params.set_trainable(id, true);
    }
    let samples: Vec<Sample> = TOY_CLASSES.iter().enumerate().map(|(i, &c)| generate_sample(c, seed.wrapping_add(i as u64))).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = [seed, seed + 1, seed + 2, seed + 3];
    let batch = PreparedBatch::new(&m, &refs, &NormStats::default(), &seeds, &mut rng)?;
    let loss_cfg = cfg.loss_config(vec![1.0; crate::taxonomy::NUM_CLASSES]);
    let ema = m.ema.clone();
    let mut store = m.params.clone();
    let report = param_gradient_check(
        &mut store,
        &ids,
        |g: &Graph<f64>, st| {
            let (loss, _) = objective(g, &m, st, Some(&ema), &batch, &loss_cfg, true, None::<&mut ChaCha8Rng>).map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))?;
            Ok(loss)
        },
        opts,
    )?;
    Ok(report)
}
