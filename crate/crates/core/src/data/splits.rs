//! Train/validation/test splits with the desk-scale class balance.

use super::synth::{generate_sample, Sample, CHANNELS, IMAGE_SIZE};
use crate::taxonomy::NUM_CLASSES;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: [usize; NUM_CLASSES],
    pub val: [usize; NUM_CLASSES],
    pub test: [usize; NUM_CLASSES],
}

impl Default for SplitCounts {
    /// 700 / 110 / 120 samples. Strand Coreout is the largest class and
    /// Coreout+CutStrands the smallest: 29:1 in train, 14:1 in test.
    fn default() -> Self {
        SplitCounts {
            train: [43, 41, 53, 53, 45, 48, 37, 36, 41, 80, 50, 53, 4, 116],
            val: [6, 6, 8, 8, 6, 7, 5, 5, 6, 12, 8, 8, 2, 23],
            test: [7, 6, 9, 8, 7, 7, 6, 5, 6, 13, 8, 8, 2, 28],
        }
    }
}

impl SplitCounts {
    /// Same proportions scaled by `f`, keeping at least one sample per class.
    pub fn scaled(&self, f: f64) -> Self {
        let s = |a: &[usize; NUM_CLASSES]| a.map(|n| ((n as f64 * f).round() as usize).max(1));
        SplitCounts {
            train: s(&self.train),
            val: s(&self.val),
            test: s(&self.test),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, c) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if let Some(k) = c.iter().position(|&n| n == 0) {
                return Err(format!("{name} count for class {k} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for s in &self.samples {
            c[s.label.class_index] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.class_index).collect()
    }
}

/// Per-channel pixel statistics of the training images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }
}

impl NormStats {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let hw = IMAGE_SIZE * IMAGE_SIZE;
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        let mut n = 0usize;
        for img in images {
            for c in 0..CHANNELS {
                for &v in &img[c * hw..(c + 1) * hw] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64).powi(2);
                }
            }
            n += hw;
        }
        if n == 0 {
            return NormStats::default();
        }
        let mean = sum.map(|s| s / n as f64);
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            std[c] = (sq[c] / n as f64 - mean[c] * mean[c]).max(1e-12).sqrt();
        }
        NormStats { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub class_weights: [f64; NUM_CLASSES],
    pub norm: NormStats,
    pub seed: u64,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// `N / (C · n_c)`, so a balanced split gets unit weights.
pub fn inverse_frequency_weights(counts: &[usize; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let total: usize = counts.iter().sum();
    counts.map(|n| total as f64 / (NUM_CLASSES as f64 * n.max(1) as f64))
}

/// Generate all three splits. Sample seeds come from one stream seeded by
/// `seed` and double as sample ids; duplicates are redrawn so the splits
/// stay disjoint.
pub fn make_splits(counts: &SplitCounts, seed: u64) -> Result<Splits, String> {
    counts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut draw = |c: &[usize; NUM_CLASSES]| -> Vec<(usize, u64)> {
        let mut v = Vec::new();
        for (class, &n) in c.iter().enumerate() {
            for _ in 0..n {
                let id = loop {
                    let id: u64 = rng.random();
                    if seen.insert(id) {
                        break id;
                    }
                };
                v.push((class, id));
            }
        }
        v
    };
    let plans = [draw(&counts.train), draw(&counts.val), draw(&counts.test)];
    let [train, val, test] = plans.map(|p| Dataset {
        samples: p.into_iter().map(|(c, id)| generate_sample(c, id)).collect(),
    });
    let norm = NormStats::from_images(train.samples.iter().map(|s| s.image.as_slice()));
    Ok(Splits {
        class_weights: inverse_frequency_weights(&counts.train),
        train,
        val,
        test,
        norm,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts_shape() {
        let c = SplitCounts::default();
        assert_eq!(c.train.iter().sum::<usize>(), 700);
        assert_eq!(c.val.iter().sum::<usize>(), 110);
        assert_eq!(c.test.iter().sum::<usize>(), 120);
        let ratio = |a: &[usize; NUM_CLASSES]| *a.iter().max().unwrap() as f64 / *a.iter().min().unwrap() as f64;
        assert!((ratio(&c.train) - 29.0).abs() < 0.5);
        assert!((ratio(&c.test) - 14.0).abs() < 0.5);
        let argmax = |a: &[usize; NUM_CLASSES]| (0..NUM_CLASSES).max_by_key(|&i| a[i]).unwrap();
        let argmin = |a: &[usize; NUM_CLASSES]| (0..NUM_CLASSES).min_by_key(|&i| a[i]).unwrap();
        assert_eq!(argmax(&c.test), 13);
        assert_eq!(argmin(&c.test), 12);
    }

    #[test]
    fn weights_are_inverse_frequency() {
        let w = inverse_frequency_weights(&[10; NUM_CLASSES]);
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let c = SplitCounts::default().train;
        let w = inverse_frequency_weights(&c);
        assert!((w[12] / w[13] - 29.0).abs() < 1e-12);
        let weighted: f64 = c.iter().zip(&w).map(|(&n, &x)| n as f64 * x).sum();
        assert!((weighted - 700.0).abs() < 1e-9);
    }

    #[test]
    fn small_splits_are_disjoint_complete_and_deterministic() {
        let counts = SplitCounts::default().scaled(0.1);
        let a = make_splits(&counts, 3).unwrap();
        for d in [&a.train, &a.val, &a.test] {
            assert!(d.class_counts().iter().all(|&n| n > 0));
        }
        let ids: HashSet<u64> = [&a.train, &a.val, &a.test].iter().flat_map(|d| d.samples.iter().map(|s| s.id)).collect();
        assert_eq!(ids.len(), a.train.len() + a.val.len() + a.test.len());
        assert_eq!(a, make_splits(&counts, 3).unwrap());
        assert_ne!(a.train.samples[0].id, make_splits(&counts, 4).unwrap().train.samples[0].id);
    }

    #[test]
    fn zero_count_rejected() {
        let mut c = SplitCounts::default();
        c.val[3] = 0;
        assert!(make_splits(&c, 0).is_err());
    }

    #[test]
    fn norm_stats_of_constant_images() {
        let img = vec![0.25f32; CHANNELS * IMAGE_SIZE * IMAGE_SIZE];
        let s = NormStats::from_images([img.as_slice()]);
        assert!(s.mean.iter().all(|&m| (m - 0.25).abs() < 1e-12));
        assert!(s.std.iter().all(|&x| x < 1e-5));
    }
}
