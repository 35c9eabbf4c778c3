//! Class-conditional Gaussian anomaly scoring with a shared covariance.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("no training embeddings")]
    Empty,
    #[error("embedding of dimension {got}, expected {want}")]
    Dimension { got: usize, want: usize },
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Clone, Debug)]
pub struct AnomalyModel {
    /// Mean per class present in training; absent classes are skipped.
    pub means: Vec<(usize, DVector<f64>)>,
    pub covariance: DMatrix<f64>,
    /// Lower Cholesky factor of the covariance.
    factor: DMatrix<f64>,
    pub threshold: f64,
    /// Shrinkage factor: `ε = shrinkage · trace(Σ)/D`.
    pub shrinkage: f64,
    pub percentile: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AnomalyScore {
    pub score: f64,
    pub flagged: bool,
    /// Class whose mean is nearest.
    pub nearest_class: usize,
}

/// Value at the `q`-quantile by the nearest-rank rule, so that at most
/// `(1 − q)·n` values lie strictly above it.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

impl AnomalyModel {
    pub const DEFAULT_SHRINKAGE: f64 = 1e-3;
    pub const DEFAULT_PERCENTILE: f64 = 0.95;

    pub fn fit(x: &[Vec<f64>], labels: &[usize]) -> Result<Self, AnomalyError> {
        Self::fit_with(x, labels, Self::DEFAULT_SHRINKAGE, Self::DEFAULT_PERCENTILE)
    }

    pub fn fit_with(x: &[Vec<f64>], labels: &[usize], shrinkage: f64, percentile: f64) -> Result<Self, AnomalyError> {
        let d = x.first().ok_or(AnomalyError::Empty)?.len();
        if let Some(r) = x.iter().find(|r| r.len() != d) {
            return Err(AnomalyError::Dimension { got: r.len(), want: d });
        }
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort();
        classes.dedup();
        let means: Vec<(usize, DVector<f64>)> = classes
            .iter()
            .map(|&c| {
                let rows: Vec<&Vec<f64>> = x.iter().zip(labels).filter(|(_, &y)| y == c).map(|(r, _)| r).collect();
                let mut m = DVector::zeros(d);
                for r in &rows {
                    m += DVector::from_column_slice(r);
                }
                (c, m / rows.len() as f64)
            })
            .collect();
        let mut cov = DMatrix::zeros(d, d);
        for (r, &y) in x.iter().zip(labels) {
            let mu = &means.iter().find(|(c, _)| *c == y).expect("class mean").1;
            let v = DVector::from_column_slice(r) - mu;
            cov.ger(1.0, &v, &v, 1.0);
        }
        cov /= x.len() as f64;
        let eps = shrinkage * cov.trace() / d as f64;
        for i in 0..d {
            cov[(i, i)] += eps;
        }
        let factor = Cholesky::new(cov.clone()).ok_or(AnomalyError::NotPositiveDefinite)?.l();
        let mut model = AnomalyModel {
            means,
            covariance: cov,
            factor,
            threshold: f64::INFINITY,
            shrinkage,
            percentile,
        };
        let mut scores: Vec<f64> = x.iter().map(|r| model.distance(r).map(|(s, _)| s)).collect::<Result<_, _>>()?;
        scores.sort_by(f64::total_cmp);
        model.threshold = nearest_rank(&scores, percentile);
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// Minimum Mahalanobis distance over class means, and that class.
    pub fn distance(&self, e: &[f64]) -> Result<(f64, usize), AnomalyError> {
        if e.len() != self.dim() {
            return Err(AnomalyError::Dimension { got: e.len(), want: self.dim() });
        }
        let x = DVector::from_column_slice(e);
        let mut best = (f64::INFINITY, 0);
        for (c, mu) in &self.means {
            let diff = &x - mu;
            let z = self.factor.solve_lower_triangular(&diff).expect("Cholesky factor has a non-zero diagonal");
            let dist = z.norm();
            if dist < best.0 {
                best = (dist, *c);
            }
        }
        Ok(best)
    }

    pub fn score(&self, e: &[f64]) -> Result<AnomalyScore, AnomalyError> {
        let (score, nearest_class) = self.distance(e)?;
        Ok(AnomalyScore {
            score,
            flagged: score > self.threshold,
            nearest_class,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::randn(vec![n, d], 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = (0..n)
            .map(|i| {
                let mut r = t.row(i).to_vec();
                r[0] += 4.0 * labels[i] as f64;
                r[1] *= 1.0 + labels[i] as f64;
                r
            })
            .collect();
        (x, labels)
    }

    #[test]
    fn training_flag_rate_is_five_percent() {
        let (x, y) = data(700, 8, 1);
        let m = AnomalyModel::fit(&x, &y).unwrap();
        let flagged = x.iter().filter(|r| m.score(r).unwrap().flagged).count();
        assert_eq!(flagged, 35);
    }

    #[test]
    fn class_mean_scores_zero() {
        let (x, y) = data(90, 5, 2);
        let m = AnomalyModel::fit(&x, &y).unwrap();
        for (_, mu) in &m.means {
            assert!(m.score(mu.as_slice()).unwrap().score.abs() < 1e-12);
        }
    }

    #[test]
    fn far_points_score_high() {
        let (x, y) = data(300, 6, 3);
        let m = AnomalyModel::fit(&x, &y).unwrap();
        let far = vec![40.0; 6];
        assert!(m.score(&far).unwrap().flagged);
    }

    #[test]
    fn singular_covariance_is_regularised() {
        // Rank-one data: every row on one line.
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let y = vec![0; 20];
        assert!(AnomalyModel::fit(&x, &y).is_ok());
        assert_eq!(AnomalyModel::fit_with(&x, &y, 0.0, 0.95).err(), Some(AnomalyError::NotPositiveDefinite));
    }

    fn transform(x: &[Vec<f64>], a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<Vec<f64>> {
        x.iter().map(|r| (a * DVector::from_column_slice(r) + b).as_slice().to_vec()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        // Without shrinkage the distance is invariant under any invertible
        // affine map.
        #[test]
        fn affine_invariance_without_shrinkage(seed in 0u64..1000) {
            let (x, y) = data(120, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let a = DMatrix::from_column_slice(4, 4, Tensor::<f64>::randn(vec![16], 1.0, &mut rng).data()) + DMatrix::identity(4, 4) * 2.0;
            prop_assume!(a.determinant().abs() > 0.1);
            let b = DVector::from_column_slice(Tensor::<f64>::randn(vec![4], 3.0, &mut rng).data());
            let m1 = AnomalyModel::fit_with(&x, &y, 0.0, 0.95).unwrap();
            let xt = transform(&x, &a, &b);
            let m2 = AnomalyModel::fit_with(&xt, &y, 0.0, 0.95).unwrap();
            let probe = Tensor::<f64>::randn(vec![4], 2.0, &mut rng).data().to_vec();
            let pt = transform(std::slice::from_ref(&probe), &a, &b).remove(0);
            let (s1, s2) = (m1.score(&probe).unwrap().score, m2.score(&pt).unwrap().score);
            prop_assert!((s1 - s2).abs() < 1e-8, "{} vs {}", s1, s2);
        }

        // With trace-scaled shrinkage the distance stays invariant under
        // similarity maps (rotation, uniform scale, shift).
        #[test]
        fn similarity_invariance_with_shrinkage(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let (x, y) = data(120, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let q = DMatrix::from_column_slice(4, 4, Tensor::<f64>::randn(vec![16], 1.0, &mut rng).data()).qr().q();
            let a = q * scale;
            let b = DVector::from_column_slice(Tensor::<f64>::randn(vec![4], 3.0, &mut rng).data());
            let m1 = AnomalyModel::fit(&x, &y).unwrap();
            let m2 = AnomalyModel::fit(&transform(&x, &a, &b), &y).unwrap();
            let probe = Tensor::<f64>::randn(vec![4], 2.0, &mut rng).data().to_vec();
            let pt = transform(std::slice::from_ref(&probe), &a, &b).remove(0);
            let (s1, s2) = (m1.score(&probe).unwrap().score, m2.score(&pt).unwrap().score);
            prop_assert!((s1 - s2).abs() < 1e-8, "{} vs {}", s1, s2);
        }
    }
}
