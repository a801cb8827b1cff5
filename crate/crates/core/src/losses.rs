//! Batch-hard triplet loss and softmax cross-entropy, each returning the
//! loss together with its (sub)gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Where triplet distances come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceSource {
    EuclideanOnEmbeddings,
    NegativeLearnedSimilarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: DistanceSource,
}

impl TripletConfig {
    /// Feature-level training margin.
    pub fn embedding() -> Self {
        Self {
            margin: 0.3,
            distance: DistanceSource::EuclideanOnEmbeddings,
        }
    }

    /// Aggregation training margin, on the similarity scale.
    pub fn aggregation() -> Self {
        Self {
            margin: 1.0,
            distance: DistanceSource::NegativeLearnedSimilarity,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    /// d loss / d distance, same shape as the distance matrix.
    pub grad: Matrix,
    /// Anchors whose hinge is active.
    pub active: usize,
    /// Anchors with no other member of their identity in the batch.
    pub without_positive: usize,
}

/// Sum over anchors of `[m + max_p d(a,p) − min_n d(a,n)]₊`.
///
/// The positive search skips the anchor itself; ties resolve to the lowest
/// index. The subgradient is routed only through the selected pairs.
pub fn triplet_hard_loss(distances: &Matrix, labels: &[u32], margin: f64) -> Result<TripletOutput> {
    let n = distances.rows();
    if !distances.is_square() || labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} distance matrix with {} labels",
            n,
            distances.cols(),
            labels.len()
        )));
    }
    if !margin.is_finite() {
        return Err(Error::InvalidArgument("margin must be finite".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument(
            "triplet loss needs at least two identities in the batch".into(),
        ));
    }
    let mut grad = Matrix::zeros(n, n);
    let (mut loss, mut active, mut without_positive) = (0.0, 0, 0);
    for a in 0..n {
        let row = distances.row(a);
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if labels[j] == labels[a] {
                if j != a && pos.is_none_or(|p| row[j] > row[p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| row[j] < row[q]) {
                neg = Some(j);
            }
        }
        let (Some(p), Some(q)) = (pos, neg) else {
            without_positive += 1;
            continue;
        };
        let term = margin + row[p] - row[q];
        if term > 0.0 {
            loss += term;
            active += 1;
            grad.set(a, p, grad.get(a, p) + 1.0);
            grad.set(a, q, grad.get(a, q) - 1.0);
        }
    }
    if without_positive > 0 {
        log::warn!("{without_positive} anchors have no positive in the batch; they contribute 0");
    }
    Ok(TripletOutput {
        loss,
        grad,
        active,
        without_positive,
    })
}

/// Summed negative log-likelihood of `labels` under row-wise softmax.
/// Returns the loss and `softmax − onehot`.
pub fn softmax_ce_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = (logits.rows(), logits.cols());
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} >= {c} classes")));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        for (j, z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            grad.set(i, j, p - if j == y { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn crafted(pos: f64, neg: f64) -> (Matrix, Vec<u32>) {
        let labels = vec![0, 0, 1, 1];
        let mut d = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    d.set(i, j, if labels[i] == labels[j] { pos } else { neg });
                }
            }
        }
        (d, labels)
    }

    #[test]
    fn satisfied_margin_gives_zero() {
        let (d, labels) = crafted(0.0, 0.5);
        let out = triplet_hard_loss(&d, &labels, 0.3).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hand_computed_p2_k2() {
        // every anchor: 0.3 + 1.0 − 0.5 = 0.8
        let (d, labels) = crafted(1.0, 0.5);
        let out = triplet_hard_loss(&d, &labels, 0.3).unwrap();
        assert!((out.loss - 3.2).abs() < 1e-12);
        assert_eq!(out.active, 4);
        assert_eq!(out.grad.get(0, 1), 1.0);
        assert_eq!(out.grad.get(0, 2), -1.0); // first of the tied negatives
        assert_eq!(out.grad.get(0, 3), 0.0);
    }

    #[test]
    fn single_identity_is_an_error() {
        let d = Matrix::zeros(3, 3);
        assert!(triplet_hard_loss(&d, &[2, 2, 2], 0.3).is_err());
    }

    #[test]
    fn k1_anchors_contribute_nothing() {
        let mut d = Matrix::zeros(3, 3);
        d.set(0, 2, 0.1);
        d.set(2, 0, 0.1);
        let out = triplet_hard_loss(&d, &[0, 1, 2], 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.without_positive, 3);
    }

    #[test]
    fn softmax_uniform_logits() {
        let logits = Matrix::zeros(5, 7);
        let (loss, grad) = softmax_ce_loss(&logits, &[0, 1, 2, 3, 6]).unwrap();
        assert!((loss - 5.0 * 7f64.ln()).abs() < 1e-12);
        assert!((grad.get(0, 0) - (1.0 / 7.0 - 1.0)).abs() < 1e-12);
        assert!(softmax_ce_loss(&Matrix::zeros(0, 3), &[]).is_err());
        assert!(softmax_ce_loss(&logits, &[0, 1, 2, 3, 7]).is_err());
    }

    #[test]
    fn softmax_confident_correct_class() {
        let logits = Matrix::new(1, 3, vec![800.0, 0.0, -5.0]).unwrap();
        let (loss, _) = softmax_ce_loss(&logits, &[0]).unwrap();
        assert!(loss < 1e-300);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let logits = Matrix::new(3, 4, data.clone()).unwrap();
        let labels = [2, 0, 3];
        let (_, grad) = softmax_ce_loss(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..12 {
            let mut plus = data.clone();
            plus[i] += h;
            let mut minus = data.clone();
            minus[i] -= h;
            let lp = softmax_ce_loss(&Matrix::new(3, 4, plus).unwrap(), &labels).unwrap().0;
            let lm = softmax_ce_loss(&Matrix::new(3, 4, minus).unwrap(), &labels).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            assert!((numeric - grad.as_slice()[i]).abs() < 1e-6);
        }
    }

    fn random_batch(seed: u64) -> (Matrix, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..12).map(|i| i / 3).collect();
        let mut d = Matrix::zeros(12, 12);
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    d.set(i, j, rng.random_range(0.0..2.0));
                }
            }
        }
        (d, labels)
    }

    proptest! {
        #[test]
        fn triplet_nonnegative_and_shift_invariant(seed in 0u64..500, shift in -3.0f64..3.0) {
            let (d, labels) = random_batch(seed);
            let base = triplet_hard_loss(&d, &labels, 0.3).unwrap();
            prop_assert!(base.loss >= 0.0);
            let shifted_data: Vec<f64> = d.as_slice().iter().map(|x| x + shift).collect();
            let shifted = Matrix::new(12, 12, shifted_data).unwrap();
            // the diagonal is never read, so shifting it too is harmless
            let out = triplet_hard_loss(&shifted, &labels, 0.3).unwrap();
            prop_assert!((out.loss - base.loss).abs() < 1e-9);
        }

        #[test]
        fn softmax_gradient_rows_sum_to_zero(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..20).map(|_| rng.random_range(-10.0..10.0)).collect();
            let (_, g) = softmax_ce_loss(&Matrix::new(4, 5, data).unwrap(), &[0, 4, 2, 2]).unwrap();
            for r in 0..4 {
                prop_assert!(g.row(r).iter().sum::<f64>().abs() < 1e-9);
            }
        }
    }
}
