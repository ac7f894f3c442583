use super::LayerError;
use crate::tensor::Tensor;

/// Row-wise softmax of `[N, K]` logits using the max-shift for stability.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor, LayerError> {
    let (n, k) = rows(logits)?;
    let mut out = logits.data().to_vec();
    for r in 0..n {
        softmax_in_place(&mut out[r * k..(r + 1) * k]);
    }
    Ok(Tensor::from_vec(&[n, k], out)?)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn rows(logits: &Tensor) -> Result<(usize, usize), LayerError> {
    match logits.dims() {
        [n, k] => Ok((*n, *k)),
        other => Err(LayerError::BadRank {
            expected: 2,
            got: other.len(),
        }),
    }
}

/// Mean cross-entropy of `[N, K]` logits against integer labels, with the
/// gradient `(softmax − onehot) / N`.
pub fn softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), LayerError> {
    let (n, k) = rows(logits)?;
    if labels.len() != n {
        return Err(LayerError::ShapeMismatch {
            what: "labels",
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    if !logits.is_finite() {
        return Err(LayerError::NonFiniteInput("softmax_ce"));
    }
    let mut grad = logits.data().to_vec();
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(LayerError::LabelOutOfRange {
                row: r,
                label,
                classes: k,
            });
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - row[label];
        let g = &mut grad[r * k..(r + 1) * k];
        softmax_in_place(g);
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error, STEP};
    use crate::nn::testing::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let logits = Tensor::zeros(&[1, 3]).unwrap();
        let (loss, _) = softmax_ce(&logits, &[0]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        assert!((loss - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_tensor(&[50, 3], &mut rng).elementwise_scalar(crate::tensor::ElementwiseOp::Mul, 40.0).unwrap();
        let p = softmax_rows(&logits).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits = Tensor::from_vec(&[1, 3], vec![1000.0, -1000.0, 0.0]).unwrap();
        let (loss, grad) = softmax_ce(&logits, &[1]).unwrap();
        assert!((loss - 2000.0).abs() < 1e-9);
        assert!(grad.is_finite());
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(
            softmax_ce(&logits, &[0, 3]).unwrap_err(),
            LayerError::LabelOutOfRange { row: 1, label: 3, classes: 3 }
        );
    }

    #[test]
    fn gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_tensor(&[6, 3], &mut rng);
        let labels = [0, 1, 2, 2, 1, 0];
        let (_, grad) = softmax_ce(&logits, &labels).unwrap();
        let numeric = central_difference(logits.data(), STEP, |v| {
            softmax_ce(&Tensor::from_vec(&[6, 3], v.to_vec()).unwrap(), &labels).unwrap().0
        });
        assert!(relative_error(grad.data(), &numeric) < 1e-6);
    }
}
