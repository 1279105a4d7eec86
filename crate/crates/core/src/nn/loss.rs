use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean softmax cross-entropy over a (batch, n_classes) row-major logit block,
/// and its gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], n_classes: usize) -> Result<(T, Vec<T>)> {
    let batch = labels.len();
    if batch == 0 || logits.len() != batch * n_classes {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {batch} labels of {n_classes} classes",
            logits.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidClass(bad.to_string()));
    }
    let inv_batch = T::one() / T::from_usize(batch).expect("batch fits");
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * n_classes..(b + 1) * n_classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let g = &mut grad[b * n_classes..(b + 1) * n_classes];
        let mut sum = T::zero();
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - max).exp();
            sum += *gi;
        }
        loss += sum.ln() - (row[label] - max);
        for gi in g.iter_mut() {
            *gi = *gi / sum * inv_batch;
        }
        g[label] -= inv_batch;
    }
    Ok((loss * inv_batch, grad))
}

/// Index of the largest logit per row, ties to the lower index.
pub fn argmax_rows<T: Scalar>(logits: &[T], n_classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(n_classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let (loss, _) = softmax_cross_entropy(&[0.3f64; 17], &[4], 17).unwrap();
        assert!((loss - 17f64.ln()).abs() < 1e-12);
        assert!((loss - 2.833213).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_logit_has_tiny_loss() {
        let mut logits = vec![0.0f32; 17];
        logits[9] = 1000.0;
        let (loss, grad) = softmax_cross_entropy(&logits, &[9], 17).unwrap();
        assert!(loss < 1e-6);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits: Vec<f32> = (0..3 * 17).map(|i| ((i * 13 % 29) as f32) * 0.37 - 5.0).collect();
        let (_, grad) = softmax_cross_entropy(&logits, &[0, 16, 8], 17).unwrap();
        for row in grad.chunks(17) {
            assert!(row.iter().sum::<f32>().abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(softmax_cross_entropy(&[0.0f32; 17], &[17], 17).is_err());
        assert!(softmax_cross_entropy(&[0.0f32; 16], &[1], 17).is_err());
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax_rows(&[1.0f32, 3.0, 3.0, 0.0], 4), vec![1]);
    }
}
