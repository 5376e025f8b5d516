use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its logit gradient
/// `(softmax - onehot) / N`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, classes] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::domain(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::domain(format!("label {bad} out of range for {classes} classes")));
    }
    let inv_n = T::lit(1.0 / n as f64);
    let mut grad = logits.zeros_like();
    let mut total = T::zero();
    for ((row, grow), &label) in logits
        .data()
        .chunks_exact(classes)
        .zip(grad.data_mut().chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for (g, &v) in grow.iter_mut().zip(row) {
            *g = (v - max).exp();
            z = z + *g;
        }
        total = total + z.ln() + max - row[label];
        for g in grow.iter_mut() {
            *g = *g / z * inv_n;
        }
        grow[label] = grow[label] - inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let [_, classes] = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(classes)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff_grad, FdConfig};
    use crate::tensor::Rng;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::<f64>::zeros(&[4, 10]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0, 3, 9, 2]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let mut logits = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        logits.data_mut()[1] = 200.0;
        logits.data_mut()[3] = 200.0;
        let (loss, grad) = softmax_xent(&logits, &[1, 0]).unwrap();
        assert!(loss < 1e-60);
        assert!(grad.max_abs() < 1e-60);
    }

    #[test]
    fn rejects_bad_labels() {
        let logits = Tensor::<f64>::zeros(&[1, 3]).unwrap();
        assert!(matches!(softmax_xent(&logits, &[3]), Err(Error::Domain(_))));
        assert!(softmax_xent(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..5 {
            let logits: Tensor<f64> = rng.gaussian_tensor(&[4, 6], 0.0, 2.0).unwrap();
            let labels: Vec<usize> = (0..4).map(|_| rng.below(6)).collect();
            let (_, grad) = softmax_xent(&logits, &labels).unwrap();
            let est = finite_diff_grad(|p| softmax_xent(p, &labels).unwrap().0, &logits, &FdConfig::default()).unwrap();
            assert!(est.max_rel_error(&grad) < 1e-5);
        }
    }
}
