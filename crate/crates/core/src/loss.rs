//! Loss functions returning both the scalar value and its gradient with
//! respect to the predictions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable softmax cross-entropy over logits [N, K].
/// Returns the mean loss and d(loss)/d(logits).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy".into(),
            expected: vec![labels.len(), 0],
            got: shape.to_vec(),
        });
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidParam(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let z = logits.data();
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &z[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += log_denom - row[labels[i]];
        let g_row = &mut grad[i * k..(i + 1) * k];
        for (j, &v) in row.iter().enumerate() {
            g_row[j] = ((v - max).exp() / denom) / n as f64;
        }
        g_row[labels[i]] -= 1.0 / n as f64;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "softmax_cross_entropy".into(),
        });
    }
    Ok((loss, Tensor::from_vec(shape.to_vec(), grad)))
}

/// Mean squared error over all elements; gradient is w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.assert_shape(target.shape(), "mse_loss")?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "mse_loss".into(),
        });
    }
    Ok((loss, Tensor::from_vec(pred.shape().to_vec(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let logits = Tensor::zeros(vec![2, 4]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert_abs_diff_eq!(loss, 4.0f64.ln(), epsilon = 1e-12);
        // Gradient rows sum to zero.
        let g = grad.data();
        assert_abs_diff_eq!(g[..4].iter().sum::<f64>(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn mse_matches_hand_arithmetic() {
        let a = Tensor::new(vec![2], vec![0.1, 0.3]).unwrap();
        let b = Tensor::new(vec![2], vec![0.2, 0.5]).unwrap();
        let (loss, grad) = mse_loss(&a, &b).unwrap();
        assert_abs_diff_eq!(loss, 0.025, epsilon = 1e-15);
        assert_abs_diff_eq!(grad.data()[0], 2.0 * (0.1 - 0.2) / 2.0, epsilon = 1e-15);
    }
}
