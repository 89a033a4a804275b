use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Floor applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Weighted categorical cross-entropy `weight · (−Σ tᵢ log pᵢ)` for a
/// one-hot `target`.
pub fn cross_entropy<T: Scalar>(probs: &[T], target: &[T], weight: T) -> Result<T> {
    if probs.len() != target.len() {
        return Err(Error::input(format!(
            "{} probabilities vs {} target entries",
            probs.len(),
            target.len()
        )));
    }
    let ones = target.iter().filter(|&&t| t == T::one()).count();
    let zeros = target.iter().filter(|&&t| t == T::zero()).count();
    if ones != 1 || ones + zeros != target.len() {
        return Err(Error::input("target is not a one-hot vector"));
    }
    let true_class = target.iter().position(|&t| t == T::one()).unwrap();
    Ok(weight * nll(probs[true_class]))
}

#[inline]
fn nll<T: Scalar>(p: T) -> T {
    -p.max(T::from_f64(LOG_CLAMP)).ln()
}

/// Mean over the batch of per-example cross-entropy weighted by the class
/// weight of the true label. `probs` is `[N, C]`.
pub fn class_weighted_batch_loss<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    class_weights: &[T],
) -> Result<T> {
    let (n, c) = batch_dims(probs, labels, class_weights)?;
    let total = probs
        .data()
        .chunks_exact(c)
        .zip(labels)
        .map(|(row, &y)| class_weights[y] * nll(row[y]))
        .fold(T::zero(), |a, b| a + b);
    Ok(total / T::from_f64(n as f64))
}

/// Gradient of [`class_weighted_batch_loss`] with respect to the logits
/// that produced `probs` through a softmax: `w_y · (p − onehot(y)) / N`.
pub fn softmax_cross_entropy_grad<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    class_weights: &[T],
) -> Result<Tensor<T>> {
    let (n, c) = batch_dims(probs, labels, class_weights)?;
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = probs.clone();
    for (row, &y) in grad.data_mut().chunks_exact_mut(c).zip(labels) {
        row[y] = row[y] - T::one();
        let w = class_weights[y] * inv_n;
        row.iter_mut().for_each(|v| *v = *v * w);
    }
    Ok(grad)
}

fn batch_dims<T: Scalar>(probs: &Tensor<T>, labels: &[usize], weights: &[T]) -> Result<(usize, usize)> {
    let &[n, c] = probs.dims() else {
        return Err(Error::input(format!("batch probabilities must be [N,C], got {}", probs.shape())));
    };
    if labels.len() != n {
        return Err(Error::input(format!("{n} predictions but {} labels", labels.len())));
    }
    if weights.len() != c {
        return Err(Error::input(format!("{c} classes but {} class weights", weights.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::input(format!("label {y} out of range for {c} classes")));
    }
    Ok((n, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::softmax;

    #[test]
    fn cross_entropy_cases() {
        let onehot = [0.0f64, 1.0, 0.0];
        assert_eq!(cross_entropy(&onehot, &onehot, 1.0).unwrap(), 0.0);
        let uniform = [0.2f64; 5];
        let t = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert!((cross_entropy(&uniform, &t, 1.0).unwrap() - 5f64.ln()).abs() < 1e-12);
        let p = softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        // −ln(0.2447284710547976)
        assert!((cross_entropy(&p, &onehot, 1.0).unwrap() - 1.4076059644443806).abs() < 1e-9);
        assert!(cross_entropy(&p, &[1.0, 1.0, 0.0], 1.0).is_err());
        assert!(cross_entropy(&p, &[0.5, 0.5, 0.0], 1.0).is_err());
        let zero = [1.0f64, 0.0];
        assert!((cross_entropy(&zero, &[0.0, 1.0], 1.0).unwrap() - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn weighted_batch_mean() {
        let probs = Tensor::<f64>::from_vec([2, 2], vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let (l1, l2) = (-(0.7f64).ln(), -(0.6f64).ln());
        let neutral = class_weighted_batch_loss(&probs, &[0, 1], &[1.0, 1.0]).unwrap();
        assert!((neutral - (l1 + l2) / 2.0).abs() < 1e-12);
        let weighted = class_weighted_batch_loss(&probs, &[0, 1], &[1.0, 2.0]).unwrap();
        assert!((weighted - (l1 + 2.0 * l2) / 2.0).abs() < 1e-12);
        assert!(class_weighted_batch_loss(&probs, &[0], &[1.0, 1.0]).is_err());
        assert!(class_weighted_batch_loss(&probs, &[0, 1], &[1.0]).is_err());
    }
}
