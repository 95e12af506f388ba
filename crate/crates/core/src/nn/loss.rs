use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of `[n, classes]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.item_len();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

/// Per-row cross-entropy `-log softmax(z)[label]` and its gradient with
/// respect to the logits (`softmax(z) - onehot(label)`, unscaled).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (Vec<T>, Tensor<T>) {
    let c = logits.item_len();
    let mut grad = Vec::with_capacity(logits.len());
    let mut losses = Vec::with_capacity(labels.len());
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        losses.push(log_z - row[y]);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad.push(if j == y { p - T::one() } else { p });
        }
    }
    (losses, Tensor::from_parts(logits.shape().to_vec(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.1f64, 0.9, 0.0]), 1);
        assert_eq!(argmax(&[0.5f64, 0.5]), 0);
        assert_eq!(argmax(&[0.0f64, 2.0, 2.0]), 1);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::new(vec![1, 10], vec![0.3f64; 10]).unwrap();
        let (l, _) = softmax_cross_entropy(&logits, &[4]);
        assert_relative_eq!(l[0], 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        for margin in [10.0, 50.0, 800.0] {
            let logits = Tensor::new(vec![1, 3], vec![margin, 0.0, 0.0f64]).unwrap();
            let (l, g) = softmax_cross_entropy(&logits, &[0]);
            assert!(l[0] >= 0.0 && l[0] < 1e-4, "margin {margin} loss {}", l[0]);
            assert!(g.all_finite());
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::new(vec![2, 3], vec![1.0f64, -2.0, 700.0, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax(&logits);
        for i in 0..2 {
            assert!((p.item(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
