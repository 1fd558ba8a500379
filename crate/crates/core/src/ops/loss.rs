use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over a batch of logits `[B, K]`.
///
/// Returns the loss, the gradient with respect to the logits and the
/// per-sample predicted class (first maximum on ties).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>, Vec<usize>)> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax_cross_entropy", "logit rank", 2, logits.rank()));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::shape("softmax_cross_entropy", "label count", batch, labels.len()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {l} at index {i} exceeds class count {classes}"),
        ));
    }
    let inv_batch = T::one() / T::of(batch.max(1) as f64);
    let mut grad = vec![T::zero(); batch * classes];
    let mut loss = T::zero();
    let mut predicted = Vec::with_capacity(batch);
    for (b, row) in logits.data().chunks(classes).enumerate() {
        let (arg, &max) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
        predicted.push(arg);
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_denom = denom.ln();
        loss += log_denom - (row[labels[b]] - max);
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp() / denom * inv_batch;
        }
        g[labels[b]] -= inv_batch;
    }
    Ok((loss * inv_batch, Tensor::new(&[batch, classes], grad)?, predicted))
}

/// Row-wise softmax of `[B, K]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax", "logit rank", 2, logits.rank()));
    }
    let classes = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(classes.max(1)) {
        let max = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - max).exp() / denom;
        }
    }
    Tensor::new(logits.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&Tensor::new(&[2, 3], vec![1.0f64, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap()).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(p.data()[2] > p.data()[1] && p.data()[3] == 1.0);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[2, 10]);
        let (loss, _, _) = softmax_cross_entropy(&logits, &[3, 7]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = Tensor::from_fn(&[3, 4], |i| ((i[0] * 4 + i[1]) as f64 * 1.3).sin() * 2.0);
        let labels = [1, 3, 0];
        let (_, g, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (softmax_cross_entropy(&p, &labels).unwrap().0 - softmax_cross_entropy(&m, &labels).unwrap().0)
                / (2.0 * h);
            assert!((num - g.data()[i]).abs() / num.abs().max(1e-6) < 1e-5);
        }
    }

    #[test]
    fn stable_for_large_logits() {
        let logits = Tensor::new(&[1, 2], vec![1000.0f32, 0.0]).unwrap();
        let (loss, g, pred) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss < 1e-6);
        assert!(g.all_finite());
        assert_eq!(pred, vec![0]);
    }
}
