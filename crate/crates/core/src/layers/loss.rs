use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct XentOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    /// d loss / d logits.
    pub grad: Tensor4<T>,
    pub correct: usize,
}

/// Softmax cross-entropy on (N, K, 1, 1) logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<XentOutput<T>> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape("softmax_xent logits", "(N, K, 1, 1)", s));
    }
    if labels.len() != s.n {
        return Err(Error::shape("softmax_xent labels", s.n, labels.len()));
    }
    let k = s.c;
    let nf = T::from_usize(s.n).unwrap();
    let mut grad = Tensor4::zeros(s);
    let mut loss = T::zero();
    let mut correct = 0;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidParam(format!("label {label} out of range for {k} classes")));
        }
        let row = &logits.data()[n * k..(n + 1) * k];
        let (arg, max) = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        if arg == label {
            correct += 1;
        }
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for (i, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_z).exp();
            *gv = (p - if i == label { T::one() } else { T::zero() }) / nf;
        }
    }
    Ok(XentOutput {
        loss: loss / nf,
        grad,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor4::full([3, 10, 1, 1], 0.7f64);
        let out = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-14);
        let row_sum: f64 = out.grad.data()[..10].iter().sum();
        assert!(row_sum.abs() < 1e-15);
    }

    #[test]
    fn bad_labels_rejected() {
        let logits = Tensor4::full([1, 3, 1, 1], 0.0f64);
        assert!(softmax_xent(&logits, &[3]).is_err());
        assert!(softmax_xent(&logits, &[0, 1]).is_err());
    }
}
