use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input".into()));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// Loss and logit gradient of softmax cross-entropy for one target.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `loss = -log softmax(logits)[target]`, `grad = softmax(logits) - onehot(target)`.
pub fn cross_entropy_loss(logits: &[f64], target: usize) -> Result<CrossEntropy> {
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target {} out of range for {} logits",
            target,
            logits.len()
        )));
    }
    let probs = softmax(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[target];
    let mut grad = probs;
    grad[target] -= 1.0;
    Ok(CrossEntropy { loss, grad })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// `log(sigmoid(x))` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for p in &u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (pi, expect) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((pi - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy_loss(&[0.3; 7], 2).unwrap();
        assert!((ce.loss - 7f64.ln()).abs() < 1e-12);
        let ce = cross_entropy_loss(&[0.0, 800.0, 0.0], 1).unwrap();
        assert!(ce.loss < 1e-300 + 1e-12 && ce.loss >= 0.0);
        assert!(cross_entropy_loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0) <= 0.0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..40),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn cross_entropy_gradient_sums_to_zero(
            v in prop::collection::vec(-30.0f64..30.0, 1..40),
            t in 0usize..40,
        ) {
            let target = t % v.len();
            let ce = cross_entropy_loss(&v, target).unwrap();
            let s: f64 = ce.grad.iter().sum();
            prop_assert!(s.abs() <= 1e-12);
            prop_assert!(ce.loss >= 0.0);
        }
    }
}
