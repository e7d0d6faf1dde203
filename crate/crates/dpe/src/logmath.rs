//! Log-domain arithmetic helpers.

/// `log(exp(a) + exp(b))` without leaving the log domain.
#[inline]
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// `log Σ exp(x_i)` with max subtraction; `-inf` on an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes `logits` in place into log-probabilities.
pub fn log_softmax_in_place(logits: &mut [f64]) {
    let z = logsumexp(logits);
    for x in logits.iter_mut() {
        *x -= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logaddexp_matches_direct() {
        let got = logaddexp(0.5, 2.0);
        let want = (0.5f64.exp() + 2.0f64.exp()).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn logaddexp_neg_inf_identity() {
        assert_eq!(logaddexp(f64::NEG_INFINITY, -3.0), -3.0);
        assert_eq!(logaddexp(-3.0, f64::NEG_INFINITY), -3.0);
        assert_eq!(
            logaddexp(f64::NEG_INFINITY, f64::NEG_INFINITY),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn logsumexp_no_overflow_for_large_negative_scores() {
        let xs = [-9000.0, -9001.0, -10000.0];
        let got = logsumexp(&xs);
        assert!(got.is_finite());
        assert!((got - (-9000.0 + (1.0 + (-1.0f64).exp() + (-1000.0f64).exp()).ln())).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut xs = vec![1.0, 2.0, 3.0, -5.0];
        log_softmax_in_place(&mut xs);
        assert!(logsumexp(&xs).abs() < 1e-12);
    }
}
