//! Minimal dense-matrix arithmetic with reverse-mode automatic differentiation.
//!
//! Every trainable piece of the recognizer is built on the [`Graph`] tape in
//! this crate. Values are stored as 64-bit floats, all graph operations work
//! on rank-2 tensors, and the only broadcast supported is a single row applied
//! across the leading (row) dimension.

mod check;
mod graph;
mod tensor;

pub use check::{central_difference, grad_check};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// `log Σ exp(v_i)` with max subtraction. All `-inf` entries give exactly `-inf`.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(NumericsError::Usage("logsumexp of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let s: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

/// Two-argument `logsumexp`, the inner step of log-space dynamic programs.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
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

/// `log σ(x)` without overflow for large |x|.
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
    fn logsumexp_single_element() {
        assert_eq!(logsumexp(&[3.25]).unwrap(), 3.25);
        assert_eq!(logsumexp(&[-7.0]).unwrap(), -7.0);
    }

    #[test]
    fn logsumexp_pair_adds_ln2() {
        let c = 0.7;
        assert!((logsumexp(&[c, c]).unwrap() - (c + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_large_magnitudes_do_not_overflow() {
        let v = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!(v.is_finite());
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        // naive evaluation agrees at small magnitudes
        let small = [0.3, -1.2, 2.0, 0.0];
        let naive = small.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&small).unwrap() - naive).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_all_neg_inf_and_empty() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(logsumexp(&[ninf, ninf]).unwrap(), ninf);
        assert!(matches!(logsumexp(&[]), Err(NumericsError::Usage(_))));
        assert_eq!(logsumexp(&[ninf, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariance(v in proptest::collection::vec(-50.0f64..50.0, 1..16), k in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + k).collect();
            let lhs = logsumexp(&shifted).unwrap();
            let rhs = logsumexp(&v).unwrap() + k;
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn log_add_matches_logsumexp(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            prop_assert!((log_add(a, b) - logsumexp(&[a, b]).unwrap()).abs() < 1e-13);
        }
    }
}
