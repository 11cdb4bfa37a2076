//! Softmax and entropy over dense real vectors.

use alloc::{format, vec::Vec};

use crate::error::{Error, Result};

/// Tolerance on the total mass accepted by [`entropy`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Max-subtracted exponential normalization.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(pos) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(pos));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| libm::exp(v - max)).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(pos) = dist.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(pos));
    }
    if let Some(p) = dist.iter().find(|&&p| p < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "negative component {p}"
        )));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::InvalidDistribution(format!(
            "components sum to {total}"
        )));
    }
    Ok(-dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * libm::log(p))
        .sum::<f64>())
}

/// Log-odds of `p`; the logit gap of a two-class softmax whose first class
/// has probability `p`.
pub fn logit(p: f64) -> f64 {
    libm::log(p / (1.0 - p))
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Scales `v` to unit Euclidean norm. Zero vectors are left untouched.
pub fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2.0, 0.0]).unwrap();
        // e^2 / (e^2 + 1)
        assert!((p[0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((p[1] - 0.119_202_922_022_117_6).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert_eq!(softmax(&[0.0, f64::NAN]), Err(Error::NonFinite(1)));
        assert_eq!(softmax(&[f64::INFINITY]), Err(Error::NonFinite(0)));
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax(&[1000.0, 999.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1]);
    }

    #[test]
    fn entropy_examples() {
        let h = entropy(&[0.25; 4]).unwrap();
        assert!((h - libm::log(4.0)).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = entropy(&[0.5, 0.25, 0.25]).unwrap();
        assert!((h - 1.039_720_770_839_917_9).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_bad_distributions() {
        assert!(matches!(
            entropy(&[-0.1, 1.1]),
            Err(Error::InvalidDistribution(_))
        ));
        assert!(matches!(
            entropy(&[0.5, 0.4]),
            Err(Error::InvalidDistribution(_))
        ));
    }

    #[test]
    fn logit_inverts_two_class_softmax() {
        let gap = logit(0.880_797_077_977_882_3);
        assert!((gap - 2.0).abs() < 1e-12);
    }
}
