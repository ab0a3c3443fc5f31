//! Log/linear variance-stabilising transform for positive fields.
//!
//! Below the breakpoint `nu` values are mapped by `log(x)`; above it the map
//! continues linearly with matching value and slope, so large values keep an
//! interpretable linear scale and back-transformed predictions stay positive.

use crate::error::{Error, Result};
use crate::linalg::quantile_sorted;

/// Floor applied to non-positive raw values before transforming a field.
pub const CLAMP_EPS: f64 = 1e-6;

/// Default breakpoint quantile.
pub const DEFAULT_NU_QUANTILE: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    nu: f64,
}

impl TransformSpec {
    pub fn new(nu: f64) -> Result<Self> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "transform breakpoint must be positive and finite, got {nu}"
            )));
        }
        Ok(Self { nu })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn gamma(&self, x: f64) -> Result<f64> {
        gamma(x, self)
    }

    pub fn gamma_inverse(&self, z: f64) -> f64 {
        gamma_inverse(z, self)
    }

    /// Transforms a whole field, clamping raw values to at least
    /// [`CLAMP_EPS`]. Returns the transformed values and the clamp count.
    pub fn apply_field(&self, raw: &[f64]) -> (Vec<f64>, usize) {
        let mut clamped = 0usize;
        let out = raw
            .iter()
            .map(|&x| {
                let x = if x < CLAMP_EPS {
                    clamped += 1;
                    CLAMP_EPS
                } else {
                    x
                };
                if x <= self.nu {
                    x.ln()
                } else {
                    self.nu.ln() + (x - self.nu) / self.nu
                }
            })
            .collect();
        if clamped > 0 {
            log::info!(
                "clamped {clamped} non-positive raw values to {CLAMP_EPS:e} before transform"
            );
        }
        (out, clamped)
    }
}

/// Breakpoint as the empirical `q` quantile of `values` (sort and
/// interpolate at position `1 + q·(n−1)`). A non-positive quantile falls
/// back to the smallest positive value present.
pub fn fit_nu(values: &[f64], q: f64) -> Result<TransformSpec> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit breakpoint on empty data".into(),
        ));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "breakpoint quantile must lie in (0, 1), got {q}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in transform input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let smallest_positive = sorted
        .iter()
        .copied()
        .find(|v| *v > 0.0)
        .ok_or_else(|| Error::InvalidArgument("all values are non-positive".into()))?;
    let nu = quantile_sorted(&sorted, q);
    let nu = if nu > 0.0 { nu } else { smallest_positive };
    TransformSpec::new(nu)
}

pub fn gamma(x: f64, spec: &TransformSpec) -> Result<f64> {
    let nu = spec.nu;
    if x <= nu {
        if !(x > 0.0) {
            return Err(Error::Domain(format!(
                "log branch requires a positive value, got {x}"
            )));
        }
        Ok(x.ln())
    } else {
        Ok(nu.ln() + (x - nu) / nu)
    }
}

pub fn gamma_inverse(z: f64, spec: &TransformSpec) -> f64 {
    let nu = spec.nu;
    let log_nu = nu.ln();
    if z <= log_nu {
        // exp underflows below about -745; keep the output strictly positive
        z.exp().max(f64::MIN_POSITIVE)
    } else {
        nu + nu * (z - log_nu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(nu: f64) -> TransformSpec {
        TransformSpec::new(nu).unwrap()
    }

    /// Independent quantile oracle: 1-based order statistics.
    fn oracle_quantile(values: &[f64], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = 1.0 + q * (v.len() as f64 - 1.0);
        let k = h.floor() as usize;
        if k >= v.len() {
            return v[v.len() - 1];
        }
        v[k - 1] + (h - k as f64) * (v[k] - v[k - 1])
    }

    #[test]
    fn nu_constant_data() {
        assert_eq!(fit_nu(&[3.5; 10], 0.2).unwrap().nu(), 3.5);
    }

    #[test]
    fn nu_one_to_hundred() {
        let v: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        let nu = fit_nu(&v, 0.2).unwrap().nu();
        let expected = oracle_quantile(&v, 0.2);
        // position 20.8 → 20 + 0.8·(21 − 20)
        assert!((expected - 20.8).abs() < 1e-12);
        assert!((nu - expected).abs() < 1e-12);
    }

    #[test]
    fn nu_falls_back_to_smallest_positive() {
        assert_eq!(fit_nu(&[-1.0, 0.0, 5.0], 0.2).unwrap().nu(), 5.0);
    }

    #[test]
    fn nu_errors() {
        assert!(fit_nu(&[], 0.2).is_err());
        assert!(fit_nu(&[-1.0, 0.0], 0.2).is_err());
        assert!(fit_nu(&[1.0, 2.0], 0.0).is_err());
        assert!(fit_nu(&[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn gamma_examples() {
        let s = spec(2.0);
        assert!((gamma(2.0, &s).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((gamma(4.0, &s).unwrap() - (2f64.ln() + 1.0)).abs() < 1e-15);
        assert_eq!(gamma(1.0, &s).unwrap(), 0.0);
        assert!(matches!(gamma(0.0, &s), Err(Error::Domain(_))));
        assert!(matches!(gamma(-3.0, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn gamma_inverse_examples() {
        let s = spec(2.0);
        assert!((gamma_inverse(2f64.ln(), &s) - 2.0).abs() < 1e-15);
        assert!((gamma_inverse(2f64.ln() + 1.0, &s) - 4.0).abs() < 1e-12);
        for x in [0.1, 2.0, 20.0] {
            assert!((gamma_inverse(gamma(x, &s).unwrap(), &s) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn field_transform_clamps() {
        let s = spec(2.0);
        let (z, n) = s.apply_field(&[-1.0, 0.0, 1.0, 4.0]);
        assert_eq!(n, 2);
        assert_eq!(z[0], CLAMP_EPS.ln());
        assert_eq!(z[2], 0.0);
    }

    proptest! {
        #[test]
        fn monotone(nu in 0.01..500.0f64, a in 1e-6..1e4f64, b in 1e-6..1e4f64) {
            prop_assume!(a != b);
            let s = spec(nu);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(gamma(lo, &s).unwrap() < gamma(hi, &s).unwrap());
        }

        #[test]
        fn round_trips(nu in 0.01..500.0f64, x in 1e-6..1e5f64, z in -30.0..30.0f64) {
            let s = spec(nu);
            let back = gamma_inverse(gamma(x, &s).unwrap(), &s);
            prop_assert!((back - x).abs() <= 1e-10 * x);
            let inv = gamma_inverse(z, &s);
            prop_assert!(inv > 0.0);
            let again = gamma(inv, &s).unwrap();
            prop_assert!((again - z).abs() <= 1e-10 * z.abs().max(1.0));
        }
    }
}
