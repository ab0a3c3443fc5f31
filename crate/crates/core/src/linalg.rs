//! Small dense linear-algebra and order-statistic helpers shared by the
//! modelling modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Maximum number of ×10 jitter escalations after a failed factorization.
pub const MAX_JITTER_ESCALATIONS: usize = 3;

/// Cholesky factor of `k + extra·I`, where `extra` starts at zero and is
/// escalated to 10·base, 100·base, 1000·base on failure.
///
/// `base` is the jitter already on the diagonal; when it is zero a small
/// multiple of the mean diagonal is used as the escalation seed. Returns the
/// factor together with the extra diagonal term that was actually applied.
pub fn cholesky_escalating(k: &DMatrix<f64>, base: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = Cholesky::new(k.clone()) {
        return Ok((ch, 0.0));
    }
    let n = k.nrows().max(1);
    let seed = if base > 0.0 {
        base
    } else {
        1e-12 * k.trace().abs() / n as f64
    };
    let mut extra = seed;
    for _ in 0..MAX_JITTER_ESCALATIONS {
        extra *= 10.0;
        let mut kk = k.clone();
        for i in 0..k.nrows() {
            kk[(i, i)] += extra;
        }
        if let Some(ch) = Cholesky::new(kk) {
            log::debug!("cholesky succeeded after adding {extra:e} to the diagonal");
            return Ok((ch, extra));
        }
    }
    Err(Error::IllConditioned(format!(
        "{}x{} matrix not positive definite after {} jitter escalations (last extra {:e})",
        k.nrows(),
        k.ncols(),
        MAX_JITTER_ESCALATIONS,
        extra
    )))
}

/// log det from a Cholesky factor.
pub fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Square-root factor `L` with `L Lᵀ = cov` for a symmetric positive
/// semidefinite matrix, via eigendecomposition so exact zeros and tiny
/// negative rounding are tolerated.
///
/// Eigenvalues below `-neg_tol·trace` are rejected.
pub fn psd_factor(cov: &DMatrix<f64>, neg_tol: f64) -> Result<DMatrix<f64>> {
    psd_factor_scaled(cov, neg_tol, 0.0)
}

/// As [`psd_factor`], with the rejection threshold `-neg_tol·max(trace, scale)`.
pub fn psd_factor_scaled(cov: &DMatrix<f64>, neg_tol: f64, scale: f64) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if n != cov.ncols() {
        return Err(Error::InvalidArgument(format!(
            "covariance must be square, got {}x{}",
            n,
            cov.ncols()
        )));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCovariance("non-finite entry".into()));
    }
    let mut c = cov.clone();
    symmetrize(&mut c);
    let trace = c.trace().abs().max(scale);
    let eig = SymmetricEigen::new(c);
    let min = eig.eigenvalues.min();
    if min < -neg_tol * trace {
        return Err(Error::InvalidCovariance(format!(
            "smallest eigenvalue {min:e} below -{neg_tol:e}·{trace:e}"
        )));
    }
    let mut l = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    Ok(l)
}

/// Symmetric inverse square root of a symmetric positive-definite matrix.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut c = m.clone();
    symmetrize(&mut c);
    let n = c.nrows();
    let eig = SymmetricEigen::new(c);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 1e-14 * max.abs()) || !min.is_finite() {
        return Err(Error::Numeric(format!(
            "matrix not positive definite (eigenvalues in [{min:e}, {max:e}])"
        )));
    }
    let d = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&d) * v.transpose())
}

/// Empirical quantile of already-sorted data: linear interpolation between
/// order statistics at 1-based position `1 + q·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Sorts a copy of `values` (NaN-free) and returns the `q` quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

/// Sample median.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates_order_statistics() {
        let v: Vec<f64> = (1..=5).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.1) - 1.4).abs() < 1e-15);
        assert_eq!(quantile(&[4.0], 0.3), 4.0);
    }

    #[test]
    fn psd_factor_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.0, 2.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let l = psd_factor(&a, 1e-6).unwrap();
        let back = &l * l.transpose();
        assert!((back - a).abs().max() < 1e-12);
    }

    #[test]
    fn psd_factor_accepts_singular_rejects_indefinite() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_factor(&singular, 1e-6).unwrap();
        assert!((&l * l.transpose() - &singular).abs().max() < 1e-12);
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            psd_factor(&indefinite, 1e-6),
            Err(Error::InvalidCovariance(_))
        ));
    }

    #[test]
    fn escalation_rescues_singular_matrix() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, extra) = cholesky_escalating(&singular, 1e-8).unwrap();
        assert!(extra > 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        assert!(matches!(
            cholesky_escalating(&bad, 1e-8),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn inverse_square_root() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let w = inv_sqrt_spd(&a).unwrap();
        let id = &w * &a * &w;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }
}
