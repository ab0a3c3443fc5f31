//! Conjugate Bayesian linear regression under the improper prior
//! `p(beta, gamma, log sigma²) ∝ 1`.
//!
//! Given a design `[X S]` the posterior factors as
//! `sigma² | y ~ Inv-χ²(n−k, s²)` and
//! `(beta, gamma) | sigma², y ~ N((beta_hat, gamma_hat), sigma²·(DᵀD)⁻¹)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::{psd_factor, quantile_sorted};

/// Relative tolerance for the column-rank check.
pub const RANK_TOL: f64 = 1e-10;
/// Minimum number of posterior draws for a predictive interval.
pub const MIN_PREDICTIVE_DRAWS: usize = 100;

/// Response vector with a design split into the intercept-led covariate block
/// `x` (n × (M+1)) and an optional seasonal block `s` (n × G, G may be 0).
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    y: DVector<f64>,
    x: DMatrix<f64>,
    s: DMatrix<f64>,
    names: Vec<String>,
}

impl RegressionDesign {
    /// Validates shapes, `k < n` and full column rank of `[x s]`.
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        s: Option<DMatrix<f64>>,
        names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = y.len();
        let s = s.unwrap_or_else(|| DMatrix::zeros(n, 0));
        if x.nrows() != n || s.nrows() != n {
            return Err(Error::InvalidArgument(format!(
                "row mismatch: y has {n}, X has {}, S has {}",
                x.nrows(),
                s.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "design needs at least the intercept column".into(),
            ));
        }
        let k = x.ncols() + s.ncols();
        let names = names.unwrap_or_else(|| default_names(x.ncols(), s.ncols()));
        if names.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{} column names for {k} columns",
                names.len()
            )));
        }
        if k >= n {
            return Err(Error::InvalidArgument(format!(
                "need more observations than coefficients (n = {n}, k = {k})"
            )));
        }
        if y.iter()
            .chain(x.iter())
            .chain(s.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "non-finite value in regression data".into(),
            ));
        }
        let d = Self { y, x, s, names };
        let bad = d.dependent_columns();
        if !bad.is_empty() {
            let cols: Vec<&str> = bad.iter().map(|&j| d.names[j].as_str()).collect();
            return Err(Error::SingularDesign(format!(
                "columns linearly dependent on earlier ones: {}",
                cols.join(", ")
            )));
        }
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Total coefficient count `k` of `[X S]`.
    pub fn k(&self) -> usize {
        self.x.ncols() + self.s.ncols()
    }

    pub fn n_beta(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `[X S]` as one matrix.
    pub fn full(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n(), self.k());
        d.columns_mut(0, self.x.ncols()).copy_from(&self.x);
        if self.s.ncols() > 0 {
            d.columns_mut(self.x.ncols(), self.s.ncols())
                .copy_from(&self.s);
        }
        d
    }

    /// Same structure, replaced data (used after whitening). Rank is
    /// re-checked.
    pub fn with_data(&self, y: DVector<f64>, full: DMatrix<f64>) -> Result<Self> {
        let nb = self.n_beta();
        let x = full.columns(0, nb).into_owned();
        let s = full.columns(nb, full.ncols() - nb).into_owned();
        Self::new(y, x, Some(s), Some(self.names.clone()))
    }

    /// Columns whose component orthogonal to all earlier columns is below
    /// `RANK_TOL` of their own norm (modified Gram–Schmidt, two passes).
    fn dependent_columns(&self) -> Vec<usize> {
        let full = self.full();
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut bad = Vec::new();
        for j in 0..full.ncols() {
            let col = full.column(j).into_owned();
            let norm = col.norm();
            let mut r = col;
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&r);
                    r.axpy(-c, q, 1.0);
                }
            }
            let rn = r.norm();
            if norm == 0.0 || rn <= RANK_TOL * norm {
                bad.push(j);
            } else {
                basis.push(r / rn);
            }
        }
        bad
    }
}

fn default_names(nx: usize, ns: usize) -> Vec<String> {
    (0..nx)
        .map(|j| format!("beta{j}"))
        .chain((0..ns).map(|j| format!("gamma{j}")))
        .collect()
}

/// Ordinary least-squares fit of `y` on `[X S]`.
#[derive(Debug, Clone)]
pub struct OlsFit {
    /// All `k` coefficients, beta block first.
    pub coef: DVector<f64>,
    pub n_beta: usize,
    pub s2: f64,
    pub residuals: DVector<f64>,
    /// `(DᵀD)⁻¹` for the full design `D = [X S]`.
    pub gram_inverse: DMatrix<f64>,
    pub n: usize,
}

impl OlsFit {
    pub fn k(&self) -> usize {
        self.coef.len()
    }

    pub fn df(&self) -> usize {
        self.n - self.k()
    }

    pub fn beta_hat(&self) -> DVector<f64> {
        self.coef.rows(0, self.n_beta).into_owned()
    }

    pub fn gamma_hat(&self) -> DVector<f64> {
        self.coef
            .rows(self.n_beta, self.k() - self.n_beta)
            .into_owned()
    }

    pub fn rss(&self) -> f64 {
        self.residuals.norm_squared()
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        row.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum()
    }
}

/// Least squares via QR; the Gram inverse comes from the triangular factor.
pub fn ols_fit(d: &RegressionDesign) -> Result<OlsFit> {
    let full = d.full();
    let (n, k) = (d.n(), d.k());
    let qr = full.clone().qr();
    let r = qr.r();
    let q = qr.q();
    let qty = q.transpose() * d.y();
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign("triangular factor is singular".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::SingularDesign("triangular factor is singular".into()))?;
    let gram_inverse = &r_inv * r_inv.transpose();
    let residuals = d.y() - &full * &coef;
    let s2 = residuals.norm_squared() / (n - k) as f64;
    Ok(OlsFit {
        coef,
        n_beta: d.n_beta(),
        s2,
        residuals,
        gram_inverse,
        n,
    })
}

/// Draw from the scaled inverse chi-square `Inv-χ²(n−k, s2)`, i.e.
/// `(n−k)·s2 / g` with `g ~ χ²(n−k)`.
pub fn sample_sigma2<R: Rng + ?Sized>(n: usize, k: usize, s2: f64, rng: &mut R) -> Result<f64> {
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "inverse chi-square needs n > k (n = {n}, k = {k})"
        )));
    }
    if !(s2 >= 0.0) || !s2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scale must be non-negative, got {s2}"
        )));
    }
    let dof = (n - k) as f64;
    let chi = ChiSquared::new(dof).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let g: f64 = chi.sample(rng);
    if s2 == 0.0 {
        return Ok(0.0);
    }
    Ok(dof * s2 / g)
}

/// Multivariate-normal sampler for `(beta, gamma) | sigma²` with covariance
/// `sigma²·(DᵀD)⁻¹`. The factor of the Gram inverse is computed once.
#[derive(Debug, Clone)]
pub struct CoefSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
    n_beta: usize,
}

impl CoefSampler {
    pub fn new(coef_hat: DVector<f64>, gram_inverse: &DMatrix<f64>, n_beta: usize) -> Result<Self> {
        let k = coef_hat.len();
        if gram_inverse.nrows() != k || gram_inverse.ncols() != k {
            return Err(Error::InvalidArgument("Gram inverse size mismatch".into()));
        }
        let asym = (gram_inverse - gram_inverse.transpose()).abs().max();
        if asym > 1e-8 * gram_inverse.abs().max().max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidArgument(
                "Gram inverse is not symmetric".into(),
            ));
        }
        let factor = psd_factor(gram_inverse, 1e-10)
            .map_err(|e| Error::InvalidArgument(format!("Gram inverse not PSD: {e}")))?;
        Ok(Self {
            mean: coef_hat,
            factor,
            n_beta,
        })
    }

    pub fn from_fit(fit: &OlsFit) -> Result<Self> {
        Self::new(fit.coef.clone(), &fit.gram_inverse, fit.n_beta)
    }

    /// One draw of all `k` coefficients. `sigma2 = 0` returns the mean
    /// exactly.
    pub fn sample<R: Rng + ?Sized>(&self, sigma2: f64, rng: &mut R) -> Result<DVector<f64>> {
        if !(sigma2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be non-negative, got {sigma2}"
            )));
        }
        let k = self.mean.len();
        let z = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)));
        if sigma2 == 0.0 {
            return Ok(self.mean.clone());
        }
        Ok(&self.mean + (&self.factor * z) * sigma2.sqrt())
    }

    pub fn sample_split<R: Rng + ?Sized>(
        &self,
        sigma2: f64,
        rng: &mut R,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let c = self.sample(sigma2, rng)?;
        let k = c.len();
        Ok((
            c.rows(0, self.n_beta).into_owned(),
            c.rows(self.n_beta, k - self.n_beta).into_owned(),
        ))
    }
}

/// One draw of `(beta, gamma) ~ N((beta_hat, gamma_hat), sigma2·gram_inverse)`.
pub fn sample_coefficients<R: Rng + ?Sized>(
    beta_hat: &DVector<f64>,
    gamma_hat: &DVector<f64>,
    gram_inverse: &DMatrix<f64>,
    sigma2: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut mean = DVector::zeros(beta_hat.len() + gamma_hat.len());
    mean.rows_mut(0, beta_hat.len()).copy_from(beta_hat);
    mean.rows_mut(beta_hat.len(), gamma_hat.len())
        .copy_from(gamma_hat);
    CoefSampler::new(mean, gram_inverse, beta_hat.len())?.sample_split(sigma2, rng)
}

/// How `sigma²` enters the coefficient draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// Draw from the inverse chi-square posterior.
    #[default]
    Sample,
    /// Substitute the OLS point estimate `s²`.
    Plugin,
}

impl FromStr for SigmaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(SigmaMode::Sample),
            "plugin" => Ok(SigmaMode::Plugin),
            other => Err(Error::Validation(format!(
                "sigma2 mode must be 'sample' or 'plugin', got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SigmaMode::Sample => "sample",
            SigmaMode::Plugin => "plugin",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraw {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub sigma2: f64,
    pub eta: Option<f64>,
}

impl PosteriorDraw {
    /// Linear predictor `rowᵀ(beta, gamma)`.
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.beta
            .iter()
            .chain(self.gamma.iter())
            .zip(row)
            .map(|(c, x)| c * x)
            .sum()
    }

    pub fn coef(&self, j: usize) -> f64 {
        if j < self.beta.len() {
            self.beta[j]
        } else {
            self.gamma[j - self.beta.len()]
        }
    }
}

/// `n_draws` joint posterior draws for one fit: sigma² first (or the
/// plug-in), then coefficients given sigma².
pub fn draw_posterior<R: Rng + ?Sized>(
    fit: &OlsFit,
    sampler: &CoefSampler,
    mode: SigmaMode,
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<PosteriorDraw>> {
    (0..n_draws)
        .map(|_| {
            let sigma2 = match mode {
                SigmaMode::Sample => sample_sigma2(fit.n, fit.k(), fit.s2, rng)?,
                SigmaMode::Plugin => fit.s2,
            };
            let (beta, gamma) = sampler.sample_split(sigma2, rng)?;
            Ok(PosteriorDraw {
                beta,
                gamma,
                sigma2,
                eta: None,
            })
        })
        .collect()
}

/// Posterior predictive interval at `level` for the covariate row `x_new`
/// (intercept first, then covariates, then seasonal columns).
pub fn predictive_interval<R: Rng + ?Sized>(
    draws: &[PosteriorDraw],
    x_new: &[f64],
    level: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let samples = predictive_samples(draws, x_new, rng)?;
    interval_from_samples(samples, level)
}

pub fn predictive_samples<R: Rng + ?Sized>(
    draws: &[PosteriorDraw],
    x_new: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if draws.len() < MIN_PREDICTIVE_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "predictive interval needs at least {MIN_PREDICTIVE_DRAWS} draws, got {}",
            draws.len()
        )));
    }
    let k = draws[0].beta.len() + draws[0].gamma.len();
    if x_new.len() != k {
        return Err(Error::InvalidArgument(format!(
            "covariate row has {} entries, model has {k}",
            x_new.len()
        )));
    }
    Ok(draws
        .iter()
        .map(|d| {
            let z: f64 = StandardNormal.sample(rng);
            d.predict(x_new) + d.sigma2.sqrt() * z
        })
        .collect())
}

/// Central interval of `level` from raw samples by sort-and-interpolate.
pub fn interval_from_samples(mut samples: Vec<f64>, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    samples.sort_by(f64::total_cmp);
    Ok((
        quantile_sorted(&samples, (1.0 - level) / 2.0),
        quantile_sorted(&samples, (1.0 + level) / 2.0),
    ))
}

/// Classical t inference for one coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefInference {
    pub estimate: f64,
    pub std_error: f64,
    pub lo: f64,
    pub hi: f64,
    /// Two-sided p-value for a zero coefficient.
    pub p_value: f64,
}

fn students_t(df: usize) -> Result<StudentsT> {
    StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Upper `(1+level)/2` quantile of Student's t with `df` degrees of freedom.
pub fn t_critical(df: usize, level: f64) -> Result<f64> {
    Ok(students_t(df)?.inverse_cdf(0.5 + level / 2.0))
}

/// Confidence intervals and p-values with `n−k` degrees of freedom.
pub fn t_inference(fit: &OlsFit, level: f64) -> Result<Vec<CoefInference>> {
    let t = students_t(fit.df())?;
    let crit = t.inverse_cdf(0.5 + level / 2.0);
    Ok((0..fit.k())
        .map(|j| {
            let est = fit.coef[j];
            let se = (fit.s2 * fit.gram_inverse[(j, j)]).max(0.0).sqrt();
            let p_value = if se > 0.0 {
                2.0 * (1.0 - t.cdf((est / se).abs()))
            } else if est == 0.0 {
                1.0
            } else {
                0.0
            };
            CoefInference {
                estimate: est,
                std_error: se,
                lo: est - crit * se,
                hi: est + crit * se,
                p_value,
            }
        })
        .collect())
}

/// Classical prediction interval for a new observation at the fixed row
/// `x_new`: `ŷ ± t·sqrt(s²(1 + xᵀ(DᵀD)⁻¹x))`.
pub fn t_prediction_interval(fit: &OlsFit, x_new: &[f64], crit: f64) -> (f64, f64) {
    let x = DVector::from_column_slice(x_new);
    let lev = (x.transpose() * &fit.gram_inverse * &x)[(0, 0)];
    let yhat = fit.predict(x_new);
    let half = crit * (fit.s2 * (1.0 + lev)).max(0.0).sqrt();
    (yhat - half, yhat + half)
}
