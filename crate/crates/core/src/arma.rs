//! ARMA error structure for the per-location regression.
//!
//! A causal ARMA(p, q) process has the MA(∞) form `e_t = Σ_j a_j w_{t−j}`
//! with autocovariance `c(h) = sigma²·Σ_j a_j a_{j+|h|}`. The regression
//! errors then have covariance `sigma²·Ω(eta)` with `Ω` the implied
//! correlation matrix. For single-parameter families (AR(1), MA(1)) the
//! marginal posterior of `eta` is available in closed form on a grid, and
//! the remaining analysis reduces to ordinary least squares after whitening.
//!
//! Note that the autocovariance is called `c(h)` here; `gamma` is reserved
//! for the seasonal coefficients of the regression.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::bayes::{ols_fit, RegressionDesign};
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, inv_sqrt_spd, symmetrize};

/// Extra MA(∞) terms required beyond the largest lag requested.
pub const TRUNCATION_GUARD: usize = 50;
pub const DEFAULT_TRUNCATION: usize = 1000;
pub const ETA_GRID_POINTS: usize = 199;
pub const ETA_GRID_LIMIT: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct ArmaSpec {
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub truncation: usize,
}

impl ArmaSpec {
    pub fn new(ar: Vec<f64>, ma: Vec<f64>, truncation: usize) -> Result<Self> {
        let s = Self { ar, ma, truncation };
        s.validate()?;
        Ok(s)
    }

    pub fn white_noise() -> Self {
        Self {
            ar: vec![],
            ma: vec![],
            truncation: DEFAULT_TRUNCATION,
        }
    }

    pub fn ar1(phi: f64) -> Result<Self> {
        Self::new(vec![phi], vec![], DEFAULT_TRUNCATION)
    }

    pub fn ma1(b: f64) -> Result<Self> {
        Self::new(vec![], vec![b], DEFAULT_TRUNCATION)
    }

    pub fn validate(&self) -> Result<()> {
        if self.truncation < 1 {
            return Err(Error::InvalidArgument(
                "truncation must be at least 1".into(),
            ));
        }
        if self.ar.iter().chain(&self.ma).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite ARMA coefficient".into()));
        }
        let r = ar_spectral_radius(&self.ar);
        if r >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "AR polynomial is not causal (largest inverse root modulus {r})"
            )));
        }
        Ok(())
    }

    fn with_truncation(&self, truncation: usize) -> Self {
        Self {
            truncation,
            ..self.clone()
        }
    }
}

/// Largest modulus of the eigenvalues of the AR companion matrix, i.e. of
/// the inverse roots of `1 − φ_1 z − … − φ_p z^p`. Causal iff < 1.
fn ar_spectral_radius(ar: &[f64]) -> f64 {
    let p = ar.len();
    match p {
        0 => 0.0,
        1 => ar[0].abs(),
        _ => {
            let mut c = DMatrix::zeros(p, p);
            for (j, phi) in ar.iter().enumerate() {
                c[(0, j)] = *phi;
            }
            for i in 1..p {
                c[(i, i - 1)] = 1.0;
            }
            c.complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max)
        }
    }
}

/// MA(∞) weights `a_0..a_{truncation−1}`:
/// `a_0 = 1`, `a_j = θ_j + Σ_{i=1..p} φ_i a_{j−i}` with `θ_j = 0` for `j > q`.
pub fn ma_inf_coeffs(spec: &ArmaSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut a = vec![0.0; spec.truncation];
    a[0] = 1.0;
    for j in 1..spec.truncation {
        let mut v = spec.ma.get(j - 1).copied().unwrap_or(0.0);
        for (i, phi) in spec.ar.iter().enumerate() {
            if let Some(prev) = j.checked_sub(i + 1) {
                v += phi * a[prev];
            }
        }
        a[j] = v;
    }
    Ok(a)
}

/// Autocovariances `c(0..=maxlag)` of the truncated MA(∞) expansion.
pub fn autocov(spec: &ArmaSpec, sigma2: f64, maxlag: usize) -> Result<Vec<f64>> {
    if spec.truncation < maxlag + TRUNCATION_GUARD {
        return Err(Error::InvalidArgument(format!(
            "truncation {} too short for lag {maxlag} (need at least {})",
            spec.truncation,
            maxlag + TRUNCATION_GUARD
        )));
    }
    let a = ma_inf_coeffs(spec)?;
    Ok((0..=maxlag)
        .map(|h| sigma2 * a.iter().zip(&a[h..]).map(|(x, y)| x * y).sum::<f64>())
        .collect())
}

/// Error correlation matrix `Ω_ij = c(|i−j|)/c(0)`. The truncation is
/// extended when needed to cover lag `n−1`.
pub fn build_omega(spec: &ArmaSpec, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("omega needs n >= 1".into()));
    }
    let spec = spec.with_truncation(spec.truncation.max(n - 1 + TRUNCATION_GUARD));
    let c = autocov(&spec, 1.0, n - 1)?;
    let mut omega = DMatrix::from_fn(n, n, |i, j| c[i.abs_diff(j)] / c[0]);
    symmetrize(&mut omega);
    if spec.ar.is_empty() && spec.ma.is_empty() {
        return Ok(omega);
    }
    if Cholesky::new(omega.clone()).is_none() {
        let min = omega.clone().symmetric_eigenvalues().min();
        if min < -1e-10 {
            return Err(Error::Numeric(format!(
                "ARMA correlation matrix is not PSD (smallest eigenvalue {min:e})"
            )));
        }
    }
    Ok(omega)
}

/// Single-parameter error families exposed to the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaFamily {
    Ar1,
    Ma1,
}

impl EtaFamily {
    pub fn spec(&self, eta: f64) -> Result<ArmaSpec> {
        match self {
            EtaFamily::Ar1 => ArmaSpec::ar1(eta),
            EtaFamily::Ma1 => ArmaSpec::ma1(eta),
        }
    }

    fn check(&self, eta: f64) -> Result<()> {
        if !(eta.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "{self} parameter must satisfy |eta| < 1, got {eta}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for EtaFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EtaFamily::Ar1 => "AR1",
            EtaFamily::Ma1 => "MA1",
        })
    }
}

impl FromStr for EtaFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AR1" => Ok(EtaFamily::Ar1),
            "MA1" => Ok(EtaFamily::Ma1),
            other => Err(Error::Validation(format!("unknown ARMA family '{other}'"))),
        }
    }
}

/// Banded whitening operator `W` with `W Ω(eta) Wᵀ = I` for AR(1) or MA(1).
///
/// AR(1) uses the Prais–Winsten transform; MA(1) a forward solve with the
/// bidiagonal Cholesky factor of the tridiagonal `Ω`. Both are O(n).
#[derive(Debug, Clone)]
pub enum BandedWhitener {
    Ar1 { phi: f64, n: usize },
    Ma1 { diag: Vec<f64>, sub: Vec<f64> },
}

impl BandedWhitener {
    pub fn new(family: EtaFamily, eta: f64, n: usize) -> Result<Self> {
        family.check(eta)?;
        if n == 0 {
            return Err(Error::InvalidArgument("whitener needs n >= 1".into()));
        }
        match family {
            EtaFamily::Ar1 => Ok(BandedWhitener::Ar1 { phi: eta, n }),
            EtaFamily::Ma1 => {
                let r = eta / (1.0 + eta * eta);
                let mut diag = vec![1.0; n];
                let mut sub = vec![0.0; n - 1];
                for i in 1..n {
                    let e = r / diag[i - 1];
                    let d2 = 1.0 - e * e;
                    if !(d2 > 0.0) {
                        return Err(Error::Numeric(format!(
                            "MA(1) correlation matrix singular at eta = {eta}"
                        )));
                    }
                    sub[i - 1] = e;
                    diag[i] = d2.sqrt();
                }
                Ok(BandedWhitener::Ma1 { diag, sub })
            }
        }
    }

    pub fn log_det_omega(&self) -> f64 {
        match self {
            BandedWhitener::Ar1 { phi, n } => (*n as f64 - 1.0) * (1.0 - phi * phi).ln(),
            BandedWhitener::Ma1 { diag, .. } => 2.0 * diag.iter().map(|d| d.ln()).sum::<f64>(),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            BandedWhitener::Ar1 { phi, .. } => {
                let s = (1.0 - phi * phi).sqrt();
                (0..v.len())
                    .map(|t| {
                        if t == 0 {
                            v[0]
                        } else {
                            (v[t] - phi * v[t - 1]) / s
                        }
                    })
                    .collect()
            }
            BandedWhitener::Ma1 { diag, sub } => {
                let mut out = vec![0.0; v.len()];
                for i in 0..v.len() {
                    let prev = if i == 0 { 0.0 } else { sub[i - 1] * out[i - 1] };
                    out[i] = (v[i] - prev) / diag[i];
                }
                out
            }
        }
    }

    pub fn apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for j in 0..m.ncols() {
            let col: Vec<f64> = m.column(j).iter().copied().collect();
            let w = self.apply(&col);
            out.column_mut(j).copy_from_slice(&w);
        }
        out
    }

    pub fn whiten(&self, d: &RegressionDesign) -> Result<RegressionDesign> {
        let y = DVector::from_vec(self.apply(d.y().as_slice()));
        d.with_data(y, self.apply_matrix(&d.full()))
    }
}

/// Closed-form log marginal from whitened data, shared by the dense and
/// banded routes.
fn log_marginal_whitened(whitened: &RegressionDesign, log_det_omega: f64) -> Result<f64> {
    let fit = ols_fit(whitened)?;
    let n = whitened.n() as f64;
    let p = whitened.k() as f64;
    let ss = fit.rss();
    // log det(XᵀΩ⁻¹X) = −log det((XᵀΩ⁻¹X)⁻¹)
    let gram_inv = fit.gram_inverse.clone();
    let ch = Cholesky::new(gram_inv)
        .ok_or_else(|| Error::Numeric("whitened Gram matrix not positive definite".into()))?;
    let log_det_gram = -chol_logdet(&ch);
    if !(ss > 0.0) {
        return Err(Error::Numeric(
            "zero generalized residual sum of squares".into(),
        ));
    }
    Ok(-((n - p) / 2.0 + 1.0) * ss.ln() + 0.5 * log_det_gram - 0.5 * log_det_omega)
}

/// Unnormalized log marginal posterior of `eta` by the dense route:
/// `−((n−p)/2 + 1)·log SS + ½·log det(XᵀΩ⁻¹X) − ½·log det Ω`, with SS the
/// Ω-weighted residual sum of squares and `p` the coefficient count.
pub fn eta_log_marginal(eta: f64, d: &RegressionDesign, family: EtaFamily) -> Result<f64> {
    family.check(eta)?;
    let omega = build_omega(&family.spec(eta)?, d.n())?;
    let ch = Cholesky::new(omega).ok_or_else(|| Error::Numeric(format!("Ω({eta}) is singular")))?;
    let l = ch.l();
    let full = d.full();
    let wy = l
        .solve_lower_triangular(d.y())
        .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
    let wx = l
        .solve_lower_triangular(&full)
        .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
    log_marginal_whitened(&d.with_data(wy, wx)?, chol_logdet(&ch))
}

/// Same quantity through the O(n) banded factor.
pub fn eta_log_marginal_banded(eta: f64, d: &RegressionDesign, family: EtaFamily) -> Result<f64> {
    let w = BandedWhitener::new(family, eta, d.n())?;
    log_marginal_whitened(&w.whiten(d)?, w.log_det_omega())
}

/// The default `eta` grid: 199 equispaced points on [−0.99, 0.99].
pub fn default_eta_grid() -> Vec<f64> {
    eta_grid(ETA_GRID_POINTS, ETA_GRID_LIMIT)
}

pub fn eta_grid(points: usize, limit: f64) -> Vec<f64> {
    if points == 1 {
        return vec![0.0];
    }
    (0..points)
        .map(|i| -limit + 2.0 * limit * i as f64 / (points - 1) as f64)
        .collect()
}

/// Discrete posterior of `eta` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaPosterior {
    pub grid: Vec<f64>,
    pub log_density: Vec<f64>,
    pub weights: Vec<f64>,
}

impl EtaPosterior {
    pub fn from_log_density(grid: Vec<f64>, log_density: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.len() != log_density.len() {
            return Err(Error::InvalidArgument(
                "eta grid and densities must match and be nonempty".into(),
            ));
        }
        let max = log_density
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numeric(
                "no finite log density on the eta grid".into(),
            ));
        }
        let raw: Vec<f64> = log_density
            .iter()
            .map(|l| if l.is_finite() { (l - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        Ok(Self {
            grid,
            log_density,
            weights,
        })
    }

    /// Evaluates the closed-form marginal on `grid` (banded route).
    pub fn compute(grid: Vec<f64>, d: &RegressionDesign, family: EtaFamily) -> Result<Self> {
        let ld = grid
            .iter()
            .map(|&eta| eta_log_marginal_banded(eta, d, family))
            .collect::<Result<Vec<_>>>()?;
        Self::from_log_density(grid, ld)
    }

    pub fn argmax(&self) -> f64 {
        let i = self
            .weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.grid[i]
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // rounding left the total just below 1
        self.weights
            .iter()
            .rposition(|w| *w > 0.0)
            .unwrap_or(self.weights.len() - 1)
    }

    /// `eta,log_density,weight` rows with header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eta,log_density,weight\n");
        for ((e, l), w) in self.grid.iter().zip(&self.log_density).zip(&self.weights) {
            s.push_str(&format!("{e},{l},{w}\n"));
        }
        s
    }
}

/// Inverse-CDF draw from the grid posterior.
pub fn sample_eta<R: Rng + ?Sized>(post: &EtaPosterior, rng: &mut R) -> f64 {
    post.grid[post.sample_index(rng)]
}

/// Whitens response and design by the symmetric inverse square root of
/// `omega`.
pub fn whiten(d: &RegressionDesign, omega: &DMatrix<f64>) -> Result<RegressionDesign> {
    if omega.nrows() != d.n() || omega.ncols() != d.n() {
        return Err(Error::InvalidArgument(format!(
            "omega is {}x{}, design has {} rows",
            omega.nrows(),
            omega.ncols(),
            d.n()
        )));
    }
    let w = inv_sqrt_spd(omega)?;
    d.with_data(&w * d.y(), &w * d.full())
}

/// Exact Gaussian profile negative log-likelihood of a zero-mean series
/// under ARMA(p, q) via Durbin–Levinson, with the innovation variance
/// profiled out. Returns `None` for non-causal parameters.
pub fn arma_profile_nll(series: &[f64], ar: &[f64], ma: &[f64]) -> Option<f64> {
    let n = series.len();
    let spec = ArmaSpec::new(
        ar.to_vec(),
        ma.to_vec(),
        n + TRUNCATION_GUARD + DEFAULT_TRUNCATION,
    )
    .ok()?;
    let c = autocov(&spec, 1.0, n.saturating_sub(1)).ok()?;
    if !(c[0] > 0.0) {
        return None;
    }
    let mut phi = vec![0.0; n];
    let mut prev = vec![0.0; n];
    let mut v = c[0];
    let mut sum_log_v = 0.0;
    let mut sum_sq = 0.0;
    for t in 0..n {
        // prediction of x_t from x_{t-1}, ..., x_0 with coefficients phi[1..=t]
        let pred: f64 = (1..=t).map(|j| phi[j] * series[t - j]).sum();
        let e = series[t] - pred;
        if !(v > 0.0) {
            return None;
        }
        sum_log_v += v.ln();
        sum_sq += e * e / v;
        if t + 1 < n {
            let k = t + 1;
            let num = c[k] - (1..k).map(|j| phi[j] * c[k - j]).sum::<f64>();
            let pkk = num / v;
            prev[..k].copy_from_slice(&phi[..k]);
            for j in 1..k {
                phi[j] = prev[j] - pkk * prev[k - j];
            }
            phi[k] = pkk;
            v *= 1.0 - pkk * pkk;
        }
    }
    let nf = n as f64;
    let s2 = sum_sq / nf;
    if !(s2 > 0.0) {
        return None;
    }
    Some(
        0.5 * nf * s2.ln() + 0.5 * sum_log_v + 0.5 * nf * (1.0 + (2.0 * std::f64::consts::PI).ln()),
    )
}

/// AIC/BIC of one ARMA order fitted to a residual series.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    pub p: usize,
    pub q: usize,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub neg_log_lik: f64,
    pub aic: f64,
    pub bic: f64,
}

/// Fits ARMA(p, q) for every `p, q ≤ max_order` to a (demeaned) residual
/// series and reports AIC and BIC. Single-parameter orders are scanned on
/// the `eta` grid and refined; higher orders use Nelder–Mead started from
/// the best lower-order fit.
pub fn arma_order_report(residuals: &[f64], max_order: usize) -> Result<Vec<OrderFit>> {
    if residuals.len() < 10 {
        return Err(Error::InvalidArgument(
            "ARMA order scan needs at least 10 observations".into(),
        ));
    }
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let x: Vec<f64> = residuals.iter().map(|r| r - mean).collect();
    let n = x.len() as f64;
    let mut fits: Vec<OrderFit> = Vec::new();
    for p in 0..=max_order {
        for q in 0..=max_order {
            let dim = p + q;
            let objective = |theta: &[f64]| {
                arma_profile_nll(&x, &theta[..p], &theta[p..]).unwrap_or(f64::INFINITY)
            };
            let (params, nll) = if dim == 0 {
                (vec![], objective(&[]))
            } else if dim == 1 {
                let grid = default_eta_grid();
                let best = grid
                    .iter()
                    .map(|&e| (e, objective(&[e])))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                nelder_mead(&objective, vec![best.0], 0.01, 400)
            } else {
                // start from the best nested fit padded with zeros
                let mut start = vec![0.0; dim];
                if let Some(f) = fits
                    .iter()
                    .filter(|f| f.p <= p && f.q <= q && f.p + f.q < dim)
                    .min_by(|a, b| a.neg_log_lik.total_cmp(&b.neg_log_lik))
                {
                    start[..f.p].copy_from_slice(&f.ar);
                    start[p..p + f.q].copy_from_slice(&f.ma);
                }
                nelder_mead(&objective, start, 0.1, 2000)
            };
            if !nll.is_finite() {
                return Err(Error::Numeric(format!(
                    "ARMA({p},{q}) likelihood not finite"
                )));
            }
            let n_par = (dim + 1) as f64;
            fits.push(OrderFit {
                p,
                q,
                ar: params[..p].to_vec(),
                ma: params[p..].to_vec(),
                neg_log_lik: nll,
                aic: 2.0 * nll + 2.0 * n_par,
                bic: 2.0 * nll + n_par * n.ln(),
            });
        }
    }
    Ok(fits)
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    start: Vec<f64>,
    step: f64,
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let dim = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let f0 = f(&start);
    simplex.push((start.clone(), f0));
    for i in 0..dim {
        let mut p = start.clone();
        p[i] += step;
        let fp = f(&p);
        simplex.push((p, fp));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[dim].1 - simplex[0].1;
        if spread.abs() < 1e-10 && spread.is_finite() {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|s| s.0[j]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = f(&xe);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            let xc = along(-0.5);
            let fc = f(&xc);
            if fc < worst.1 {
                simplex[dim] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = best
                        .iter()
                        .zip(&s.0)
                        .map(|(b, x)| b + 0.5 * (x - b))
                        .collect();
                    let fp = f(&p);
                    *s = (p, fp);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}
