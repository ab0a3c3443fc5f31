//! Gaussian-process regridding engine.
//!
//! Stationary exponential covariance `rho·exp(−d/theta)` with a constant
//! mean, maximum-likelihood fitting over independent daily replicates,
//! kriging onto a target grid and exact conditional simulation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{pairwise_distances, DistanceMatrix, Grid};
use crate::io::Float;
use crate::linalg::{chol_logdet, cholesky_escalating, psd_factor, psd_factor_scaled, symmetrize};
use crate::rng::{self, tag};

/// Jitter relative to the sill used by [`fit_mle`].
pub const DEFAULT_JITTER_REL: f64 = 1e-8;
/// Sill floor for degenerate (constant) inputs.
pub const RHO_FLOOR: f64 = 1e-12;
/// Log-spaced candidate ranges scanned before golden-section refinement.
pub const THETA_GRID_POINTS: usize = 60;
/// Relative tolerance on the range after refinement.
pub const THETA_REL_TOL: f64 = 1e-4;
/// Eigenvalues of a conditional covariance below `-tol·trace` are rejected
/// when building a simulation factor. A regridder measures the trace against
/// the prior trace `n·rho` at least.
pub const SIM_NEG_EIG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovParams {
    pub rho: f64,
    pub theta: f64,
    pub mu: f64,
    pub jitter: f64,
}

impl CovParams {
    pub fn new(rho: f64, theta: f64, mu: f64, jitter: f64) -> Result<Self> {
        let p = Self {
            rho,
            theta,
            mu,
            jitter,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sill must be positive, got {}",
                self.rho
            )));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "range must be positive, got {}",
                self.theta
            )));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "mean must be finite, got {}",
                self.mu
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "jitter must be non-negative, got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    pub fn with_jitter(self, jitter: f64) -> Self {
        Self { jitter, ..self }
    }
}

/// `rho=<f> theta_km=<f> mu=<f> jitter=<f>`
impl fmt::Display for CovParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rho={} theta_km={} mu={} jitter={}",
            Float(self.rho),
            Float(self.theta),
            Float(self.mu),
            Float(self.jitter)
        )
    }
}

impl FromStr for CovParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut vals: [Option<f64>; 4] = [None; 4];
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("malformed covariance token '{tok}'")))?;
            let slot = match k {
                "rho" => 0,
                "theta_km" => 1,
                "mu" => 2,
                "jitter" => 3,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown covariance key '{other}'"
                    )))
                }
            };
            let parsed: f64 = v
                .parse()
                .map_err(|_| Error::Validation(format!("bad value for '{k}': '{v}'")))?;
            vals[slot] = Some(parsed);
        }
        let get = |i: usize, name: &str| {
            vals[i].ok_or_else(|| Error::Validation(format!("missing covariance key '{name}'")))
        };
        CovParams::new(
            get(0, "rho")?,
            get(1, "theta_km")?,
            get(2, "mu")?,
            get(3, "jitter")?,
        )
        .map_err(|e| Error::Validation(e.to_string()))
    }
}

/// Kriging mean and conditional covariance on the target grid for one day.
#[derive(Debug, Clone)]
pub struct ConditionalLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub day_index: usize,
}

/// Exponential covariance. The jitter goes on the diagonal only when `d` is
/// square with an all-zero diagonal, i.e. a grid against itself.
pub fn exp_cov(d: &DistanceMatrix, p: &CovParams) -> DMatrix<f64> {
    let e = d.entries();
    let mut k = e.map(|dij| p.rho * (-dij / p.theta).exp());
    if e.nrows() == e.ncols() && (0..e.nrows()).all(|i| e[(i, i)] == 0.0) {
        for i in 0..e.nrows() {
            k[(i, i)] += p.jitter;
        }
    }
    k
}

fn check_fields(native: &Grid, fields: &DMatrix<f64>) -> Result<()> {
    if fields.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "at least one day of data is required".into(),
        ));
    }
    if fields.ncols() != native.len() {
        return Err(Error::InvalidArgument(format!(
            "field has {} locations but grid '{}' has {}",
            fields.ncols(),
            native.id(),
            native.len()
        )));
    }
    if fields.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite field value".into()));
    }
    Ok(())
}

/// Negative log-likelihood of independent daily replicates.
///
/// `fields` is days × locations on the transformed scale.
pub fn neg_log_lik(p: &CovParams, native: &Grid, fields: &DMatrix<f64>) -> Result<f64> {
    p.validate()?;
    check_fields(native, fields)?;
    let d = pairwise_distances(native, native)?;
    let k = exp_cov(&d, p);
    let (ch, _) = cholesky_escalating(&k, p.jitter)?;
    let t = fields.nrows() as f64;
    let n = native.len() as f64;
    let mut centered = fields.transpose();
    centered.add_scalar_mut(-p.mu);
    let z = ch
        .l_dirty()
        .solve_lower_triangular(&centered)
        .ok_or_else(|| Error::IllConditioned("triangular solve failed in likelihood".into()))?;
    let quad = z.norm_squared();
    Ok(0.5 * t * chol_logdet(&ch) + 0.5 * quad + 0.5 * t * n * (2.0 * PI).ln())
}

/// Result of [`fit_mle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleFit {
    pub params: CovParams,
    pub neg_log_lik: f64,
    /// Profile sill hit the floor (constant input).
    pub degenerate: bool,
}

/// Sufficient statistics for the profile likelihood of replicate fields.
struct ProfileData {
    dist: DistanceMatrix,
    days: usize,
    /// Grand mean subtracted from the data before forming the statistics.
    shift: f64,
    /// Sum of centred day vectors.
    sum: DVector<f64>,
    /// `B` with `B Bᵀ = Σ_t c_t c_tᵀ` for centred day vectors `c_t`.
    scatter_root: DMatrix<f64>,
    jitter_rel: f64,
}

struct ProfileEval {
    nll: f64,
    rho: f64,
    mu: f64,
}

impl ProfileData {
    fn new(native: &Grid, fields: &DMatrix<f64>, jitter_rel: f64) -> Result<Self> {
        let days = fields.nrows();
        let n = fields.ncols();
        let shift = fields.mean();
        let mut c = fields.transpose();
        c.add_scalar_mut(-shift);
        let sum = c.column_sum();
        let scatter_root = if days <= n {
            c
        } else {
            let s = &c * c.transpose();
            psd_factor(&s, 1e-8)?
        };
        Ok(Self {
            dist: pairwise_distances(native, native)?,
            days,
            shift,
            sum,
            scatter_root,
            jitter_rel,
        })
    }

    fn eval(&self, theta: f64) -> Option<ProfileEval> {
        let n = self.dist.nrows();
        let unit = CovParams {
            rho: 1.0,
            theta,
            mu: 0.0,
            jitter: self.jitter_rel,
        };
        let r = exp_cov(&self.dist, &unit);
        let (ch, _) = cholesky_escalating(&r, self.jitter_rel).ok()?;
        let logdet = chol_logdet(&ch);
        let ones = DVector::from_element(n, 1.0);
        let rinv_one = ch.solve(&ones);
        let a = ones.dot(&rinv_one);
        let b = self.sum.dot(&rinv_one);
        let t = self.days as f64;
        let mu_c = b / (t * a);
        let w = ch.l_dirty().solve_lower_triangular(&self.scatter_root)?;
        let tr = w.norm_squared();
        let q = (tr - 2.0 * mu_c * b + t * mu_c * mu_c * a).max(0.0);
        let nn = n as f64;
        let rho = (q / (t * nn)).max(RHO_FLOOR);
        // K = rho·R, so log det K = n log rho + log det R and the quadratic
        // term collapses to q / rho.
        let nll =
            0.5 * t * (nn * rho.ln() + logdet) + 0.5 * q / rho + 0.5 * t * nn * (2.0 * PI).ln();
        nll.is_finite().then_some(ProfileEval {
            nll,
            rho,
            mu: self.shift + mu_c,
        })
    }
}

/// Maximum-likelihood covariance parameters by profile likelihood.
///
/// For a candidate range the mean is the GLS estimate and the sill its
/// closed-form profile value. The range is scanned on a log grid over
/// `[0.1·min nonzero distance, 10·max distance]` and refined by golden
/// section on `log(theta)`. Jitter is fixed at `1e-8·rho`.
pub fn fit_mle(native: &Grid, fields: &DMatrix<f64>) -> Result<MleFit> {
    fit_mle_with_jitter(native, fields, DEFAULT_JITTER_REL)
}

pub fn fit_mle_with_jitter(
    native: &Grid,
    fields: &DMatrix<f64>,
    jitter_rel: f64,
) -> Result<MleFit> {
    if native.len() < 2 {
        return Err(Error::InvalidArgument(
            "maximum likelihood needs at least 2 locations".into(),
        ));
    }
    check_fields(native, fields)?;
    let data = ProfileData::new(native, fields, jitter_rel)?;
    let dmin = data
        .dist
        .min_nonzero()
        .ok_or_else(|| Error::InvalidArgument("all locations coincide".into()))?;
    let lo = (0.1 * dmin).ln();
    let hi = (10.0 * data.dist.max()).ln();

    let objective = |log_theta: f64| data.eval(log_theta.exp()).map_or(f64::INFINITY, |e| e.nll);

    let m = THETA_GRID_POINTS;
    let grid: Vec<f64> = (0..m)
        .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&g| objective(g)).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if !values[best].is_finite() {
        return Err(Error::IllConditioned(
            "likelihood could not be evaluated at any candidate range".into(),
        ));
    }
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(m - 1)];
    let (mut log_theta, mut f_best) = golden_section(&objective, a, b, THETA_REL_TOL);
    if values[best] < f_best {
        log_theta = grid[best];
        f_best = values[best];
    }
    let theta = log_theta.exp();
    let e = data
        .eval(theta)
        .ok_or_else(|| Error::IllConditioned("profile likelihood failed at optimum".into()))?;
    let degenerate = e.rho <= RHO_FLOOR;
    if degenerate {
        log::warn!("degenerate field on grid '{}': sill at floor", native.id());
    }
    Ok(MleFit {
        params: CovParams {
            rho: e.rho,
            theta,
            mu: e.mu,
            jitter: jitter_rel * e.rho,
        },
        neg_log_lik: f_best,
        degenerate,
    })
}

/// Golden-section minimisation on `[a, b]`, stopping when the bracket is
/// narrower than `tol` (absolute in the argument, which is `log(theta)` here,
/// so a relative tolerance on `theta`).
fn golden_section<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Precomputed kriging system for one covariance model and a fixed pair of
/// grids. Reused across days: only the mean depends on the observed values.
#[derive(Debug, Clone)]
pub struct Regridder {
    params: CovParams,
    /// Kriging weights `K_ts K_ss⁻¹`, target × native.
    weights: DMatrix<f64>,
    cov: DMatrix<f64>,
    n_native: usize,
}

impl Regridder {
    pub fn new(p: &CovParams, native: &Grid, target: &Grid) -> Result<Self> {
        p.validate()?;
        let k_ss = exp_cov(&pairwise_distances(native, native)?, p);
        let k_st = exp_cov(&pairwise_distances(native, target)?, p);
        let no_jitter = p.with_jitter(0.0);
        let k_tt = exp_cov(&pairwise_distances(target, target)?, &no_jitter);
        let (ch, extra) = cholesky_escalating(&k_ss, p.jitter)?;
        if extra > 0.0 {
            log::warn!(
                "kriging system on '{}' needed extra jitter {extra:e}",
                native.id()
            );
        }
        let l = ch.l_dirty();
        let v = l
            .solve_lower_triangular(&k_st)
            .ok_or_else(|| Error::IllConditioned("kriging solve failed".into()))?;
        let weights = l
            .tr_solve_lower_triangular(&v)
            .ok_or_else(|| Error::IllConditioned("kriging solve failed".into()))?
            .transpose();
        let mut cov = k_tt - v.transpose() * &v;
        symmetrize(&mut cov);
        Ok(Self {
            params: *p,
            weights,
            cov,
            n_native: native.len(),
        })
    }

    pub fn params(&self) -> &CovParams {
        &self.params
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Conditional covariance on the target grid; identical for every day.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn mean(&self, native_values: &[f64]) -> Result<DVector<f64>> {
        if native_values.len() != self.n_native {
            return Err(Error::InvalidArgument(format!(
                "expected {} native values, got {}",
                self.n_native,
                native_values.len()
            )));
        }
        let mu = self.params.mu;
        let resid = DVector::from_iterator(self.n_native, native_values.iter().map(|v| v - mu));
        let mut m = &self.weights * resid;
        m.add_scalar_mut(mu);
        Ok(m)
    }

    pub fn law(&self, native_values: &[f64], day_index: usize) -> Result<ConditionalLaw> {
        Ok(ConditionalLaw {
            mean: self.mean(native_values)?,
            cov: self.cov.clone(),
            day_index,
        })
    }

    /// Square-root factor of the conditional covariance for simulation.
    pub fn sim_factor(&self) -> Result<DMatrix<f64>> {
        let prior_trace = self.params.rho * self.cov.nrows() as f64;
        psd_factor_scaled(&self.cov, SIM_NEG_EIG_TOL, prior_trace)
    }
}

/// Kriging mean and conditional covariance for one day.
pub fn conditional_law(
    p: &CovParams,
    native: &Grid,
    target: &Grid,
    native_values: &[f64],
) -> Result<ConditionalLaw> {
    Regridder::new(p, native, target)?.law(native_values, 0)
}

/// One draw `mean + factor·z` with `z` standard normal from `rng`.
pub fn draw_with_factor(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    rng: &mut rng::StreamRng,
) -> DVector<f64> {
    let z = DVector::from_iterator(
        factor.ncols(),
        (0..factor.ncols()).map(|_| StandardNormal.sample(rng)),
    );
    mean + factor * z
}

/// Exact conditional simulation: `n_draws` × target matrix. Draw `r` uses
/// the stream keyed by `(seed, day_index, r)`.
pub fn conditional_simulate(
    law: &ConditionalLaw,
    n_draws: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("n_draws must be at least 1".into()));
    }
    let n = law.mean.len();
    if law.cov.nrows() != n || law.cov.ncols() != n {
        return Err(Error::InvalidArgument(
            "law mean/covariance size mismatch".into(),
        ));
    }
    let factor = psd_factor(&law.cov, SIM_NEG_EIG_TOL)?;
    let mut out = DMatrix::zeros(n_draws, n);
    for r in 0..n_draws {
        let mut rng = rng::stream(seed, &[tag::COND_SIM, law.day_index as u64, r as u64]);
        let x = draw_with_factor(&law.mean, &factor, &mut rng);
        out.row_mut(r).copy_from(&x.transpose());
    }
    Ok(out)
}

/// Unconditional draws of independent daily fields: days × locations.
pub fn simulate_fields(p: &CovParams, grid: &Grid, days: usize, seed: u64) -> Result<DMatrix<f64>> {
    let k = exp_cov(&pairwise_distances(grid, grid)?, p);
    let (ch, _) = cholesky_escalating(&k, p.jitter).map_err(|e| {
        Error::Config(format!(
            "cannot factor field covariance on '{}': {e}",
            grid.id()
        ))
    })?;
    let l = ch.l();
    let mean = DVector::from_element(grid.len(), p.mu);
    let mut out = DMatrix::zeros(days, grid.len());
    for t in 0..days {
        let mut rng = rng::stream(seed, &[tag::SYNTH_FIELD, t as u64]);
        let x = draw_with_factor(&mean, &l, &mut rng);
        out.row_mut(t).copy_from(&x.transpose());
    }
    Ok(out)
}
