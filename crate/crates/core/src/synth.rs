//! Synthetic studies with known truth.
//!
//! Each covariate is a GP draw made jointly on its native grid and the
//! target grid, so the visible native values and the hidden target-grid
//! truth come from one realization. The response is built on the target
//! grid from the hidden truth with known coefficients and noise.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, Field};
use crate::error::{Error, Result};
use crate::gp::{exp_cov, CovParams};
use crate::grid::{make_regular_grid, pairwise_distances, transform_grid, Grid, DUPLICATE_TOL_KM};
use crate::linalg::cholesky_escalating;
use crate::pipeline::{analyze, fit_model, seasonal_block, AnalysisMode, StudyConfig};
use crate::rng::{stream, tag};
use crate::transform::{TransformSpec, DEFAULT_NU_QUANTILE};

/// Relative jitter for the joint generating covariance.
pub const GEN_JITTER_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct NativeSpec {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub rotation: f64,
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTruth {
    pub name: String,
    pub native: NativeSpec,
    pub params: CovParams,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthConfig {
    pub response_name: String,
    pub target_nx: usize,
    pub target_ny: usize,
    pub target_spacing: f64,
    pub target_origin: [f64; 2],
    pub covariates: Vec<CovariateTruth>,
    pub beta0: f64,
    /// Seasonal coefficients: empty, or (sin, cos) of day of year.
    pub gamma: Vec<f64>,
    pub noise_sd: f64,
    pub days_per_month: u32,
    pub months: Vec<u32>,
    pub years: Vec<i32>,
    pub master_seed: u64,
}

impl TruthConfig {
    /// Desk-scale default: 8×8 target at 20 km, three covariates on coarser
    /// rotated and offset native grids, 4 months × 12 years × 28 days.
    pub fn default_study() -> Self {
        let params = CovParams::new(0.25, 150.0, 5.5, 0.0).expect("valid");
        let native = |rotation: f64, offset: [f64; 2]| NativeSpec {
            nx: 7,
            ny: 7,
            spacing: 30.0,
            rotation,
            offset,
        };
        Self {
            response_name: "response".into(),
            target_nx: 8,
            target_ny: 8,
            target_spacing: 20.0,
            target_origin: [0.0, 0.0],
            covariates: vec![
                CovariateTruth {
                    name: "rcm1".into(),
                    native: native(0.0, [7.0, -5.0]),
                    params,
                    beta: 0.6,
                },
                CovariateTruth {
                    name: "rcm2".into(),
                    native: native(0.2, [-6.0, 9.0]),
                    params,
                    beta: 0.4,
                },
                CovariateTruth {
                    name: "rcm3".into(),
                    native: native(-0.15, [3.0, 4.0]),
                    params,
                    beta: 0.0,
                },
            ],
            beta0: 0.5,
            gamma: vec![],
            noise_sd: 0.3,
            days_per_month: 28,
            months: vec![2, 5, 8, 11],
            years: (1998..=2009).collect(),
            master_seed: 1234,
        }
    }

    /// Same as the default but every native grid has the target spacing.
    pub fn dense_study() -> Self {
        let mut c = Self::default_study();
        for cov in &mut c.covariates {
            cov.native.spacing = c.target_spacing;
            cov.native.nx = 10;
            cov.native.ny = 10;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.covariates.is_empty() {
            return bad("at least one covariate is required".into());
        }
        if self.target_nx == 0 || self.target_ny == 0 || !(self.target_spacing > 0.0) {
            return bad("target grid needs positive counts and spacing".into());
        }
        for c in &self.covariates {
            c.params
                .validate()
                .map_err(|e| Error::Config(format!("covariate '{}': {e}", c.name)))?;
            if c.native.nx == 0 || c.native.ny == 0 || !(c.native.spacing > 0.0) {
                return bad(format!("covariate '{}': bad native grid", c.name));
            }
            if !c.beta.is_finite() {
                return bad(format!("covariate '{}': non-finite beta", c.name));
            }
        }
        let mut names: Vec<&str> = self.covariates.iter().map(|c| c.name.as_str()).collect();
        names.push(&self.response_name);
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("field names must be unique".into());
        }
        if !(self.gamma.is_empty() || self.gamma.len() == 2) {
            return bad("gamma must have 0 or 2 entries".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be non-negative".into());
        }
        if !(10..=28).contains(&self.days_per_month) {
            return bad(format!(
                "days_per_month must lie in 10..=28, got {}",
                self.days_per_month
            ));
        }
        if self.months.is_empty() || self.months.iter().any(|m| !(1..=12).contains(m)) {
            return bad("months must be nonempty and within 1..=12".into());
        }
        if self.years.is_empty() {
            return bad("at least one year is required".into());
        }
        let mut m = self.months.clone();
        m.sort();
        m.dedup();
        let mut y = self.years.clone();
        y.sort();
        y.dedup();
        if m.len() != self.months.len() || y.len() != self.years.len() {
            return bad("duplicate month or year".into());
        }
        Ok(())
    }

    pub fn target_grid(&self) -> Result<Grid> {
        Ok(make_regular_grid(
            self.target_origin,
            self.target_spacing,
            self.target_nx,
            self.target_ny,
        )?
        .relabeled("target"))
    }

    /// Native grid centred on the target centroid, then rotated and offset.
    pub fn native_grid(&self, c: &CovariateTruth) -> Result<Grid> {
        let t = self.target_grid()?;
        let centre = t.centroid();
        let n = &c.native;
        let origin = [
            centre[0] - (n.nx - 1) as f64 * n.spacing / 2.0,
            centre[1] - (n.ny - 1) as f64 * n.spacing / 2.0,
        ];
        let g = make_regular_grid(origin, n.spacing, n.nx, n.ny)?.relabeled(c.name.clone());
        if n.rotation == 0.0 && n.offset == [0.0, 0.0] {
            Ok(g)
        } else {
            Ok(transform_grid(&g, n.rotation, n.offset))
        }
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut out: Vec<NaiveDate> = self
            .years
            .iter()
            .flat_map(|&y| {
                self.months.iter().flat_map(move |&m| {
                    (1..=self.days_per_month)
                        .map(move |d| NaiveDate::from_ymd_opt(y, m, d).expect("valid day"))
                })
            })
            .collect();
        out.sort();
        out
    }

    /// Breakpoint placing `q` of a N(m, s²) latent variable on the log branch.
    fn quantile_nu(m: f64, s: f64, q: f64) -> f64 {
        let z = Normal::new(0.0, 1.0)
            .expect("standard normal")
            .inverse_cdf(q);
        (m + z * s).exp()
    }

    /// Generating breakpoint of covariate `k`.
    pub fn covariate_nu(&self, k: usize) -> f64 {
        let p = &self.covariates[k].params;
        Self::quantile_nu(p.mu, p.rho.sqrt(), DEFAULT_NU_QUANTILE)
    }

    /// Generating breakpoint of the response, from its marginal law.
    pub fn response_nu(&self) -> f64 {
        let m = self.beta0
            + self
                .covariates
                .iter()
                .map(|c| c.beta * c.params.mu)
                .sum::<f64>();
        let v = self
            .covariates
            .iter()
            .map(|c| c.beta * c.beta * c.params.rho)
            .sum::<f64>()
            + self.noise_sd * self.noise_sd;
        Self::quantile_nu(m, v.sqrt(), DEFAULT_NU_QUANTILE)
    }
}

/// A generated study. `dataset` is what the analysis sees; the hidden
/// target-grid covariates are kept apart.
#[derive(Debug, Clone)]
pub struct SyntheticStudy {
    pub dataset: Dataset,
    /// Raw-scale covariate truth on the target grid, one field per covariate.
    pub hidden: Vec<Field>,
    /// Latent (GP-scale) covariate truth on the target grid: days × targets.
    pub hidden_latent: Vec<DMatrix<f64>>,
    pub truth: TruthConfig,
}

/// Target points first, then native points not coinciding with a target
/// point. Returns the union and each native point's index in it.
fn union_points(target: &Grid, native: &Grid) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut pts: Vec<[f64; 2]> = target.points().to_vec();
    let mut idx = Vec::with_capacity(native.len());
    for p in native.points() {
        let found = target
            .points()
            .iter()
            .position(|q| (p[0] - q[0]).hypot(p[1] - q[1]) <= DUPLICATE_TOL_KM);
        match found {
            Some(i) => idx.push(i),
            None => {
                idx.push(pts.len());
                pts.push(*p);
            }
        }
    }
    (pts, idx)
}

pub fn generate_study(cfg: &TruthConfig) -> Result<SyntheticStudy> {
    cfg.validate()?;
    let target = cfg.target_grid()?;
    let dates = cfg.dates();
    let days = dates.len();
    let n_t = target.len();

    let per_cov = cfg
        .covariates
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let native = cfg.native_grid(c)?;
            let (pts, native_idx) = union_points(&target, &native);
            let union = Grid::new("union", pts)?;
            let gen = c.params.with_jitter(GEN_JITTER_REL * c.params.rho);
            let cov = exp_cov(&pairwise_distances(&union, &union)?, &gen);
            let (ch, _) = cholesky_escalating(&cov, gen.jitter).map_err(|e| {
                Error::Config(format!(
                    "covariate '{}': joint native/target covariance cannot be factored ({e}); grids too dense or overlapping",
                    c.name
                ))
            })?;
            let l = ch.l();
            let n_u = union.len();
            let mut native_vals = DMatrix::zeros(days, native.len());
            let mut latent = DMatrix::zeros(days, n_t);
            for t in 0..days {
                let mut r = stream(cfg.master_seed, &[tag::SYNTH_FIELD, k as u64, t as u64]);
                let z = DVector::from_iterator(n_u, (0..n_u).map(|_| StandardNormal.sample(&mut r)));
                let mut x = &l * z;
                x.add_scalar_mut(c.params.mu);
                for i in 0..n_t {
                    latent[(t, i)] = x[i];
                }
                for (j, &u) in native_idx.iter().enumerate() {
                    native_vals[(t, j)] = x[u];
                }
            }
            Ok((native, native_vals, latent))
        })
        .collect::<Result<Vec<_>>>()?;

    let season = seasonal_block(&dates, !cfg.gamma.is_empty());
    let mut latent_y = DMatrix::from_element(days, n_t, cfg.beta0);
    for (c, (_, _, latent)) in cfg.covariates.iter().zip(&per_cov) {
        latent_y += latent * c.beta;
    }
    for t in 0..days {
        let s: f64 = cfg
            .gamma
            .iter()
            .enumerate()
            .map(|(j, g)| g * season[(t, j)])
            .sum();
        let mut r = stream(cfg.master_seed, &[tag::SYNTH_NOISE, t as u64]);
        for i in 0..n_t {
            let e: f64 = StandardNormal.sample(&mut r);
            latent_y[(t, i)] += s + cfg.noise_sd * e;
        }
    }

    let raw = |m: &DMatrix<f64>, nu: f64| -> Result<DMatrix<f64>> {
        let spec = TransformSpec::new(nu)?;
        Ok(m.map(|z| spec.gamma_inverse(z)))
    };
    let response = Field::new(
        cfg.response_name.clone(),
        target.clone(),
        dates.clone(),
        raw(&latent_y, cfg.response_nu())?,
    )?;
    let mut covariates = Vec::new();
    let mut hidden = Vec::new();
    let mut hidden_latent = Vec::new();
    for (k, (c, (native, native_vals, latent))) in cfg.covariates.iter().zip(per_cov).enumerate() {
        let nu = cfg.covariate_nu(k);
        covariates.push(Field::new(
            c.name.clone(),
            native,
            dates.clone(),
            raw(&native_vals, nu)?,
        )?);
        hidden.push(Field::new(
            c.name.clone(),
            target.clone(),
            dates.clone(),
            raw(&latent, nu)?,
        )?);
        hidden_latent.push(latent);
    }
    Ok(SyntheticStudy {
        dataset: Dataset::new(response, covariates)?,
        hidden,
        hidden_latent,
        truth: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationRow {
    pub month: u32,
    pub location_id: String,
    pub coef_name: String,
    pub truth: f64,
    pub naive_est: f64,
    pub naive_se: f64,
    pub naive_lo: f64,
    pub naive_hi: f64,
    pub bayes_median: f64,
    pub bayes_lo: f64,
    pub bayes_hi: f64,
}

impl AttenuationRow {
    pub fn truth_in_naive(&self) -> bool {
        self.naive_lo <= self.truth && self.truth <= self.naive_hi
    }

    pub fn truth_in_bayes(&self) -> bool {
        self.bayes_lo <= self.truth && self.truth <= self.bayes_hi
    }

    pub fn naive_in_bayes(&self) -> bool {
        self.bayes_lo <= self.naive_est && self.naive_est <= self.bayes_hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationReport {
    pub rows: Vec<AttenuationRow>,
}

impl AttenuationReport {
    fn fraction(&self, f: impl Fn(&AttenuationRow) -> bool) -> f64 {
        self.rows.iter().filter(|r| f(r)).count() as f64 / self.rows.len().max(1) as f64
    }

    pub fn frac_truth_in_naive(&self) -> f64 {
        self.fraction(AttenuationRow::truth_in_naive)
    }

    pub fn frac_truth_in_bayes(&self) -> f64 {
        self.fraction(AttenuationRow::truth_in_bayes)
    }

    pub fn frac_naive_in_bayes(&self) -> f64 {
        self.fraction(AttenuationRow::naive_in_bayes)
    }
}

/// Generates a study, runs both paths and compares every coefficient with
/// its true value. Dropped covariates fold into the intercept's truth.
pub fn attenuation_benchmark(truth: &TruthConfig, cfg: &StudyConfig) -> Result<AttenuationReport> {
    if truth
        .covariates
        .iter()
        .any(|c| c.native.spacing < 2.0 * truth.target_spacing)
    {
        log::warn!(
            "attenuation benchmark run with a native grid finer than twice the target spacing"
        );
    }
    let study = generate_study(truth)?;
    let ds = &study.dataset;
    let model = fit_model(ds, cfg)?;
    let analysis = analyze(ds, &model, AnalysisMode::Both, false)?;
    let mut rows = Vec::new();
    for ma in &analysis.months {
        let mm = model
            .month(ma.month)
            .expect("analysed month is in the model");
        let mut truth_by_name: Vec<(String, f64)> = Vec::new();
        let dropped_mean: f64 = truth
            .covariates
            .iter()
            .zip(&mm.covariates)
            .filter(|(_, m)| !m.retained)
            .map(|(c, _)| c.beta * c.params.mu)
            .sum();
        truth_by_name.push((
            crate::pipeline::INTERCEPT.into(),
            truth.beta0 + dropped_mean,
        ));
        for (c, m) in truth.covariates.iter().zip(&mm.covariates) {
            if m.retained {
                truth_by_name.push((c.name.clone(), c.beta));
            }
        }
        if cfg.seasonal {
            let g = if truth.gamma.is_empty() {
                vec![0.0, 0.0]
            } else {
                truth.gamma.clone()
            };
            for (name, v) in crate::pipeline::SEASON_NAMES.iter().zip(g) {
                truth_by_name.push((name.to_string(), v));
            }
        }
        for r in &ma.results {
            let naive = r.naive.as_ref().expect("both paths ran");
            let bayes = r.bayes.as_ref().expect("both paths ran");
            for (j, name) in r.coef_names.iter().enumerate() {
                let t = truth_by_name
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| *v)
                    .unwrap_or(0.0);
                rows.push(AttenuationRow {
                    month: ma.month,
                    location_id: r.location_id.clone(),
                    coef_name: name.clone(),
                    truth: t,
                    naive_est: naive[j].estimate,
                    naive_se: naive[j].std_error,
                    naive_lo: naive[j].lo,
                    naive_hi: naive[j].hi,
                    bayes_median: bayes[j].median,
                    bayes_lo: bayes[j].lo,
                    bayes_hi: bayes[j].hi,
                });
            }
        }
    }
    Ok(AttenuationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::gamma;

    fn small(seed: u64) -> TruthConfig {
        let mut c = TruthConfig::default_study();
        c.target_nx = 4;
        c.target_ny = 4;
        c.months = vec![2];
        c.years = vec![2000, 2001];
        c.days_per_month = 10;
        c.master_seed = seed;
        for cov in &mut c.covariates {
            cov.native.nx = 4;
            cov.native.ny = 4;
        }
        c
    }

    #[test]
    fn default_inventory() {
        let c = TruthConfig::default_study();
        c.validate().unwrap();
        assert_eq!(c.target_grid().unwrap().len(), 64);
        assert_eq!(c.dates().len(), 4 * 12 * 28);
        assert_eq!(c.covariates.len(), 3);
        TruthConfig::dense_study().validate().unwrap();
    }

    #[test]
    fn reproducible() {
        let a = generate_study(&small(5)).unwrap();
        let b = generate_study(&small(5)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate_study(&small(6)).unwrap();
        assert_ne!(a.dataset.response.values(), c.dataset.response.values());
    }

    #[test]
    fn noiseless_identity() {
        let mut c = small(1);
        c.covariates.truncate(1);
        c.covariates[0].beta = 1.0;
        c.covariates[0].native = NativeSpec {
            nx: c.target_nx,
            ny: c.target_ny,
            spacing: c.target_spacing,
            rotation: 0.0,
            offset: [0.0, 0.0],
        };
        c.beta0 = 0.0;
        c.noise_sd = 0.0;
        let s = generate_study(&c).unwrap();
        assert_eq!(
            s.dataset.response.values(),
            s.dataset.covariates[0].values()
        );
        assert_eq!(s.dataset.response.values(), s.hidden[0].values());
    }

    #[test]
    fn latent_matches_hidden_raw() {
        let s = generate_study(&small(2)).unwrap();
        let spec = TransformSpec::new(s.truth.covariate_nu(0)).unwrap();
        let raw = s.hidden[0].values();
        for (r, z) in raw.iter().zip(s.hidden_latent[0].iter()) {
            assert!((gamma(*r, &spec).unwrap() - z).abs() < 1e-10);
        }
        assert!(raw.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn breakpoint_is_the_20th_percentile() {
        let c = TruthConfig::default_study();
        let s = generate_study(&TruthConfig {
            months: vec![2],
            years: vec![2000, 2001, 2002],
            ..c
        })
        .unwrap();
        let nu = s.truth.covariate_nu(0);
        let vals = s.hidden[0].values();
        let below = vals.iter().filter(|v| **v <= nu).count() as f64 / vals.len() as f64;
        assert!((below - 0.2).abs() < 0.06, "{below}");
    }

    #[test]
    fn days_are_independent() {
        let mut c = small(3);
        c.target_nx = 15;
        c.target_ny = 15;
        c.target_spacing = 10.0;
        c.covariates[0].params = CovParams::new(1.0, 20.0, 0.0, 0.0).unwrap();
        let s = generate_study(&c).unwrap();
        let z = &s.hidden_latent[0];
        let a = z.row(0).transpose();
        let b = z.row(1).transpose();
        let (ma, mb) = (a.mean(), b.mean());
        let num: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum();
        let den = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
            * b.iter().map(|y| (y - mb).powi(2)).sum::<f64>())
        .sqrt();
        assert!((num / den).abs() < 0.15, "{}", num / den);
    }

    #[test]
    fn variogram_at_range() {
        // Correlation at lag theta along grid rows, averaged over 100 days.
        let mut c = small(4);
        c.target_nx = 15;
        c.target_ny = 15;
        c.target_spacing = 10.0;
        c.months = vec![1, 2, 3, 4, 5];
        c.years = vec![2000, 2001];
        c.covariates.truncate(1);
        c.covariates[0].params = CovParams::new(1.0, 30.0, 2.0, 0.0).unwrap();
        let s = generate_study(&c).unwrap();
        let z = &s.hidden_latent[0];
        assert_eq!(z.nrows(), 100);
        let lag = 3;
        let (mut num, mut n) = (0.0, 0usize);
        for t in 0..z.nrows() {
            for j in 0..15 {
                for i in 0..15 - lag {
                    num += (z[(t, j * 15 + i)] - 2.0) * (z[(t, j * 15 + i + lag)] - 2.0);
                    n += 1;
                }
            }
        }
        let var: f64 = z.iter().map(|v| (v - 2.0).powi(2)).sum::<f64>() / z.len() as f64;
        let corr = num / n as f64 / var;
        assert!((corr - (-1.0f64).exp()).abs() < 0.1, "{corr}");
    }
}
