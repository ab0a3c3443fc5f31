//! Per-month orchestration of the naive and two-step Bayesian analyses.
//!
//! For each month the fields are aligned by date, transformed, and each
//! covariate gets a pooled GP fit on its native grid. The naive path
//! regresses the response on kriging means; the Bayesian path repeats the
//! regression on conditional simulations of the covariates and pools the
//! conjugate posterior draws from every simulation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::arma::{
    eta_grid, BandedWhitener, EtaFamily, EtaPosterior, ETA_GRID_LIMIT, ETA_GRID_POINTS,
};
use crate::bayes::{
    draw_posterior, ols_fit, t_inference, CoefInference, CoefSampler, OlsFit, PosteriorDraw,
    RegressionDesign, SigmaMode,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::{fit_mle_with_jitter, CovParams, Regridder, DEFAULT_JITTER_REL};
use crate::linalg::quantile_sorted;
use crate::rng::{derive_seed, stream, tag};
use crate::transform::{fit_nu, TransformSpec, DEFAULT_NU_QUANTILE};

pub const DEFAULT_MONTHS: [u32; 4] = [2, 5, 8, 11];
pub const INTERCEPT: &str = "intercept";
pub const SEASON_NAMES: [&str; 2] = ["season_sin", "season_cos"];
/// Label mixed into fold seeds so they never collide with analysis seeds.
const FOLD_LABEL: u64 = 0xF01D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResponseScale {
    #[default]
    Transformed,
    Raw,
}

impl fmt::Display for ResponseScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResponseScale::Transformed => "transformed",
            ResponseScale::Raw => "raw",
        })
    }
}

impl FromStr for ResponseScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformed" => Ok(ResponseScale::Transformed),
            "raw" => Ok(ResponseScale::Raw),
            other => Err(Error::Validation(format!(
                "response_scale must be 'transformed' or 'raw', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnalysisMode {
    Naive,
    Bayes,
    #[default]
    Both,
}

impl AnalysisMode {
    pub fn naive(&self) -> bool {
        matches!(self, AnalysisMode::Naive | AnalysisMode::Both)
    }

    pub fn bayes(&self) -> bool {
        matches!(self, AnalysisMode::Bayes | AnalysisMode::Both)
    }
}

impl fmt::Display for AnalysisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnalysisMode::Naive => "naive",
            AnalysisMode::Bayes => "bayes",
            AnalysisMode::Both => "both",
        })
    }
}

impl FromStr for AnalysisMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(AnalysisMode::Naive),
            "bayes" => Ok(AnalysisMode::Bayes),
            "both" => Ok(AnalysisMode::Both),
            other => Err(Error::Validation(format!(
                "mode must be naive, bayes or both, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub months: Vec<u32>,
    /// Empty means every year shared by all sources.
    pub years: Vec<i32>,
    pub n_cond_sims: usize,
    pub n_post_per_sim: usize,
    pub ci_level: f64,
    pub drop_pvalue: f64,
    pub response_scale: ResponseScale,
    pub sigma2_mode: SigmaMode,
    pub arma_family: Option<EtaFamily>,
    pub master_seed: u64,
    pub jitter_rel: f64,
    pub seasonal: bool,
    pub nu_quantile: f64,
    pub eta_grid_points: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            months: DEFAULT_MONTHS.to_vec(),
            years: Vec::new(),
            n_cond_sims: 100,
            n_post_per_sim: 50,
            ci_level: 0.95,
            drop_pvalue: 0.05,
            response_scale: ResponseScale::Transformed,
            sigma2_mode: SigmaMode::Sample,
            arma_family: None,
            master_seed: 20_240_601,
            jitter_rel: DEFAULT_JITTER_REL,
            seasonal: false,
            nu_quantile: DEFAULT_NU_QUANTILE,
            eta_grid_points: ETA_GRID_POINTS,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.months.is_empty() {
            return bad("no months configured".into());
        }
        if let Some(m) = self.months.iter().find(|m| !(1..=12).contains(*m)) {
            return bad(format!("month {m} outside 1..=12"));
        }
        if self.months.iter().collect::<BTreeSet<_>>().len() != self.months.len() {
            return bad("duplicate month".into());
        }
        if self.years.iter().collect::<BTreeSet<_>>().len() != self.years.len() {
            return bad("duplicate year".into());
        }
        if self.n_cond_sims < 1 {
            return bad("n_cond_sims must be at least 1".into());
        }
        if self.n_post_per_sim < 1 {
            return bad("n_post_per_sim must be at least 1".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!(
                "ci_level must lie in (0, 1), got {}",
                self.ci_level
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_pvalue) {
            return bad(format!(
                "drop_pvalue must lie in [0, 1], got {}",
                self.drop_pvalue
            ));
        }
        if !(self.jitter_rel >= 0.0 && self.jitter_rel.is_finite()) {
            return bad(format!(
                "jitter_rel must be non-negative, got {}",
                self.jitter_rel
            ));
        }
        if !(self.nu_quantile > 0.0 && self.nu_quantile < 1.0) {
            return bad(format!(
                "nu_quantile must lie in (0, 1), got {}",
                self.nu_quantile
            ));
        }
        if self.eta_grid_points < 1 {
            return bad("eta_grid_points must be at least 1".into());
        }
        Ok(())
    }

    /// Pooled posterior draws per location.
    pub fn draws_per_location(&self) -> usize {
        self.n_cond_sims * self.n_post_per_sim
    }

    pub fn month_seed(&self, month: u32) -> u64 {
        derive_seed(self.master_seed, &[month as u64])
    }

    pub fn fold_seed(&self, month: u32, test_year: i32) -> u64 {
        derive_seed(
            self.master_seed,
            &[month as u64, FOLD_LABEL, test_year as u64],
        )
    }
}

/// Raw values for one month, aligned across sources: days × locations.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthData {
    pub month: u32,
    pub dates: Vec<NaiveDate>,
    pub response: DMatrix<f64>,
    pub covariates: Vec<DMatrix<f64>>,
}

impl MonthData {
    pub fn years(&self) -> Vec<i32> {
        self.dates
            .iter()
            .map(|d| d.year())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn subset_years(&self, years: &[i32]) -> Result<MonthData> {
        let keep: Vec<usize> = (0..self.dates.len())
            .filter(|&i| years.contains(&self.dates[i].year()))
            .collect();
        if keep.is_empty() {
            return Err(Error::Alignment(format!(
                "month {}: no days in years {years:?}",
                self.month
            )));
        }
        Ok(MonthData {
            month: self.month,
            dates: keep.iter().map(|&i| self.dates[i]).collect(),
            response: self.response.select_rows(&keep),
            covariates: self
                .covariates
                .iter()
                .map(|c| c.select_rows(&keep))
                .collect(),
        })
    }
}

/// Aligns all sources on the days of `month` in `years` (every shared year
/// when empty). Any date present in some sources but not others is an
/// alignment error.
pub fn month_data(ds: &Dataset, month: u32, years: &[i32]) -> Result<MonthData> {
    let in_month = |d: &NaiveDate| d.month() == month;
    let year_sets: Vec<(String, BTreeSet<i32>)> = ds
        .sources()
        .map(|f| {
            let ys = f
                .dates()
                .iter()
                .filter(|d| in_month(d))
                .map(|d| d.year())
                .collect();
            (f.name().to_string(), ys)
        })
        .collect();
    let years: Vec<i32> = if years.is_empty() {
        let mut common = year_sets[0].1.clone();
        for (_, ys) in &year_sets[1..] {
            common = common.intersection(ys).copied().collect();
        }
        common.into_iter().collect()
    } else {
        for (name, ys) in &year_sets {
            let missing: Vec<i32> = years.iter().filter(|y| !ys.contains(y)).copied().collect();
            if !missing.is_empty() {
                return Err(Error::Alignment(format!(
                    "month {month}: source '{name}' has no data for years {missing:?}"
                )));
            }
        }
        years.to_vec()
    };
    if years.is_empty() {
        return Err(Error::Alignment(format!(
            "month {month}: no year is shared by all sources"
        )));
    }
    let date_sets: Vec<BTreeSet<NaiveDate>> = ds
        .sources()
        .map(|f| {
            f.dates()
                .iter()
                .filter(|d| in_month(d) && years.contains(&d.year()))
                .copied()
                .collect()
        })
        .collect();
    let union: BTreeSet<NaiveDate> = date_sets.iter().flatten().copied().collect();
    let names: Vec<&str> = ds.sources().map(|f| f.name()).collect();
    let mut problems = Vec::new();
    for d in &union {
        let missing: Vec<&str> = date_sets
            .iter()
            .zip(&names)
            .filter(|(s, _)| !s.contains(d))
            .map(|(_, n)| *n)
            .collect();
        if !missing.is_empty() {
            problems.push(format!("{d} (missing from {})", missing.join(", ")));
        }
    }
    if !problems.is_empty() {
        let total = problems.len();
        problems.truncate(10);
        return Err(Error::Alignment(format!(
            "month {month}: {total} misaligned dates: {}{}",
            problems.join("; "),
            if total > 10 { "; ..." } else { "" }
        )));
    }
    let dates: Vec<NaiveDate> = union.into_iter().collect();
    if dates.is_empty() {
        return Err(Error::Alignment(format!("month {month}: no data")));
    }
    Ok(MonthData {
        month,
        response: ds.response.rows_for(&dates)?,
        covariates: ds
            .covariates
            .iter()
            .map(|c| c.rows_for(&dates))
            .collect::<Result<_>>()?,
        dates,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateModel {
    pub name: String,
    pub transform: TransformSpec,
    pub params: CovParams,
    pub retained: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonthModel {
    pub month: u32,
    pub response_transform: TransformSpec,
    pub covariates: Vec<CovariateModel>,
}

impl MonthModel {
    pub fn retained(&self) -> Vec<bool> {
        self.covariates.iter().map(|c| c.retained).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub config: StudyConfig,
    pub months: Vec<MonthModel>,
}

impl FittedModel {
    pub fn month(&self, m: u32) -> Option<&MonthModel> {
        self.months.iter().find(|mm| mm.month == m)
    }

    /// Checks that the model's covariates match the dataset by name.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let names = ds.covariate_names();
        for mm in &self.months {
            let model_names: Vec<String> = mm.covariates.iter().map(|c| c.name.clone()).collect();
            if model_names != names {
                return Err(Error::Validation(format!(
                    "model month {} covariates {model_names:?} do not match dataset {names:?}",
                    mm.month
                )));
            }
        }
        Ok(())
    }
}

fn all_values(m: &DMatrix<f64>) -> &[f64] {
    m.as_slice()
}

/// Transforms and GP parameters for every covariate (all marked retained).
pub fn fit_month_params(ds: &Dataset, md: &MonthData, cfg: &StudyConfig) -> Result<MonthModel> {
    let response_transform = fit_nu(all_values(&md.response), cfg.nu_quantile).map_err(|e| {
        e.context(format!(
            "month {}: response '{}'",
            md.month,
            ds.response.name()
        ))
    })?;
    let covariates = ds
        .covariates
        .par_iter()
        .zip(md.covariates.par_iter())
        .map(|(field, raw)| {
            let ctx =
                |e: Error| e.context(format!("month {}: covariate '{}'", md.month, field.name()));
            let transform = fit_nu(all_values(raw), cfg.nu_quantile).map_err(ctx)?;
            let z = transform_matrix(&transform, raw);
            let fit = fit_mle_with_jitter(field.grid(), &z, cfg.jitter_rel).map_err(ctx)?;
            if fit.degenerate {
                log::warn!(
                    "month {}: covariate '{}' is constant; its GP fit is degenerate",
                    md.month,
                    field.name()
                );
            }
            Ok(CovariateModel {
                name: field.name().to_string(),
                transform,
                params: fit.params,
                retained: true,
                degenerate: fit.degenerate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MonthModel {
        month: md.month,
        response_transform,
        covariates,
    })
}

fn transform_matrix(t: &TransformSpec, raw: &DMatrix<f64>) -> DMatrix<f64> {
    let (z, _) = t.apply_field(raw.as_slice());
    DMatrix::from_vec(raw.nrows(), raw.ncols(), z)
}

/// One retained covariate ready for kriging and simulation.
#[derive(Debug, Clone)]
pub struct CovariateRegrid {
    pub name: String,
    pub dataset_index: usize,
    pub transform: TransformSpec,
    pub regridder: Regridder,
}

impl CovariateRegrid {
    /// Kriging means on the target grid for raw native values: days × targets.
    pub fn means(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let z = transform_matrix(&self.transform, raw);
        let mu = self.regridder.params().mu;
        let mut m = z.add_scalar(-mu) * self.regridder.weights().transpose();
        m.add_scalar_mut(mu);
        m
    }
}

/// Everything the regressions need for one month and one set of days.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub month: u32,
    pub dates: Vec<NaiveDate>,
    pub location_ids: Vec<String>,
    /// Response on the analysis scale: days × targets.
    pub y: DMatrix<f64>,
    pub y_raw: DMatrix<f64>,
    pub response_transform: TransformSpec,
    pub scale: ResponseScale,
    pub covs: Vec<CovariateRegrid>,
    /// Kriging means per retained covariate: days × targets.
    pub means: Vec<DMatrix<f64>>,
    /// Seasonal block: days × G.
    pub seasonal: DMatrix<f64>,
    pub coef_names: Vec<String>,
}

pub fn seasonal_block(dates: &[NaiveDate], enabled: bool) -> DMatrix<f64> {
    if !enabled {
        return DMatrix::zeros(dates.len(), 0);
    }
    DMatrix::from_fn(dates.len(), 2, |i, j| {
        let phase = 2.0 * std::f64::consts::PI * dates[i].ordinal() as f64 / 365.25;
        if j == 0 {
            phase.sin()
        } else {
            phase.cos()
        }
    })
}

impl Prepared {
    pub fn new(
        ds: &Dataset,
        md: &MonthData,
        model: &MonthModel,
        cfg: &StudyConfig,
    ) -> Result<Self> {
        if model.covariates.len() != ds.covariates.len() {
            return Err(Error::Validation(format!(
                "model has {} covariates, dataset has {}",
                model.covariates.len(),
                ds.covariates.len()
            )));
        }
        let target = ds.target();
        let mut covs = Vec::new();
        for (i, (cm, field)) in model.covariates.iter().zip(&ds.covariates).enumerate() {
            if cm.name != field.name() {
                return Err(Error::Validation(format!(
                    "model covariate '{}' does not match dataset covariate '{}'",
                    cm.name,
                    field.name()
                )));
            }
            if !cm.retained {
                continue;
            }
            let regridder = Regridder::new(&cm.params, field.grid(), target)
                .map_err(|e| e.context(format!("covariate '{}'", cm.name)))?;
            covs.push(CovariateRegrid {
                name: cm.name.clone(),
                dataset_index: i,
                transform: cm.transform,
                regridder,
            });
        }
        if covs.is_empty() {
            return Err(Error::Validation(format!(
                "month {}: no retained covariates",
                md.month
            )));
        }
        let means = covs
            .par_iter()
            .map(|c| c.means(&md.covariates[c.dataset_index]))
            .collect();
        let y = match cfg.response_scale {
            ResponseScale::Transformed => transform_matrix(&model.response_transform, &md.response),
            ResponseScale::Raw => md.response.clone(),
        };
        let seasonal = seasonal_block(&md.dates, cfg.seasonal);
        let coef_names = std::iter::once(INTERCEPT.to_string())
            .chain(covs.iter().map(|c| c.name.clone()))
            .chain(
                SEASON_NAMES
                    .iter()
                    .take(seasonal.ncols())
                    .map(|s| s.to_string()),
            )
            .collect();
        Ok(Self {
            month: md.month,
            dates: md.dates.clone(),
            location_ids: target.point_ids().to_vec(),
            y,
            y_raw: md.response.clone(),
            response_transform: model.response_transform,
            scale: cfg.response_scale,
            covs,
            means,
            seasonal,
            coef_names,
        })
    }

    pub fn n_locations(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_days(&self) -> usize {
        self.y.nrows()
    }

    /// Design at one location for the given covariate matrices.
    pub fn design(&self, loc: usize, xs: &[DMatrix<f64>]) -> Result<RegressionDesign> {
        let n = self.n_days();
        let x = DMatrix::from_fn(n, xs.len() + 1, |t, j| {
            if j == 0 {
                1.0
            } else {
                xs[j - 1][(t, loc)]
            }
        });
        let y = self.y.column(loc).into_owned();
        let s = if self.seasonal.ncols() > 0 {
            Some(self.seasonal.clone())
        } else {
            None
        };
        RegressionDesign::new(y, x, s, Some(self.coef_names.clone()))
    }

    /// Design row for a new day: intercept, covariate values, seasonal terms.
    pub fn row(&self, covariate_values: &[f64], date: &NaiveDate) -> Vec<f64> {
        let s = seasonal_block(std::slice::from_ref(date), self.seasonal.ncols() > 0);
        std::iter::once(1.0)
            .chain(covariate_values.iter().copied())
            .chain(s.iter().copied())
            .collect()
    }

    /// Back to the raw response scale.
    pub fn to_raw(&self, v: f64) -> f64 {
        match self.scale {
            ResponseScale::Transformed => self.response_transform.gamma_inverse(v),
            ResponseScale::Raw => v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NaiveFit {
    pub fit: OlsFit,
    pub inference: Vec<CoefInference>,
}

/// Regression on kriging means with classical t intervals.
pub fn naive_fit(prep: &Prepared, loc: usize, level: f64) -> Result<NaiveFit> {
    let ctx = |e: Error| {
        e.context(format!(
            "month {}: location {}",
            prep.month, prep.location_ids[loc]
        ))
    };
    let d = prep.design(loc, &prep.means).map_err(ctx)?;
    let fit = ols_fit(&d).map_err(ctx)?;
    let inference = t_inference(&fit, level).map_err(ctx)?;
    Ok(NaiveFit { fit, inference })
}

pub fn naive_all(prep: &Prepared, level: f64) -> Result<Vec<NaiveFit>> {
    (0..prep.n_locations())
        .into_par_iter()
        .map(|loc| naive_fit(prep, loc, level))
        .collect()
}

/// Retained flags: a covariate is dropped when its p-value exceeds
/// `threshold` at strictly more than half of the locations.
/// `pvalues[loc][c]` is the p-value of covariate `c` at location `loc`.
pub fn drop_covariates(
    pvalues: &[Vec<f64>],
    names: &[String],
    threshold: f64,
) -> Result<Vec<bool>> {
    if pvalues.is_empty() {
        return Err(Error::InvalidArgument(
            "no naive fits to base drop decisions on".into(),
        ));
    }
    let n_loc = pvalues.len();
    let retained: Vec<bool> = (0..names.len())
        .map(|c| {
            let above = pvalues.iter().filter(|p| p[c] > threshold).count();
            2 * above <= n_loc
        })
        .collect();
    if !retained.iter().any(|r| *r) {
        return Err(Error::Validation(format!(
            "every covariate ({}) would be dropped; intercept-only model refused",
            names.join(", ")
        )));
    }
    for (name, keep) in names.iter().zip(&retained) {
        if !keep {
            log::info!("dropping covariate '{name}'");
        }
    }
    Ok(retained)
}

/// Posterior median and central credible interval of one coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefSummary {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone)]
pub struct BayesFit {
    /// Pooled draws, simulation-major: draw `i` came from simulation
    /// `i / n_post_per_sim`.
    pub draws: Vec<PosteriorDraw>,
    pub summary: Vec<CoefSummary>,
}

impl BayesFit {
    /// Mean of the linear predictor over the pooled draws.
    pub fn mean_prediction(&self, row: &[f64]) -> f64 {
        self.draws.iter().map(|d| d.predict(row)).sum::<f64>() / self.draws.len() as f64
    }
}

pub fn summarize_draws(draws: &[PosteriorDraw], level: f64) -> Vec<CoefSummary> {
    if draws.is_empty() {
        return Vec::new();
    }
    let k = draws[0].beta.len() + draws[0].gamma.len();
    (0..k)
        .map(|j| {
            let mut v: Vec<f64> = draws.iter().map(|d| d.coef(j)).collect();
            v.sort_by(f64::total_cmp);
            CoefSummary {
                median: quantile_sorted(&v, 0.5),
                lo: quantile_sorted(&v, (1.0 - level) / 2.0),
                hi: quantile_sorted(&v, (1.0 + level) / 2.0),
            }
        })
        .collect()
}

/// Conditional simulation `sim` of every retained covariate: days × targets.
/// Day `t` of covariate `c` uses the stream keyed by
/// `(derive_seed(seed, [c]), COND_SIM, t, sim)`.
pub fn simulate_covariates(
    prep: &Prepared,
    factors: &[DMatrix<f64>],
    seed: u64,
    sim: usize,
) -> Vec<DMatrix<f64>> {
    prep.covs
        .iter()
        .zip(factors)
        .zip(&prep.means)
        .map(|((c, f), mean)| {
            let cov_seed = derive_seed(seed, &[c.dataset_index as u64]);
            let n_t = f.ncols();
            let days = mean.nrows();
            let mut z = DMatrix::zeros(n_t, days);
            for t in 0..days {
                let mut r = stream(cov_seed, &[tag::COND_SIM, t as u64, sim as u64]);
                for i in 0..n_t {
                    z[(i, t)] = rand_distr::Distribution::<f64>::sample(
                        &rand_distr::StandardNormal,
                        &mut r,
                    );
                }
            }
            mean + (f * z).transpose()
        })
        .collect()
}

fn posterior_for_sim(
    prep: &Prepared,
    loc: usize,
    sim: usize,
    xs: &[DMatrix<f64>],
    cfg: &StudyConfig,
    seed: u64,
) -> Result<Vec<PosteriorDraw>> {
    let d = prep.design(loc, xs)?;
    let mut rng = stream(seed, &[tag::POSTERIOR, loc as u64, sim as u64]);
    match cfg.arma_family {
        None => {
            let fit = ols_fit(&d)?;
            let sampler = CoefSampler::from_fit(&fit)?;
            draw_posterior(
                &fit,
                &sampler,
                cfg.sigma2_mode,
                cfg.n_post_per_sim,
                &mut rng,
            )
        }
        Some(family) => {
            let grid = eta_grid(cfg.eta_grid_points, ETA_GRID_LIMIT);
            let post = EtaPosterior::compute(grid, &d, family)?;
            let mut eta_rng = stream(seed, &[tag::ETA, loc as u64, sim as u64]);
            let mut cache: HashMap<usize, (OlsFit, CoefSampler)> = HashMap::new();
            let mut out = Vec::with_capacity(cfg.n_post_per_sim);
            for _ in 0..cfg.n_post_per_sim {
                let idx = post.sample_index(&mut eta_rng);
                let eta = post.grid[idx];
                if !cache.contains_key(&idx) {
                    let w = BandedWhitener::new(family, eta, d.n())?;
                    let fit = ols_fit(&w.whiten(&d)?)?;
                    let sampler = CoefSampler::from_fit(&fit)?;
                    cache.insert(idx, (fit, sampler));
                }
                let (fit, sampler) = &cache[&idx];
                let mut one = draw_posterior(fit, sampler, cfg.sigma2_mode, 1, &mut rng)?;
                let mut draw = one.pop().expect("one draw");
                draw.eta = Some(eta);
                out.push(draw);
            }
            Ok(out)
        }
    }
}

/// Two-step analysis for the given locations: for each conditional
/// simulation of the covariates, refit and draw from the conjugate
/// posterior; pool the draws over simulations.
pub fn bayes_two_step(
    prep: &Prepared,
    cfg: &StudyConfig,
    seed: u64,
    locations: &[usize],
) -> Result<Vec<BayesFit>> {
    let factors = prep
        .covs
        .iter()
        .map(|c| {
            c.regridder
                .sim_factor()
                .map_err(|e| e.context(format!("covariate '{}'", c.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_sim: Vec<Vec<Vec<PosteriorDraw>>> = (0..cfg.n_cond_sims)
        .into_par_iter()
        .map(|sim| {
            let xs = simulate_covariates(prep, &factors, seed, sim);
            locations
                .iter()
                .map(|&loc| {
                    posterior_for_sim(prep, loc, sim, &xs, cfg, seed).map_err(|e| {
                        e.context(format!(
                            "month {}: location {}, simulation {sim}",
                            prep.month, prep.location_ids[loc]
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pooled: Vec<Vec<PosteriorDraw>> = locations
        .iter()
        .map(|_| Vec::with_capacity(cfg.draws_per_location()))
        .collect();
    for sim_draws in per_sim {
        for (acc, draws) in pooled.iter_mut().zip(sim_draws) {
            acc.extend(draws);
        }
    }
    Ok(pooled
        .into_iter()
        .map(|draws| BayesFit {
            summary: summarize_draws(&draws, cfg.ci_level),
            draws,
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct LocationResult {
    pub location_id: String,
    pub month: u32,
    pub coef_names: Vec<String>,
    pub naive: Option<Vec<CoefInference>>,
    pub bayes: Option<Vec<CoefSummary>>,
}

impl LocationResult {
    /// Naive estimate minus posterior median, when both paths ran.
    pub fn bias(&self) -> Option<Vec<f64>> {
        match (&self.naive, &self.bayes) {
            (Some(n), Some(b)) => Some(
                n.iter()
                    .zip(b)
                    .map(|(n, b)| n.estimate - b.median)
                    .collect(),
            ),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonthAnalysis {
    pub month: u32,
    pub results: Vec<LocationResult>,
    /// Pooled draws per location when requested and the Bayesian path ran.
    pub draws: Option<Vec<Vec<PosteriorDraw>>>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub months: Vec<MonthAnalysis>,
    pub mode: AnalysisMode,
    pub timings: Vec<(String, f64)>,
}

/// Fits transforms and GPs, then fixes the drop decisions from naive fits.
pub fn fit_month_model(ds: &Dataset, md: &MonthData, cfg: &StudyConfig) -> Result<MonthModel> {
    let mut model = fit_month_params(ds, md, cfg)?;
    let prep = Prepared::new(ds, md, &model, cfg)?;
    let naive = naive_all(&prep, cfg.ci_level)?;
    let n_cov = prep.covs.len();
    let pvalues: Vec<Vec<f64>> = naive
        .iter()
        .map(|f| f.inference[1..=n_cov].iter().map(|c| c.p_value).collect())
        .collect();
    let names: Vec<String> = prep.covs.iter().map(|c| c.name.clone()).collect();
    let retained = drop_covariates(&pvalues, &names, cfg.drop_pvalue)
        .map_err(|e| e.context(format!("month {}", md.month)))?;
    for (cm, keep) in model.covariates.iter_mut().zip(retained) {
        cm.retained = keep;
    }
    Ok(model)
}

pub fn fit_model(ds: &Dataset, cfg: &StudyConfig) -> Result<FittedModel> {
    cfg.validate()?;
    let data = cfg
        .months
        .iter()
        .map(|&m| month_data(ds, m, &cfg.years))
        .collect::<Result<Vec<_>>>()?;
    let months = data
        .iter()
        .map(|md| fit_month_model(ds, md, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(FittedModel {
        config: cfg.clone(),
        months,
    })
}

pub fn analyze_month(
    ds: &Dataset,
    md: &MonthData,
    model: &MonthModel,
    cfg: &StudyConfig,
    mode: AnalysisMode,
    keep_draws: bool,
) -> Result<MonthAnalysis> {
    let prep = Prepared::new(ds, md, model, cfg)?;
    let naive = if mode.naive() {
        Some(naive_all(&prep, cfg.ci_level)?)
    } else {
        None
    };
    let all: Vec<usize> = (0..prep.n_locations()).collect();
    let bayes = if mode.bayes() {
        Some(bayes_two_step(&prep, cfg, cfg.month_seed(md.month), &all)?)
    } else {
        None
    };
    let results = (0..prep.n_locations())
        .map(|loc| LocationResult {
            location_id: prep.location_ids[loc].clone(),
            month: md.month,
            coef_names: prep.coef_names.clone(),
            naive: naive.as_ref().map(|n| n[loc].inference.clone()),
            bayes: bayes.as_ref().map(|b| b[loc].summary.clone()),
        })
        .collect();
    let draws = match (keep_draws, bayes) {
        (true, Some(b)) => Some(b.into_iter().map(|f| f.draws).collect()),
        _ => None,
    };
    Ok(MonthAnalysis {
        month: md.month,
        results,
        draws,
    })
}

/// Runs the configured analyses with a previously fitted model.
pub fn analyze(
    ds: &Dataset,
    model: &FittedModel,
    mode: AnalysisMode,
    keep_draws: bool,
) -> Result<Analysis> {
    let cfg = &model.config;
    cfg.validate()?;
    model.check_dataset(ds)?;
    let mut months = Vec::new();
    let mut timings = Vec::new();
    for &m in &cfg.months {
        let mm = model
            .month(m)
            .ok_or_else(|| Error::Validation(format!("model has no entry for month {m}")))?;
        let start = Instant::now();
        let md = month_data(ds, m, &cfg.years)?;
        months.push(analyze_month(ds, &md, mm, cfg, mode, keep_draws)?);
        timings.push((format!("month_{m}_seconds"), start.elapsed().as_secs_f64()));
    }
    Ok(Analysis {
        months,
        mode,
        timings,
    })
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub model: FittedModel,
    pub analysis: Analysis,
}

/// Fit followed by both analyses.
pub fn run_study(ds: &Dataset, cfg: &StudyConfig) -> Result<StudyOutput> {
    let model = fit_model(ds, cfg)?;
    let analysis = analyze(ds, &model, AnalysisMode::Both, false)?;
    Ok(StudyOutput { model, analysis })
}

/// Results keyed by (month, location id) for lookups in reports.
pub fn index_results(a: &Analysis) -> BTreeMap<(u32, String), &LocationResult> {
    a.months
        .iter()
        .flat_map(|m| {
            m.results
                .iter()
                .map(|r| ((r.month, r.location_id.clone()), r))
        })
        .collect()
}

/// Convenience for tests and diagnostics: one design's coefficients on the
/// true target-grid covariates.
pub fn ols_on(prep: &Prepared, loc: usize, xs: &[DMatrix<f64>]) -> Result<DVector<f64>> {
    Ok(ols_fit(&prep.design(loc, xs)?)?.coef)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Field;
    use crate::grid::{make_regular_grid, Grid};

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn field(
        name: &str,
        grid: &Grid,
        dates: &[NaiveDate],
        f: impl Fn(usize, usize) -> f64,
    ) -> Field {
        Field::new(
            name,
            grid.clone(),
            dates.to_vec(),
            DMatrix::from_fn(dates.len(), grid.len(), f),
        )
        .unwrap()
    }

    fn tiny_dataset(resp_dates: &[NaiveDate], cov_dates: &[NaiveDate]) -> Dataset {
        let g = make_regular_grid([0.0, 0.0], 10.0, 2, 2).unwrap();
        Dataset::new(
            field("y", &g, resp_dates, |t, j| 1.0 + (t + j) as f64),
            vec![field("c", &g, cov_dates, |t, j| 2.0 + (t * j) as f64)],
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = StudyConfig::default();
        assert_eq!(c.draws_per_location(), 5000);
        assert_eq!(c.months, vec![2, 5, 8, 11]);
        c.validate().unwrap();
        for bad in [
            StudyConfig {
                n_cond_sims: 0,
                ..c.clone()
            },
            StudyConfig {
                n_post_per_sim: 0,
                ..c.clone()
            },
            StudyConfig {
                ci_level: 1.0,
                ..c.clone()
            },
            StudyConfig {
                months: vec![13],
                ..c.clone()
            },
            StudyConfig {
                years: vec![2000, 2000],
                ..c.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn alignment() {
        let dates = [d(2000, 2, 1), d(2000, 2, 2), d(2001, 2, 1), d(2001, 5, 1)];
        let ds = tiny_dataset(&dates, &dates);
        let md = month_data(&ds, 2, &[]).unwrap();
        assert_eq!(md.dates.len(), 3);
        assert_eq!(md.years(), vec![2000, 2001]);
        assert_eq!(md.response[(2, 0)], 1.0 + 2.0);
        let sub = md.subset_years(&[2001]).unwrap();
        assert_eq!(sub.dates, vec![d(2001, 2, 1)]);

        let ds = tiny_dataset(&dates, &[d(2000, 2, 1), d(2001, 2, 1), d(2001, 5, 1)]);
        let e = month_data(&ds, 2, &[]).unwrap_err();
        assert!(matches!(e, Error::Alignment(_)));
        assert!(e.to_string().contains("2000-02-02"), "{e}");

        let ds = tiny_dataset(&[d(2000, 2, 1)], &[d(2001, 2, 1)]);
        assert!(matches!(month_data(&ds, 2, &[]), Err(Error::Alignment(_))));
        let ds = tiny_dataset(&dates, &dates);
        assert!(matches!(
            month_data(&ds, 2, &[1999]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn drop_rule() {
        let names = vec!["a".to_string(), "b".to_string()];
        let p = vec![
            vec![0.01, 0.5],
            vec![0.2, 0.6],
            vec![0.01, 0.01],
            vec![0.3, 0.9],
        ];
        // a: 2 of 4 above (not a strict majority); b: 3 of 4
        assert_eq!(
            drop_covariates(&p, &names, 0.05).unwrap(),
            vec![true, false]
        );
        assert_eq!(drop_covariates(&p, &names, 1.0).unwrap(), vec![true, true]);
        let all_bad = vec![vec![0.9, 0.9]; 3];
        assert!(matches!(
            drop_covariates(&all_bad, &names, 0.05),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn summaries_are_ordered() {
        let draws: Vec<PosteriorDraw> = (0..101)
            .map(|i| PosteriorDraw {
                beta: DVector::from_vec(vec![i as f64, -(i as f64)]),
                gamma: DVector::zeros(0),
                sigma2: 1.0,
                eta: None,
            })
            .collect();
        let s = summarize_draws(&draws, 0.95);
        assert_eq!(s[0].median, 50.0);
        assert!((s[0].lo - 2.5).abs() < 1e-12 && (s[0].hi - 97.5).abs() < 1e-12);
        assert!(s[1].lo <= s[1].median && s[1].median <= s[1].hi);
    }

    #[test]
    fn seasonal_columns() {
        let s = seasonal_block(&[d(2001, 1, 1), d(2001, 7, 2)], true);
        assert_eq!(s.ncols(), 2);
        assert!((s[(0, 0)] - (2.0 * std::f64::consts::PI / 365.25).sin()).abs() < 1e-15);
        assert_eq!(seasonal_block(&[d(2001, 1, 1)], false).ncols(), 0);
    }
}
