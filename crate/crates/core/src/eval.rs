//! Leave-one-year-out evaluation of both paths: prediction-interval
//! coverage, raw-scale RMSE and per-coefficient bias.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;

use crate::bayes::{predictive_interval, t_critical, t_prediction_interval};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::{
    bayes_two_step, fit_month_params, month_data, naive_all, FittedModel, LocationResult,
    MonthData, MonthModel, Prepared, StudyConfig,
};
use crate::rng::{stream, tag};

/// (training years, held-out year), one per year in input order.
pub fn loyo_folds(years: &[i32]) -> Result<Vec<(Vec<i32>, i32)>> {
    if years.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-year-out needs at least 2 years, got {}",
            years.len()
        )));
    }
    if years.iter().collect::<BTreeSet<_>>().len() != years.len() {
        return Err(Error::InvalidArgument(format!(
            "duplicate years in {years:?}"
        )));
    }
    Ok(years
        .iter()
        .map(|&test| (years.iter().copied().filter(|y| *y != test).collect(), test))
        .collect())
}

/// Fraction of actuals inside their closed intervals.
pub fn coverage(intervals: &[(f64, f64)], actuals: &[f64]) -> Result<f64> {
    if intervals.len() != actuals.len() || actuals.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "coverage needs equal nonempty inputs ({} intervals, {} actuals)",
            intervals.len(),
            actuals.len()
        )));
    }
    let hits = intervals
        .iter()
        .zip(actuals)
        .filter(|((lo, hi), a)| lo <= a && *a <= hi)
        .count();
    Ok(hits as f64 / actuals.len() as f64)
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "rmse needs equal nonempty inputs ({} vs {})",
            pred.len(),
            actual.len()
        )));
    }
    let ss: f64 = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok((ss / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PathKind {
    Naive,
    Bayes,
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathKind::Naive => "naive",
            PathKind::Bayes => "bayes",
        })
    }
}

impl std::str::FromStr for PathKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(PathKind::Naive),
            "bayes" => Ok(PathKind::Bayes),
            other => Err(Error::Validation(format!("unknown path '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub month: u32,
    pub test_year: i32,
    pub path: PathKind,
    pub location_ids: Vec<String>,
    pub coverage: Vec<f64>,
    /// Raw response units.
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub location_id: String,
    pub month: u32,
    pub path: PathKind,
    pub mean_coverage: f64,
    pub mean_rmse: f64,
    pub n_folds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<SummaryRow>,
}

impl EvalSummary {
    pub fn path_rows(&self, path: PathKind) -> impl Iterator<Item = &SummaryRow> {
        self.rows.iter().filter(move |r| r.path == path)
    }

    /// Mean coverage over all rows of one path.
    pub fn overall_coverage(&self, path: PathKind) -> f64 {
        let v: Vec<f64> = self.path_rows(path).map(|r| r.mean_coverage).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub folds: Vec<FoldReport>,
    pub summary: EvalSummary,
}

/// Both paths for one month and held-out year. Transforms, GP parameters
/// and regressions are refit on the training years; the retained covariate
/// set comes from `frozen`.
pub fn eval_fold(
    ds: &Dataset,
    md: &MonthData,
    frozen: &MonthModel,
    cfg: &StudyConfig,
    train_years: &[i32],
    test_year: i32,
) -> Result<(FoldReport, FoldReport)> {
    let ctx = |e: Error| e.context(format!("month {}: fold {test_year}", md.month));
    let train = md.subset_years(train_years).map_err(ctx)?;
    let test = md.subset_years(&[test_year]).map_err(ctx)?;
    let mut model = fit_month_params(ds, &train, cfg).map_err(ctx)?;
    for (c, f) in model.covariates.iter_mut().zip(&frozen.covariates) {
        c.retained = f.retained;
    }
    let prep = Prepared::new(ds, &train, &model, cfg).map_err(ctx)?;
    let test_prep = Prepared::new(ds, &test, &model, cfg).map_err(ctx)?;
    let n_loc = prep.n_locations();
    let n_test = test_prep.n_days();

    let naive = naive_all(&prep, cfg.ci_level).map_err(ctx)?;
    let all: Vec<usize> = (0..n_loc).collect();
    let seed = cfg.fold_seed(md.month, test_year);
    let bayes = bayes_two_step(&prep, cfg, seed, &all).map_err(ctx)?;

    let per_loc = (0..n_loc)
        .into_par_iter()
        .map(|loc| {
            let rows: Vec<Vec<f64>> = (0..n_test)
                .map(|t| {
                    let xs: Vec<f64> = test_prep.means.iter().map(|m| m[(t, loc)]).collect();
                    test_prep.row(&xs, &test_prep.dates[t])
                })
                .collect();
            let actual: Vec<f64> = (0..n_test).map(|t| test_prep.y[(t, loc)]).collect();
            let actual_raw: Vec<f64> = (0..n_test).map(|t| test_prep.y_raw[(t, loc)]).collect();

            let fit = &naive[loc].fit;
            let crit = t_critical(fit.df(), cfg.ci_level)?;
            let naive_iv: Vec<(f64, f64)> = rows
                .iter()
                .map(|r| t_prediction_interval(fit, r, crit))
                .collect();
            let naive_pred: Vec<f64> = rows.iter().map(|r| prep.to_raw(fit.predict(r))).collect();

            let b = &bayes[loc];
            let bayes_iv = rows
                .iter()
                .enumerate()
                .map(|(t, r)| {
                    let mut rng = stream(seed, &[tag::PREDICTIVE, loc as u64, t as u64]);
                    predictive_interval(&b.draws, r, cfg.ci_level, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let bayes_pred: Vec<f64> = rows
                .iter()
                .map(|r| prep.to_raw(b.mean_prediction(r)))
                .collect();
            Ok((
                coverage(&naive_iv, &actual)?,
                rmse(&naive_pred, &actual_raw)?,
                coverage(&bayes_iv, &actual)?,
                rmse(&bayes_pred, &actual_raw)?,
            ))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(ctx)?;

    let report = |path, cov: Vec<f64>, err: Vec<f64>| FoldReport {
        month: md.month,
        test_year,
        path,
        location_ids: prep.location_ids.clone(),
        coverage: cov,
        rmse: err,
    };
    Ok((
        report(
            PathKind::Naive,
            per_loc.iter().map(|r| r.0).collect(),
            per_loc.iter().map(|r| r.1).collect(),
        ),
        report(
            PathKind::Bayes,
            per_loc.iter().map(|r| r.2).collect(),
            per_loc.iter().map(|r| r.3).collect(),
        ),
    ))
}

/// Averages fold reports per (month, path, location), in fold order.
pub fn summarize_folds(folds: &[FoldReport]) -> EvalSummary {
    let mut keys: Vec<(u32, PathKind)> = folds.iter().map(|f| (f.month, f.path)).collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::new();
    for (month, path) in keys {
        let group: Vec<&FoldReport> = folds
            .iter()
            .filter(|f| f.month == month && f.path == path)
            .collect();
        let n = group.len();
        for (loc, id) in group[0].location_ids.iter().enumerate() {
            let mean_coverage = group.iter().map(|f| f.coverage[loc]).sum::<f64>() / n as f64;
            let mean_rmse = group.iter().map(|f| f.rmse[loc]).sum::<f64>() / n as f64;
            rows.push(SummaryRow {
                location_id: id.clone(),
                month,
                path,
                mean_coverage,
                mean_rmse,
                n_folds: n,
            });
        }
    }
    EvalSummary { rows }
}

/// Leave-one-year-out evaluation for every configured month.
pub fn run_eval(ds: &Dataset, model: &FittedModel, cfg: &StudyConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    model.check_dataset(ds)?;
    let mut folds = Vec::new();
    for &m in &cfg.months {
        let frozen = model
            .month(m)
            .ok_or_else(|| Error::Validation(format!("model has no entry for month {m}")))?;
        let md = month_data(ds, m, &cfg.years)?;
        let plan = loyo_folds(&md.years())?;
        let reports = plan
            .par_iter()
            .map(|(train, test)| eval_fold(ds, &md, frozen, cfg, train, *test))
            .collect::<Result<Vec<_>>>()?;
        for (n, b) in reports {
            folds.push(n);
            folds.push(b);
        }
    }
    let summary = summarize_folds(&folds);
    Ok(EvalOutput { folds, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub location_id: String,
    pub month: u32,
    pub coef_name: String,
    pub bias: f64,
}

/// Naive estimate minus posterior median for every (location, month,
/// coefficient).
pub fn bias_map(results: &[LocationResult]) -> Result<Vec<BiasRow>> {
    let mut rows = Vec::new();
    for r in results {
        let bias = r.bias().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "location {} month {}: both paths are needed for bias",
                r.location_id, r.month
            ))
        })?;
        for (name, b) in r.coef_names.iter().zip(bias) {
            rows.push(BiasRow {
                location_id: r.location_id.clone(),
                month: r.month,
                coef_name: name.clone(),
                bias: b,
            });
        }
    }
    Ok(rows)
}
