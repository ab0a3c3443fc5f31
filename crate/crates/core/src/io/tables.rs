//! CSV tables: grids, daily fields, results, draws and evaluation output.
//!
//! Floats are written with the shortest decimal that parses back to the
//! same value.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::data::Field;
use crate::error::{Error, Result};
use crate::eval::{BiasRow, FoldReport, PathKind, SummaryRow};
use crate::grid::Grid;
use crate::io::Float;
use crate::pipeline::{Analysis, MonthAnalysis};

pub const DEFAULT_DATE_FORMAT: &str = "%Y-%m-%d";

pub const GRID_HEADER: [&str; 3] = ["id", "x_km", "y_km"];
pub const FIELD_HEADER: [&str; 3] = ["date", "location_id", "value"];
pub const RESULTS_HEADER: [&str; 10] = [
    "location_id",
    "month",
    "coef_name",
    "naive_est",
    "naive_lo",
    "naive_hi",
    "bayes_median",
    "bayes_lo",
    "bayes_hi",
    "bias",
];
pub const FOLDS_HEADER: [&str; 6] = [
    "location_id",
    "month",
    "path",
    "test_year",
    "coverage",
    "rmse",
];
pub const SUMMARY_HEADER: [&str; 5] =
    ["location_id", "month", "path", "mean_coverage", "mean_rmse"];
pub const BIAS_HEADER: [&str; 4] = ["location_id", "month", "coef_name", "bias"];

/// Rows of an already-validated CSV with their 1-based line numbers.
pub struct Table {
    pub source_name: String,
    pub rows: Vec<(usize, csv::StringRecord)>,
}

impl Table {
    pub fn err(&self, line: usize, message: String) -> Error {
        Error::Parse {
            source_name: self.source_name.clone(),
            line,
            message,
        }
    }

    pub fn parse<T: FromStr>(
        &self,
        line: usize,
        rec: &csv::StringRecord,
        col: usize,
        name: &str,
    ) -> Result<T>
    where
        T::Err: Display,
    {
        let s = rec.get(col).unwrap_or("");
        s.parse::<T>()
            .map_err(|e| self.err(line, format!("column '{name}': bad value '{s}' ({e})")))
    }

    /// Empty cell means `None`.
    pub fn parse_opt(
        &self,
        line: usize,
        rec: &csv::StringRecord,
        col: usize,
        name: &str,
    ) -> Result<Option<f64>> {
        if rec.get(col).unwrap_or("").is_empty() {
            Ok(None)
        } else {
            self.parse(line, rec, col, name).map(Some)
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            source_name: path.display().to_string(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Reads a CSV whose header must equal `header`.
pub fn read_table(path: &Path, header: &[&str]) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let source_name = path.display().to_string();
    let got = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(Error::Parse {
            source_name,
            line: 1,
            message: format!(
                "expected header '{}', got '{}'",
                header.join(","),
                got.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec));
    }
    Ok(Table { source_name, rows })
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| Float(x).to_string())
}

// ---- grids and fields ----

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    let rows: Vec<Vec<String>> = grid
        .point_ids()
        .iter()
        .zip(grid.points())
        .map(|(id, p)| vec![id.clone(), Float(p[0]).to_string(), Float(p[1]).to_string()])
        .collect();
    write_table(path, &GRID_HEADER, &rows)
}

pub fn read_grid(path: &Path, grid_id: &str) -> Result<Grid> {
    let t = read_table(path, &GRID_HEADER)?;
    let mut ids = Vec::with_capacity(t.rows.len());
    let mut pts = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        ids.push(rec.get(0).unwrap_or("").to_string());
        pts.push([
            t.parse(*line, rec, 1, "x_km")?,
            t.parse(*line, rec, 2, "y_km")?,
        ]);
    }
    Grid::with_point_ids(grid_id, ids, pts).map_err(|e| t.err(0, e.to_string()))
}

pub fn write_field(path: &Path, field: &Field, date_format: &str) -> Result<()> {
    let ids = field.grid().point_ids();
    let v = field.values();
    let mut rows = Vec::with_capacity(v.len());
    for (t, d) in field.dates().iter().enumerate() {
        let ds = d.format(date_format).to_string();
        for (i, id) in ids.iter().enumerate() {
            rows.push(vec![ds.clone(), id.clone(), Float(v[(t, i)]).to_string()]);
        }
    }
    write_table(path, &FIELD_HEADER, &rows)
}

/// Reads a long-format field. Every (date, location) pair must appear
/// exactly once and every location must belong to `grid`.
pub fn read_field(path: &Path, name: &str, grid: &Grid, date_format: &str) -> Result<Field> {
    let t = read_table(path, &FIELD_HEADER)?;
    let index: HashMap<&str, usize> = grid
        .point_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut by_date: BTreeMap<NaiveDate, Vec<Option<f64>>> = BTreeMap::new();
    let mut last: Option<(String, NaiveDate)> = None;
    for (line, rec) in &t.rows {
        let ds = rec.get(0).unwrap_or("");
        let date = match &last {
            Some((s, d)) if s == ds => *d,
            _ => {
                let d = NaiveDate::parse_from_str(ds, date_format).map_err(|e| {
                    t.err(
                        *line,
                        format!("column 'date': bad date '{ds}' for format '{date_format}' ({e})"),
                    )
                })?;
                last = Some((ds.to_string(), d));
                d
            }
        };
        let loc = rec.get(1).unwrap_or("");
        let &i = index.get(loc).ok_or_else(|| {
            t.err(
                *line,
                format!(
                    "column 'location_id': '{loc}' is not in grid '{}'",
                    grid.id()
                ),
            )
        })?;
        let v: f64 = t.parse(*line, rec, 2, "value")?;
        let slot = &mut by_date
            .entry(date)
            .or_insert_with(|| vec![None; grid.len()])[i];
        if slot.is_some() {
            return Err(t.err(
                *line,
                format!("duplicate entry for {date} at location '{loc}'"),
            ));
        }
        *slot = Some(v);
    }
    if by_date.is_empty() {
        return Err(t.err(1, "no data rows".into()));
    }
    let dates: Vec<NaiveDate> = by_date.keys().copied().collect();
    let mut values = DMatrix::zeros(dates.len(), grid.len());
    for (r, (d, row)) in by_date.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            values[(r, c)] = v.ok_or_else(|| {
                t.err(
                    0,
                    format!(
                        "missing value for {d} at location '{}'",
                        grid.point_ids()[c]
                    ),
                )
            })?;
        }
    }
    Field::new(name, grid.clone(), dates, values).map_err(|e| t.err(0, e.to_string()))
}

// ---- analysis results ----

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub location_id: String,
    pub month: u32,
    pub coef_name: String,
    pub naive_est: Option<f64>,
    pub naive_lo: Option<f64>,
    pub naive_hi: Option<f64>,
    pub bayes_median: Option<f64>,
    pub bayes_lo: Option<f64>,
    pub bayes_hi: Option<f64>,
    pub bias: Option<f64>,
}

pub fn result_rows(a: &Analysis) -> Vec<ResultRow> {
    let mut out = Vec::new();
    for m in &a.months {
        for r in &m.results {
            let bias = r.bias();
            for (j, name) in r.coef_names.iter().enumerate() {
                let n = r.naive.as_ref().map(|v| &v[j]);
                let b = r.bayes.as_ref().map(|v| &v[j]);
                out.push(ResultRow {
                    location_id: r.location_id.clone(),
                    month: r.month,
                    coef_name: name.clone(),
                    naive_est: n.map(|c| c.estimate),
                    naive_lo: n.map(|c| c.lo),
                    naive_hi: n.map(|c| c.hi),
                    bayes_median: b.map(|c| c.median),
                    bayes_lo: b.map(|c| c.lo),
                    bayes_hi: b.map(|c| c.hi),
                    bias: bias.as_ref().map(|v| v[j]),
                });
            }
        }
    }
    out
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.location_id.clone(),
                r.month.to_string(),
                r.coef_name.clone(),
                opt(r.naive_est),
                opt(r.naive_lo),
                opt(r.naive_hi),
                opt(r.bayes_median),
                opt(r.bayes_lo),
                opt(r.bayes_hi),
                opt(r.bias),
            ]
        })
        .collect();
    write_table(path, &RESULTS_HEADER, &rows)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let t = read_table(path, &RESULTS_HEADER)?;
    t.rows
        .iter()
        .map(|(line, rec)| {
            let l = *line;
            Ok(ResultRow {
                location_id: rec.get(0).unwrap_or("").to_string(),
                month: t.parse(l, rec, 1, "month")?,
                coef_name: rec.get(2).unwrap_or("").to_string(),
                naive_est: t.parse_opt(l, rec, 3, "naive_est")?,
                naive_lo: t.parse_opt(l, rec, 4, "naive_lo")?,
                naive_hi: t.parse_opt(l, rec, 5, "naive_hi")?,
                bayes_median: t.parse_opt(l, rec, 6, "bayes_median")?,
                bayes_lo: t.parse_opt(l, rec, 7, "bayes_lo")?,
                bayes_hi: t.parse_opt(l, rec, 8, "bayes_hi")?,
                bias: t.parse_opt(l, rec, 9, "bias")?,
            })
        })
        .collect()
}

pub fn draws_file_name(month: u32) -> String {
    format!("draws_m{month:02}.csv")
}

pub fn draws_header(coef_names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["location_id", "month", "cond_sim_index", "post_draw_index"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(coef_names.iter().cloned());
    h.push("sigma2".into());
    h.push("eta".into());
    h
}

/// Pooled draws of one month. Draws are stored simulation-major, so draw
/// `i` belongs to conditional simulation `i / n_post_per_sim`.
pub fn write_draws(path: &Path, m: &MonthAnalysis, n_post_per_sim: usize) -> Result<()> {
    let draws = m.draws.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("month {}: no posterior draws were kept", m.month))
    })?;
    let coef_names = m
        .results
        .first()
        .map(|r| r.coef_names.clone())
        .unwrap_or_default();
    let header = draws_header(&coef_names);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for (r, ds) in m.results.iter().zip(draws) {
        for (i, d) in ds.iter().enumerate() {
            let mut row = vec![
                r.location_id.clone(),
                m.month.to_string(),
                (i / n_post_per_sim).to_string(),
                (i % n_post_per_sim).to_string(),
            ];
            row.extend((0..coef_names.len()).map(|j| Float(d.coef(j)).to_string()));
            row.push(Float(d.sigma2).to_string());
            row.push(opt(d.eta));
            rows.push(row);
        }
    }
    write_table(path, &header, &rows)
}

// ---- evaluation ----

#[derive(Debug, Clone, PartialEq)]
pub struct FoldRow {
    pub location_id: String,
    pub month: u32,
    pub path: PathKind,
    pub test_year: i32,
    pub coverage: f64,
    pub rmse: f64,
}

pub fn fold_rows(folds: &[FoldReport]) -> Vec<FoldRow> {
    let mut rows: Vec<FoldRow> = folds
        .iter()
        .flat_map(|f| {
            f.location_ids
                .iter()
                .enumerate()
                .map(move |(i, id)| FoldRow {
                    location_id: id.clone(),
                    month: f.month,
                    path: f.path,
                    test_year: f.test_year,
                    coverage: f.coverage[i],
                    rmse: f.rmse[i],
                })
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.month, a.path, &a.location_id, a.test_year).cmp(&(
            b.month,
            b.path,
            &b.location_id,
            b.test_year,
        ))
    });
    rows
}

pub fn write_folds(path: &Path, rows: &[FoldRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.location_id.clone(),
                r.month.to_string(),
                r.path.to_string(),
                r.test_year.to_string(),
                Float(r.coverage).to_string(),
                Float(r.rmse).to_string(),
            ]
        })
        .collect();
    write_table(path, &FOLDS_HEADER, &rows)
}

pub fn read_folds(path: &Path) -> Result<Vec<FoldRow>> {
    let t = read_table(path, &FOLDS_HEADER)?;
    t.rows
        .iter()
        .map(|(l, rec)| {
            Ok(FoldRow {
                location_id: rec.get(0).unwrap_or("").to_string(),
                month: t.parse(*l, rec, 1, "month")?,
                path: t.parse(*l, rec, 2, "path")?,
                test_year: t.parse(*l, rec, 3, "test_year")?,
                coverage: t.parse(*l, rec, 4, "coverage")?,
                rmse: t.parse(*l, rec, 5, "rmse")?,
            })
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.location_id.clone(),
                r.month.to_string(),
                r.path.to_string(),
                Float(r.mean_coverage).to_string(),
                Float(r.mean_rmse).to_string(),
            ]
        })
        .collect();
    write_table(path, &SUMMARY_HEADER, &rows)
}

/// `n_folds` is not stored and reads back as zero.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let t = read_table(path, &SUMMARY_HEADER)?;
    t.rows
        .iter()
        .map(|(l, rec)| {
            Ok(SummaryRow {
                location_id: rec.get(0).unwrap_or("").to_string(),
                month: t.parse(*l, rec, 1, "month")?,
                path: t.parse(*l, rec, 2, "path")?,
                mean_coverage: t.parse(*l, rec, 3, "mean_coverage")?,
                mean_rmse: t.parse(*l, rec, 4, "mean_rmse")?,
                n_folds: 0,
            })
        })
        .collect()
}

pub fn write_bias(path: &Path, rows: &[BiasRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.location_id.clone(),
                r.month.to_string(),
                r.coef_name.clone(),
                Float(r.bias).to_string(),
            ]
        })
        .collect();
    write_table(path, &BIAS_HEADER, &rows)
}

pub fn read_bias(path: &Path) -> Result<Vec<BiasRow>> {
    let t = read_table(path, &BIAS_HEADER)?;
    t.rows
        .iter()
        .map(|(l, rec)| {
            Ok(BiasRow {
                location_id: rec.get(0).unwrap_or("").to_string(),
                month: t.parse(*l, rec, 1, "month")?,
                coef_name: rec.get(2).unwrap_or("").to_string(),
                bias: t.parse(*l, rec, 3, "bias")?,
            })
        })
        .collect()
}
