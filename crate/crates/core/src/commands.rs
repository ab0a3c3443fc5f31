//! Batch commands behind the command-line front end.
//!
//! Each command parses and validates all of its inputs before any heavy
//! computation starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;

use crate::bayes::MIN_PREDICTIVE_DRAWS;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{bias_map, loyo_folds, run_eval, PathKind};
use crate::io::config::ConfigWriter;
use crate::io::dataset::{load_dataset, write_dataset, DatasetManifest};
use crate::io::settings::{
    read_model, read_study_config, read_truth_config, write_model_text, write_study_section,
    write_truth_text,
};
use crate::io::tables::{
    draws_file_name, fold_rows, read_bias, read_summary, result_rows, write_bias, write_draws,
    write_field, write_folds, write_results, write_summary, write_table, DEFAULT_DATE_FORMAT,
};
use crate::io::{write_text, Float};
use crate::pipeline::{analyze, fit_model, month_data, AnalysisMode, FittedModel, StudyConfig};
use crate::synth::{generate_study, TruthConfig};

pub const RESULTS_FILE: &str = "results.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";
pub const FOLDS_FILE: &str = "eval_folds.csv";
pub const SUMMARY_FILE: &str = "eval_summary.csv";
pub const BIAS_FILE: &str = "bias_map.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_HEADER: [&str; 7] = [
    "run",
    "location_id",
    "month",
    "path",
    "mean_coverage",
    "mean_rmse",
    "mean_abs_bias",
];

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates a synthetic study. `config` of `None` uses the default study.
pub fn cmd_synth(config: Option<&Path>, out: &Path) -> Result<TruthConfig> {
    let truth = match config {
        Some(p) => read_truth_config(p)?,
        None => TruthConfig::default_study(),
    };
    ensure_dir(out)?;
    let study = generate_study(&truth)?;
    write_dataset(out, &study.dataset, "synthetic")?;
    for h in &study.hidden {
        write_field(
            &out.join("hidden").join(format!("{}.csv", h.name())),
            h,
            DEFAULT_DATE_FORMAT,
        )?;
    }
    write_text(&out.join("truth.txt"), &write_truth_text(&truth))?;
    info!("synthetic study written to {}", out.display());
    Ok(truth)
}

fn load(manifest: &Path) -> Result<(DatasetManifest, Dataset)> {
    let m = DatasetManifest::read(manifest)?;
    let ds = load_dataset(&m)?;
    Ok((m, ds))
}

/// Checks month alignment for every configured month.
fn check_months(ds: &Dataset, cfg: &StudyConfig, need_folds: bool) -> Result<()> {
    for &m in &cfg.months {
        let md = month_data(ds, m, &cfg.years).map_err(|e| e.context(format!("month {m}")))?;
        if need_folds {
            loyo_folds(&md.years()).map_err(|e| e.context(format!("month {m}")))?;
        }
    }
    Ok(())
}

pub fn cmd_fit(
    manifest: &Path,
    study_config: Option<&Path>,
    out_model: &Path,
    seed: Option<u64>,
) -> Result<FittedModel> {
    let mut cfg = match study_config {
        Some(p) => read_study_config(p)?,
        None => StudyConfig::default(),
    };
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    let (_, ds) = load(manifest)?;
    check_months(&ds, &cfg, false)?;
    if let Some(dir) = out_model.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    let model = fit_model(&ds, &cfg)?;
    write_text(out_model, &write_model_text(&model))?;
    info!("model written to {}", out_model.display());
    Ok(model)
}

fn load_with_model(
    manifest: &Path,
    model: &Path,
    seed: Option<u64>,
    need_folds: bool,
) -> Result<(Dataset, FittedModel)> {
    let mut fitted = read_model(model)?;
    if let Some(s) = seed {
        fitted.config.master_seed = s;
    }
    let (_, ds) = load(manifest)?;
    fitted.check_dataset(&ds)?;
    check_months(&ds, &fitted.config, need_folds)?;
    Ok((ds, fitted))
}

fn run_manifest(
    command: &str,
    mode: Option<AnalysisMode>,
    ds: &Dataset,
    model: &FittedModel,
    files: &[String],
) -> String {
    let cfg = &model.config;
    let mut w = ConfigWriter::new();
    w.section("run").kv("command", command);
    if let Some(m) = mode {
        w.kv("mode", m);
    }
    w.kv("master_seed", cfg.master_seed)
        .kv("draws_per_location", cfg.draws_per_location())
        .kv("n_locations", ds.target().len())
        .kv("response", ds.response.name())
        .list("covariates", &ds.covariate_names())
        .list("files", files);
    write_study_section(&mut w, cfg);
    w.finish()
}

pub fn cmd_analyze(
    manifest: &Path,
    model: &Path,
    mode: AnalysisMode,
    out: &Path,
    emit_draws: bool,
    seed: Option<u64>,
) -> Result<Vec<PathBuf>> {
    if emit_draws && !mode.bayes() {
        return Err(Error::Validation(
            "--emit-draws requires the bayes path (mode bayes or both)".into(),
        ));
    }
    let (ds, fitted) = load_with_model(manifest, model, seed, false)?;
    ensure_dir(out)?;
    let analysis = analyze(&ds, &fitted, mode, emit_draws)?;
    for (k, secs) in &analysis.timings {
        info!("{k} = {secs:.3}");
    }
    let mut written = vec![out.join(RESULTS_FILE)];
    write_results(&written[0], &result_rows(&analysis))?;
    if emit_draws {
        for m in &analysis.months {
            let p = out.join(draws_file_name(m.month));
            write_draws(&p, m, fitted.config.n_post_per_sim)?;
            written.push(p);
        }
    }
    let names: Vec<String> = written
        .iter()
        .map(|p| {
            p.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    let rm = out.join(RUN_MANIFEST_FILE);
    write_text(
        &rm,
        &run_manifest("analyze", Some(mode), &ds, &fitted, &names),
    )?;
    written.push(rm);
    Ok(written)
}

pub fn cmd_eval(
    manifest: &Path,
    model: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<Vec<PathBuf>> {
    let (ds, fitted) = load_with_model(manifest, model, seed, true)?;
    if fitted.config.draws_per_location() < MIN_PREDICTIVE_DRAWS {
        return Err(Error::Validation(format!(
            "evaluation needs n_cond_sims x n_post_per_sim >= {MIN_PREDICTIVE_DRAWS}, got {}",
            fitted.config.draws_per_location()
        )));
    }
    ensure_dir(out)?;
    let ev = run_eval(&ds, &fitted, &fitted.config)?;
    let analysis = analyze(&ds, &fitted, AnalysisMode::Both, false)?;
    let results: Vec<_> = analysis
        .months
        .iter()
        .flat_map(|m| m.results.iter().cloned())
        .collect();
    let paths = [
        out.join(FOLDS_FILE),
        out.join(SUMMARY_FILE),
        out.join(BIAS_FILE),
    ];
    write_folds(&paths[0], &fold_rows(&ev.folds))?;
    write_summary(&paths[1], &ev.summary.rows)?;
    write_bias(&paths[2], &bias_map(&results)?)?;
    for p in [PathKind::Naive, PathKind::Bayes] {
        info!("{p} mean coverage {:.4}", ev.summary.overall_coverage(p));
    }
    let names = [FOLDS_FILE, SUMMARY_FILE, BIAS_FILE].map(String::from);
    let rm = out.join(RUN_MANIFEST_FILE);
    write_text(&rm, &run_manifest("eval", None, &ds, &fitted, &names))?;
    let mut written = paths.to_vec();
    written.push(rm);
    Ok(written)
}

/// Joins `eval_summary.csv` (and `bias_map.csv` when present) from each
/// input directory into one `report.csv` under `out`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "report needs at least one input directory".into(),
        ));
    }
    let mut loaded = Vec::new();
    for dir in inputs {
        let summary = read_summary(&dir.join(SUMMARY_FILE))?;
        let bias_path = dir.join(BIAS_FILE);
        let bias = if bias_path.exists() {
            read_bias(&bias_path)?
        } else {
            Vec::new()
        };
        let run = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        loaded.push((run, summary, bias));
    }
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for (run, summary, bias) in loaded {
        let mut abs_bias: BTreeMap<(String, u32), (f64, usize)> = BTreeMap::new();
        for b in &bias {
            let e = abs_bias
                .entry((b.location_id.clone(), b.month))
                .or_insert((0.0, 0));
            e.0 += b.bias.abs();
            e.1 += 1;
        }
        for s in summary {
            let mab = abs_bias
                .get(&(s.location_id.clone(), s.month))
                .map_or_else(String::new, |(sum, n)| Float(sum / *n as f64).to_string());
            rows.push(vec![
                run.clone(),
                s.location_id,
                s.month.to_string(),
                s.path.to_string(),
                Float(s.mean_coverage).to_string(),
                Float(s.mean_rmse).to_string(),
                mab,
            ]);
        }
    }
    let p = out.join(REPORT_FILE);
    write_table(&p, &REPORT_HEADER, &rows)?;
    Ok(p)
}
