//! Study, truth and fitted-model files.
//!
//! ```text
//! [study]
//! months = 2, 5, 8, 11
//! years = 1998..2009
//! n_cond_sims = 100
//!
//! [month.2]
//! response_nu = 12.5
//!
//! [month.2.covariate.rcm1]
//! nu = 120.1
//! cov_params = rho=0.25 theta_km=150 mu=5.5 jitter=1e-9
//! retained = true
//! degenerate = false
//! ```

use std::path::Path;

use crate::arma::EtaFamily;
use crate::error::{Error, Result};
use crate::gp::CovParams;
use crate::io::config::{ConfigDoc, ConfigWriter, Section};
use crate::io::{read_text, Float};
use crate::pipeline::{CovariateModel, FittedModel, MonthModel, StudyConfig};
use crate::synth::{CovariateTruth, NativeSpec, TruthConfig};
use crate::transform::TransformSpec;

fn parse_err(doc: &ConfigDoc, line: usize, message: String) -> Error {
    Error::Parse {
        source_name: doc.source_name.clone(),
        line,
        message,
    }
}

fn parse_family(s: &str) -> Result<Option<EtaFamily>> {
    match s {
        "none" => Ok(None),
        other => other.parse::<EtaFamily>().map(Some),
    }
}

fn family_label(f: Option<EtaFamily>) -> String {
    f.map_or_else(|| "none".to_string(), |f| f.to_string())
}

/// Reads `[study]` keys over the defaults.
fn study_from_section(doc: &ConfigDoc, sec: &Section) -> Result<StudyConfig> {
    let r = doc.reader(sec);
    let d = StudyConfig::default();
    let arma_family = match r.raw("arma_family") {
        None => d.arma_family,
        Some(e) => parse_family(&e.value).map_err(|err| {
            parse_err(
                doc,
                e.line,
                format!("bad value for key 'arma_family': {err}"),
            )
        })?,
    };
    let cfg = StudyConfig {
        months: r.list("months")?.unwrap_or(d.months),
        years: r.list("years")?.unwrap_or(d.years),
        n_cond_sims: r.get_or("n_cond_sims", d.n_cond_sims)?,
        n_post_per_sim: r.get_or("n_post_per_sim", d.n_post_per_sim)?,
        ci_level: r.get_or("ci_level", d.ci_level)?,
        drop_pvalue: r.get_or("drop_pvalue", d.drop_pvalue)?,
        response_scale: r.get_or("response_scale", d.response_scale)?,
        sigma2_mode: r.get_or("sigma2_mode", d.sigma2_mode)?,
        arma_family,
        master_seed: r.get_or("master_seed", d.master_seed)?,
        jitter_rel: r.get_or("jitter_rel", d.jitter_rel)?,
        seasonal: r.get_or("seasonal", d.seasonal)?,
        nu_quantile: r.get_or("nu_quantile", d.nu_quantile)?,
        eta_grid_points: r.get_or("eta_grid_points", d.eta_grid_points)?,
    };
    r.finish()?;
    cfg.validate()
        .map_err(|e| parse_err(doc, sec.line, format!("[{}]: {e}", sec.name)))?;
    Ok(cfg)
}

/// A study configuration file holds a single `[study]` section. An empty
/// file yields the defaults.
pub fn parse_study_config(text: &str, source_name: &str) -> Result<StudyConfig> {
    let doc = ConfigDoc::parse(text, source_name)?;
    doc.check_sections(&["study"])?;
    match doc.section("study") {
        Some(sec) => study_from_section(&doc, sec),
        None => Ok(StudyConfig::default()),
    }
}

pub fn read_study_config(path: &Path) -> Result<StudyConfig> {
    parse_study_config(&read_text(path)?, &path.display().to_string())
}

pub fn write_study_section(w: &mut ConfigWriter, cfg: &StudyConfig) {
    w.section("study")
        .list("months", &cfg.months)
        .list("years", &cfg.years)
        .kv("n_cond_sims", cfg.n_cond_sims)
        .kv("n_post_per_sim", cfg.n_post_per_sim)
        .kv("ci_level", Float(cfg.ci_level))
        .kv("drop_pvalue", Float(cfg.drop_pvalue))
        .kv("response_scale", cfg.response_scale)
        .kv("sigma2_mode", cfg.sigma2_mode)
        .kv("arma_family", family_label(cfg.arma_family))
        .kv("master_seed", cfg.master_seed)
        .kv("jitter_rel", Float(cfg.jitter_rel))
        .kv("seasonal", cfg.seasonal)
        .kv("nu_quantile", Float(cfg.nu_quantile))
        .kv("eta_grid_points", cfg.eta_grid_points);
}

/// Missing sections and keys fall back to [`TruthConfig::default_study`];
/// listing any `[covariate.NAME]` section replaces the default covariates.
pub fn parse_truth_config(text: &str, source_name: &str) -> Result<TruthConfig> {
    let doc = ConfigDoc::parse(text, source_name)?;
    doc.check_sections(&["truth", "target", "covariate.*"])?;
    let mut cfg = TruthConfig::default_study();
    if let Some(sec) = doc.section("truth") {
        let r = doc.reader(sec);
        cfg.response_name = r.get_or("response_name", cfg.response_name)?;
        cfg.master_seed = r.get_or("master_seed", cfg.master_seed)?;
        cfg.beta0 = r.get_or("beta0", cfg.beta0)?;
        cfg.gamma = r.list("gamma")?.unwrap_or(cfg.gamma);
        cfg.noise_sd = r.get_or("noise_sd", cfg.noise_sd)?;
        cfg.days_per_month = r.get_or("days_per_month", cfg.days_per_month)?;
        cfg.months = r.list("months")?.unwrap_or(cfg.months);
        cfg.years = r.list("years")?.unwrap_or(cfg.years);
        r.finish()?;
    }
    if let Some(sec) = doc.section("target") {
        let r = doc.reader(sec);
        cfg.target_nx = r.get_or("nx", cfg.target_nx)?;
        cfg.target_ny = r.get_or("ny", cfg.target_ny)?;
        cfg.target_spacing = r.get_or("spacing_km", cfg.target_spacing)?;
        cfg.target_origin[0] = r.get_or("origin_x_km", cfg.target_origin[0])?;
        cfg.target_origin[1] = r.get_or("origin_y_km", cfg.target_origin[1])?;
        r.finish()?;
    }
    let template = cfg.covariates[0].clone();
    let mut covs = Vec::new();
    for (name, sec) in doc.sections_with_prefix("covariate.") {
        if name.is_empty() {
            return Err(parse_err(&doc, sec.line, "empty covariate name".into()));
        }
        let r = doc.reader(sec);
        let t = &template;
        let params = CovParams {
            rho: r.get_or("rho", t.params.rho)?,
            theta: r.get_or("theta_km", t.params.theta)?,
            mu: r.get_or("mu", t.params.mu)?,
            jitter: 0.0,
        };
        let c = CovariateTruth {
            name: name.to_string(),
            native: NativeSpec {
                nx: r.get_or("nx", t.native.nx)?,
                ny: r.get_or("ny", t.native.ny)?,
                spacing: r.get_or("spacing_km", t.native.spacing)?,
                rotation: r.get_or("rotation_rad", 0.0)?,
                offset: [r.get_or("offset_x_km", 0.0)?, r.get_or("offset_y_km", 0.0)?],
            },
            params,
            beta: r.require("beta")?,
        };
        r.finish()?;
        covs.push(c);
    }
    if !covs.is_empty() {
        cfg.covariates = covs;
    }
    cfg.validate()
        .map_err(|e| parse_err(&doc, 0, e.to_string()))?;
    Ok(cfg)
}

pub fn read_truth_config(path: &Path) -> Result<TruthConfig> {
    parse_truth_config(&read_text(path)?, &path.display().to_string())
}

pub fn write_truth_text(cfg: &TruthConfig) -> String {
    let mut w = ConfigWriter::new();
    w.section("truth")
        .kv("response_name", &cfg.response_name)
        .kv("master_seed", cfg.master_seed)
        .kv("beta0", Float(cfg.beta0))
        .list(
            "gamma",
            &cfg.gamma.iter().map(|g| Float(*g)).collect::<Vec<_>>(),
        )
        .kv("noise_sd", Float(cfg.noise_sd))
        .kv("days_per_month", cfg.days_per_month)
        .list("months", &cfg.months)
        .list("years", &cfg.years);
    w.section("target")
        .kv("nx", cfg.target_nx)
        .kv("ny", cfg.target_ny)
        .kv("spacing_km", Float(cfg.target_spacing))
        .kv("origin_x_km", Float(cfg.target_origin[0]))
        .kv("origin_y_km", Float(cfg.target_origin[1]));
    for c in &cfg.covariates {
        w.section(&format!("covariate.{}", c.name))
            .kv("beta", Float(c.beta))
            .kv("nx", c.native.nx)
            .kv("ny", c.native.ny)
            .kv("spacing_km", Float(c.native.spacing))
            .kv("rotation_rad", Float(c.native.rotation))
            .kv("offset_x_km", Float(c.native.offset[0]))
            .kv("offset_y_km", Float(c.native.offset[1]))
            .kv("rho", Float(c.params.rho))
            .kv("theta_km", Float(c.params.theta))
            .kv("mu", Float(c.params.mu));
    }
    w.finish()
}

pub fn write_model_text(model: &FittedModel) -> String {
    let mut w = ConfigWriter::new();
    w.comment("fitted model");
    write_study_section(&mut w, &model.config);
    for m in &model.months {
        w.section(&format!("month.{}", m.month))
            .kv("response_nu", Float(m.response_transform.nu()));
        for c in &m.covariates {
            w.section(&format!("month.{}.covariate.{}", m.month, c.name))
                .kv("nu", Float(c.transform.nu()))
                .kv("cov_params", c.params)
                .kv("retained", c.retained)
                .kv("degenerate", c.degenerate);
        }
    }
    w.finish()
}

pub fn parse_model(text: &str, source_name: &str) -> Result<FittedModel> {
    let doc = ConfigDoc::parse(text, source_name)?;
    doc.check_sections(&["study", "month.*"])?;
    let study = doc
        .section("study")
        .ok_or_else(|| parse_err(&doc, 0, "model file has no [study] section".into()))?;
    let config = study_from_section(&doc, study)?;

    let mut months: Vec<MonthModel> = Vec::new();
    for (rest, sec) in doc.sections_with_prefix("month.") {
        let (month_s, cov) = match rest.split_once(".covariate.") {
            Some((m, c)) => (m, Some(c)),
            None => (rest, None),
        };
        let month: u32 = month_s.parse().map_err(|_| {
            parse_err(
                &doc,
                sec.line,
                format!("bad month in section [{}]", sec.name),
            )
        })?;
        let r = doc.reader(sec);
        match cov {
            None => {
                if months.iter().any(|m| m.month == month) {
                    return Err(parse_err(
                        &doc,
                        sec.line,
                        format!("month {month} listed twice"),
                    ));
                }
                let nu: f64 = r.require("response_nu")?;
                let response_transform = TransformSpec::new(nu)
                    .map_err(|e| parse_err(&doc, sec.line, format!("response_nu: {e}")))?;
                months.push(MonthModel {
                    month,
                    response_transform,
                    covariates: Vec::new(),
                });
            }
            Some(name) => {
                let m = months
                    .iter_mut()
                    .find(|m| m.month == month)
                    .ok_or_else(|| {
                        parse_err(
                            &doc,
                            sec.line,
                            format!("[{}] precedes [month.{month}]", sec.name),
                        )
                    })?;
                let nu: f64 = r.require("nu")?;
                let transform = TransformSpec::new(nu)
                    .map_err(|e| parse_err(&doc, sec.line, format!("nu: {e}")))?;
                m.covariates.push(CovariateModel {
                    name: name.to_string(),
                    transform,
                    params: r.require("cov_params")?,
                    retained: r.require("retained")?,
                    degenerate: r.get_or("degenerate", false)?,
                });
            }
        }
        r.finish()?;
    }
    let listed: Vec<u32> = months.iter().map(|m| m.month).collect();
    let mut want = config.months.clone();
    let mut got = listed.clone();
    want.sort();
    got.sort();
    if want != got {
        return Err(parse_err(
            &doc,
            study.line,
            format!(
                "months in [study] {:?} do not match month sections {:?}",
                config.months, listed
            ),
        ));
    }
    let names: Vec<Vec<&str>> = months
        .iter()
        .map(|m| m.covariates.iter().map(|c| c.name.as_str()).collect())
        .collect();
    if names.iter().any(|n| n.is_empty() || *n != names[0]) {
        return Err(parse_err(
            &doc,
            0,
            "every month needs the same covariate sections".into(),
        ));
    }
    Ok(FittedModel { config, months })
}

pub fn read_model(path: &Path) -> Result<FittedModel> {
    parse_model(&read_text(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ResponseScale;

    #[test]
    fn study_defaults_and_overrides() {
        assert_eq!(parse_study_config("", "s").unwrap(), StudyConfig::default());
        let c = parse_study_config(
            "[study]\nmonths = 5\nyears = 2000..2003\nresponse_scale = raw\narma_family = AR1\nseasonal = true\n",
            "s",
        )
        .unwrap();
        assert_eq!(c.months, vec![5]);
        assert_eq!(c.years, vec![2000, 2001, 2002, 2003]);
        assert_eq!(c.response_scale, ResponseScale::Raw);
        assert_eq!(c.arma_family, Some(EtaFamily::Ar1));
        assert!(c.seasonal);
        let e = parse_study_config("[study]\nci_level = 2\n", "s").unwrap_err();
        assert!(e.to_string().contains("ci_level"));
        let e = parse_study_config("[study]\n\nn_cond_simz = 3\n", "s").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        assert!(e.to_string().contains("n_cond_simz"));
    }

    #[test]
    fn study_round_trip() {
        let mut c = StudyConfig::default();
        c.years = vec![2001, 2002];
        c.arma_family = Some(EtaFamily::Ma1);
        c.jitter_rel = 1.5e-9;
        let mut w = ConfigWriter::new();
        write_study_section(&mut w, &c);
        assert_eq!(parse_study_config(&w.finish(), "w").unwrap(), c);
    }

    #[test]
    fn truth_round_trip() {
        let mut t = TruthConfig::default_study();
        t.gamma = vec![0.1, -0.2];
        let text = write_truth_text(&t);
        assert_eq!(parse_truth_config(&text, "t").unwrap(), t);
        assert_eq!(
            parse_truth_config("", "t").unwrap(),
            TruthConfig::default_study()
        );
        let e = parse_truth_config("[truth]\nnoise = 1\n", "t").unwrap_err();
        assert!(e.to_string().contains("noise") && e.to_string().contains("line 2"));
        let e = parse_truth_config("[covariate.a]\nnx = 3\n", "t").unwrap_err();
        assert!(e.to_string().contains("beta"));
    }

    fn tiny_model() -> FittedModel {
        let mut config = StudyConfig::default();
        config.months = vec![2, 5];
        let cov = |name: &str, retained| CovariateModel {
            name: name.into(),
            transform: TransformSpec::new(3.25).unwrap(),
            params: CovParams::new(0.3, 120.5, 4.0, 1e-9).unwrap(),
            retained,
            degenerate: false,
        };
        let month = |m| MonthModel {
            month: m,
            response_transform: TransformSpec::new(7.0).unwrap(),
            covariates: vec![cov("a", true), cov("b", false)],
        };
        FittedModel {
            config,
            months: vec![month(2), month(5)],
        }
    }

    #[test]
    fn model_round_trip() {
        let m = tiny_model();
        let text = write_model_text(&m);
        assert_eq!(text.matches("cov_params").count(), 4);
        let back = parse_model(&text, "m").unwrap();
        assert_eq!(write_model_text(&back), text);
        assert_eq!(back.months[1].covariates[1], m.months[1].covariates[1]);
    }

    #[test]
    fn model_inconsistencies_rejected() {
        let text = write_model_text(&tiny_model());
        let dropped = text.replace("[month.5.covariate.b]", "[month.5.covariate.c]");
        assert!(parse_model(&dropped, "m").is_err());
        let wrong = text.replace("months = 2, 5", "months = 2");
        assert!(parse_model(&wrong, "m").is_err());
        let bad = text.replacen("theta_km=120.5", "theta_km=-1", 1);
        let e = parse_model(&bad, "m").unwrap_err();
        assert!(e.to_string().contains("cov_params"));
    }
}
