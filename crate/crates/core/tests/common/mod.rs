#![allow(dead_code)]

use regrid_uq::pipeline::StudyConfig;
use regrid_uq::synth::TruthConfig;

/// Default-study layout shrunk to `n`×`n` targets, one month and a few years.
pub fn small_truth(seed: u64, n: usize, years: i32) -> TruthConfig {
    let mut t = TruthConfig::default_study();
    t.master_seed = seed;
    t.target_nx = n;
    t.target_ny = n;
    t.months = vec![2];
    t.years = (2000..2000 + years).collect();
    t
}

/// Every native grid coincides with the target grid.
pub fn identity_grids(t: &mut TruthConfig) {
    for c in &mut t.covariates {
        c.native.nx = t.target_nx;
        c.native.ny = t.target_ny;
        c.native.spacing = t.target_spacing;
        c.native.rotation = 0.0;
        c.native.offset = [0.0, 0.0];
    }
}

pub fn study_for(t: &TruthConfig) -> StudyConfig {
    StudyConfig {
        months: t.months.clone(),
        ..Default::default()
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
