//! Dataset manifests.
//!
//! ```text
//! [dataset]
//! date_format = %Y-%m-%d
//! units = W m-2
//!
//! [response]
//! name = ghi
//! grid = grids/target.csv
//! field = fields/ghi.csv
//!
//! [covariate.rcm1]
//! grid = grids/rcm1.csv
//! field = fields/rcm1.csv
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use crate::data::{Dataset, Field};
use crate::error::{Error, Result};
use crate::io::config::{ConfigDoc, ConfigWriter};
use crate::io::tables::{read_field, read_grid, write_field, write_grid, DEFAULT_DATE_FORMAT};
use crate::io::{read_text, write_text};

#[derive(Debug, Clone, PartialEq)]
pub struct SourceEntry {
    pub name: String,
    pub grid: PathBuf,
    pub field: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub date_format: String,
    pub units: String,
    pub response: SourceEntry,
    pub covariates: Vec<SourceEntry>,
}

impl DatasetManifest {
    /// Parses manifest text; relative paths are joined onto `base`.
    pub fn parse(text: &str, source_name: &str, base: &Path) -> Result<Self> {
        let doc = ConfigDoc::parse(text, source_name)?;
        doc.check_sections(&["dataset", "response", "covariate.*"])?;
        let missing = |what: &str| Error::Parse {
            source_name: source_name.to_string(),
            line: 0,
            message: format!("manifest has no [{what}] section"),
        };
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let (date_format, units) = match doc.section("dataset") {
            Some(sec) => {
                let r = doc.reader(sec);
                let f = r.get_or("date_format", DEFAULT_DATE_FORMAT.to_string())?;
                let u = r.get_or("units", String::new())?;
                r.finish()?;
                (f, u)
            }
            None => (DEFAULT_DATE_FORMAT.to_string(), String::new()),
        };
        let sec = doc.section("response").ok_or_else(|| missing("response"))?;
        let r = doc.reader(sec);
        let response = SourceEntry {
            name: r.require("name")?,
            grid: resolve(r.require("grid")?),
            field: resolve(r.require("field")?),
        };
        r.finish()?;
        let mut covariates = Vec::new();
        for (name, sec) in doc.sections_with_prefix("covariate.") {
            let r = doc.reader(sec);
            covariates.push(SourceEntry {
                name: name.to_string(),
                grid: resolve(r.require("grid")?),
                field: resolve(r.require("field")?),
            });
            r.finish()?;
        }
        if covariates.is_empty() {
            return Err(missing("covariate.NAME"));
        }
        Ok(Self {
            date_format,
            units,
            response,
            covariates,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&read_text(path)?, &path.display().to_string(), base)
    }

    /// Checks that every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        for s in self.sources() {
            for p in [&s.grid, &s.field] {
                std::fs::metadata(p).map_err(|e| Error::io(p.clone(), e))?;
            }
        }
        Ok(())
    }

    pub fn sources(&self) -> impl Iterator<Item = &SourceEntry> {
        std::iter::once(&self.response).chain(self.covariates.iter())
    }

    /// Manifest text with paths written relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut w = ConfigWriter::new();
        w.section("dataset")
            .kv("date_format", &self.date_format)
            .kv("units", &self.units);
        w.section("response")
            .kv("name", &self.response.name)
            .kv("grid", rel(&self.response.grid))
            .kv("field", rel(&self.response.field));
        for c in &self.covariates {
            w.section(&format!("covariate.{}", c.name))
                .kv("grid", rel(&c.grid))
                .kv("field", rel(&c.field));
        }
        w.finish()
    }
}

fn load_source(s: &SourceEntry, grid_id: &str, date_format: &str) -> Result<Field> {
    let grid = read_grid(&s.grid, grid_id)?;
    read_field(&s.field, &s.name, &grid, date_format)
}

/// Reads every grid and field referenced by the manifest.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.check_files()?;
    let response = load_source(&manifest.response, "target", &manifest.date_format)?;
    let covariates = manifest
        .covariates
        .iter()
        .map(|c| load_source(c, &c.name, &manifest.date_format))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(response, covariates)
}

/// Writes `grids/`, `fields/` and `manifest.txt` under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset, units: &str) -> Result<DatasetManifest> {
    let entry = |f: &Field, grid_name: &str| SourceEntry {
        name: f.name().to_string(),
        grid: dir.join("grids").join(format!("{grid_name}.csv")),
        field: dir.join("fields").join(format!("{}.csv", f.name())),
    };
    let manifest = DatasetManifest {
        date_format: DEFAULT_DATE_FORMAT.to_string(),
        units: units.to_string(),
        response: entry(&ds.response, "target"),
        covariates: ds.covariates.iter().map(|c| entry(c, c.name())).collect(),
    };
    for (s, f) in manifest.sources().zip(ds.sources()) {
        write_grid(&s.grid, f.grid())?;
        write_field(&s.field, f, &manifest.date_format)?;
    }
    write_text(&dir.join("manifest.txt"), &manifest.to_text(dir))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use chrono::NaiveDate;
    use nalgebra::DMatrix;

    fn tiny() -> Dataset {
        let g = |id: &str, x: f64| Grid::new(id, vec![[x, 0.0], [x + 1.0, 0.0]]).unwrap();
        let dates = vec![
            NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2000, 1, 2).unwrap(),
        ];
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.5]);
        Dataset::new(
            Field::new("y", g("target", 0.0), dates.clone(), v.clone()).unwrap(),
            vec![Field::new("x1", g("x1", 0.3), dates, v * 2.0).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let m = write_dataset(dir.path(), &ds, "units").unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(text.contains("field = fields/x1.csv"));
        let back = DatasetManifest::read(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(back, m);
        assert_eq!(load_dataset(&back).unwrap(), ds);
    }

    #[test]
    fn missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &tiny(), "").unwrap();
        std::fs::remove_file(dir.path().join("fields/x1.csv")).unwrap();
        let m = DatasetManifest::read(&dir.path().join("manifest.txt")).unwrap();
        let e = load_dataset(&m).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
        assert!(e.to_string().contains("fields/x1.csv"), "{e}");
    }

    #[test]
    fn manifest_errors() {
        let base = Path::new("/tmp");
        assert!(
            DatasetManifest::parse("[response]\nname = y\ngrid = g\nfield = f\n", "m", base)
                .is_err()
        );
        let e = DatasetManifest::parse(
            "[response]\nname = y\ngrid = g\nfield = f\nextra = 1\n[covariate.a]\ngrid = g\nfield = f\n",
            "m",
            base,
        )
        .unwrap_err();
        assert!(e.to_string().contains("extra") && e.to_string().contains("line 5"));
    }
}
