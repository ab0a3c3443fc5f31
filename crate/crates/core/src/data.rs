//! Daily gridded fields and the datasets built from them.

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// One variable on one grid: days × locations, dates strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    name: String,
    grid: Grid,
    dates: Vec<NaiveDate>,
    values: DMatrix<f64>,
}

impl Field {
    pub fn new(
        name: impl Into<String>,
        grid: Grid,
        dates: Vec<NaiveDate>,
        values: DMatrix<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if values.nrows() != dates.len() || values.ncols() != grid.len() {
            return Err(Error::Validation(format!(
                "field '{name}': values are {}x{}, expected {} days x {} locations",
                values.nrows(),
                values.ncols(),
                dates.len(),
                grid.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "field '{name}': dates not strictly increasing at {}",
                w[1]
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::Validation(format!(
                "field '{name}': non-finite value on {} at location {}",
                dates[r],
                grid.point_ids()[c]
            )));
        }
        Ok(Self {
            name,
            grid,
            dates,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn years(&self) -> BTreeSet<i32> {
        self.dates.iter().map(|d| d.year()).collect()
    }

    pub fn date_position(&self, d: &NaiveDate) -> Option<usize> {
        self.dates.binary_search(d).ok()
    }

    /// Rows for the given dates, in the given order.
    pub fn rows_for(&self, dates: &[NaiveDate]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(dates.len(), self.grid.len());
        for (i, d) in dates.iter().enumerate() {
            let r = self.date_position(d).ok_or_else(|| {
                Error::Alignment(format!("field '{}' has no data for {d}", self.name))
            })?;
            out.row_mut(i).copy_from(&self.values.row(r));
        }
        Ok(out)
    }
}

/// Response on the target grid plus covariates on their native grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub response: Field,
    pub covariates: Vec<Field>,
}

impl Dataset {
    pub fn new(response: Field, covariates: Vec<Field>) -> Result<Self> {
        if covariates.is_empty() {
            return Err(Error::Validation(
                "dataset needs at least one covariate".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for c in &covariates {
            if c.name() == response.name() || !seen.insert(c.name().to_string()) {
                return Err(Error::Validation(format!(
                    "duplicate field name '{}'",
                    c.name()
                )));
            }
        }
        Ok(Self {
            response,
            covariates,
        })
    }

    pub fn target(&self) -> &Grid {
        self.response.grid()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates
            .iter()
            .map(|c| c.name().to_string())
            .collect()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Field> {
        std::iter::once(&self.response).chain(self.covariates.iter())
    }
}
