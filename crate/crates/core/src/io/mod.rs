//! Text formats: configuration files, dataset manifests, CSV tables.

pub mod config;
pub mod dataset;
pub mod settings;
pub mod tables;

pub use config::{ConfigDoc, ConfigWriter};
pub use dataset::{load_dataset, write_dataset, DatasetManifest};
pub use settings::{
    parse_model, parse_study_config, parse_truth_config, read_model, read_study_config,
    read_truth_config, write_model_text, write_study_section, write_truth_text,
};

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Shortest round-trip decimal; scientific notation for very small or very
/// large magnitudes.
#[derive(Debug, Clone, Copy)]
pub struct Float(pub f64);

impl fmt::Display for Float {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.0.abs();
        if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
            write!(f, "{:e}", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::Float;
    use proptest::prelude::*;

    #[test]
    fn float_forms() {
        assert_eq!(Float(0.1).to_string(), "0.1");
        assert_eq!(Float(2.5e-9).to_string(), "2.5e-9");
        assert_eq!(Float(-3e20).to_string(), "-3e20");
        assert_eq!(Float(0.0).to_string(), "0");
    }

    proptest! {
        #[test]
        fn float_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let back: f64 = Float(x).to_string().parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
