//! Stage orchestration, run configuration, content-hash manifests and the
//! synthetic city generator.

mod config;
mod manifest;
mod stages;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::egohood::{DesignColumn, FeatureGroup};

pub use config::{ConfigError, RunConfig};
pub use manifest::{sha256_file, FileHash, Manifest, MANIFEST_DIR};
pub use stages::{
    run_egohood, run_evaluate, run_explain, run_features, run_folds, run_ingest, run_nowcast, run_synth, run_train,
    StagePaths,
};
pub use synth::{oracle_price, synth_city, Oracle, OracleListing, SynthCity, SynthSpec, NEIGHBORHOOD_TERMS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{detail}; rerun `{stage}`")]
    Stale { stage: String, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Load(#[from] crate::geomodel::LoadError),
    #[error(transparent)]
    Features(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Egohood(#[from] crate::egohood::EgohoodError),
    #[error(transparent)]
    Design(#[from] crate::egohood::DesignError),
    #[error(transparent)]
    Table(#[from] crate::table::TableError),
    #[error(transparent)]
    Cv(#[from] crate::spatialcv::CvError),
    #[error(transparent)]
    Model(#[from] crate::gbt::GbtError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

/// Which design-matrix columns a model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Property,
    Full,
    Open,
}

/// Columns removed from the open variant: they come from layers without an
/// open license.
pub const CLOSED_NEIGHBORHOOD_COLUMNS: [&str; 2] = ["security_mean", "avg_property_tax"];
pub const CLOSED_PROPERTY_ATTRIBUTES: [&str; 1] = ["property_taxes"];

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Property, Variant::Full, Variant::Open];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Property => "property",
            Variant::Full => "full",
            Variant::Open => "open",
        }
    }

    pub fn includes(self, col: &DesignColumn) -> bool {
        match self {
            Variant::Property => col.group == FeatureGroup::Property,
            Variant::Full => true,
            Variant::Open => {
                if col.group == FeatureGroup::Property {
                    let attr = col.name.split_once('=').map_or(col.name.as_str(), |(a, _)| a);
                    !CLOSED_PROPERTY_ATTRIBUTES.contains(&attr)
                } else {
                    !CLOSED_NEIGHBORHOOD_COLUMNS.contains(&col.name.as_str())
                }
            }
        }
    }

    /// Indices of the retained columns, in design order.
    pub fn select(self, columns: &[DesignColumn]) -> Vec<usize> {
        (0..columns.len()).filter(|&i| self.includes(&columns[i])).collect()
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "property" => Ok(Variant::Property),
            "full" => Ok(Variant::Full),
            "open" => Ok(Variant::Open),
            other => Err(format!("unknown variant `{other}` (allowed: property, full, open)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(g: FeatureGroup, n: &str) -> DesignColumn {
        DesignColumn {
            group: g,
            name: n.into(),
        }
    }

    #[test]
    fn open_variant_drops_exactly_the_closed_columns() {
        let cols = vec![
            col(FeatureGroup::Property, "square_meters"),
            col(FeatureGroup::Property, "property_taxes"),
            col(FeatureGroup::EgoPlace, "security_mean"),
            col(FeatureGroup::EgoPlace, "lum"),
            col(FeatureGroup::Egohood, "security_mean"),
            col(FeatureGroup::Egohood, "avg_property_tax"),
            col(FeatureGroup::Egohood, "walk_coffee"),
            col(FeatureGroup::EgoPlace, "avg_property_tax"),
        ];
        assert_eq!(Variant::Open.select(&cols), vec![0, 3, 6]);
        assert_eq!(Variant::Property.select(&cols), vec![0, 1]);
        assert_eq!(Variant::Full.select(&cols).len(), cols.len());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("closed".parse::<Variant>().is_err());
    }
}
