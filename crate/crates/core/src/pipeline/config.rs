use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use thiserror::Error;

use super::synth::SynthSpec;
use super::Variant;
use crate::features::{FeatureParams, WalkParams};
use crate::geomodel::{AmenityCategory, FilterRules, LayerPaths};
use crate::gbt::TrainConfig;
use crate::spatialcv::{CONFLICT_RADIUS_M, K_FOLDS, TILE_SIDE_M};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}`: {message}")]
    BadValue { key: String, value: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Every setting of a run. Built from defaults, then a key=value file,
/// then command-line overrides, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub variant: Variant,
    /// Input layers; defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    layer_overrides: BTreeMap<&'static str, PathBuf>,
    pub features: FeatureParams,
    pub filter: FilterRules,
    pub tile_side_m: f64,
    pub conflict_radius_m: f64,
    pub k_folds: usize,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

const LAYERS: [&str; 6] = ["blocks", "listings", "amenities", "landuse", "security", "roads"];

impl Default for RunConfig {
    fn default() -> Self {
        let mut filter = FilterRules::default();
        filter.require_price = false;
        Self {
            out: PathBuf::from("run"),
            seed: 0,
            variant: Variant::Full,
            data_dir: None,
            layer_overrides: BTreeMap::new(),
            features: FeatureParams::default(),
            filter,
            tile_side_m: TILE_SIDE_M,
            conflict_radius_m: CONFLICT_RADIUS_M,
            k_folds: K_FOLDS,
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl RunConfig {
    /// Parses a flat `key = value` file; blank lines and `#` comments are
    /// ignored.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            out.push((k.to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for (k, v) in Self::parse_text(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies `key=value` (the form used by `--set`).
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if let Some(layer) = LAYERS.iter().find(|l| **l == key) {
            self.layer_overrides.insert(layer, PathBuf::from(value));
            return Ok(());
        }
        if let Some(cat) = key.strip_prefix("walk_k_") {
            let k: usize = parse(key, value)?;
            if cat == "default" {
                self.features.walk.default_k = k;
            } else {
                let c = AmenityCategory::from_str(cat).map_err(|_| ConfigError::UnknownKey(key.into()))?;
                self.features.walk.k_by_category.insert(c, k);
            }
            return Ok(());
        }
        match key {
            "out" => self.out = PathBuf::from(value),
            "seed" => {
                self.seed = parse(key, value)?;
                self.synth.seed = self.seed;
                self.train.seed = self.seed;
            }
            "variant" => self.variant = value.parse().map_err(|m| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
                message: m,
            })?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "walk_max_distance_m" => self.features.walk.max_distance_m = parse(key, value)?,
            "egohood_radius_m" => self.features.egohood_radius_m = parse(key, value)?,
            "tile_side_m" => self.tile_side_m = parse(key, value)?,
            "conflict_radius_m" => self.conflict_radius_m = parse(key, value)?,
            "k_folds" => self.k_folds = parse(key, value)?,
            "reference_date" => {
                self.filter.reference_date = NaiveDate::parse_from_str(value, "%Y-%m-%d").map_err(|e| {
                    ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        message: e.to_string(),
                    }
                })?
            }
            "max_age_days" => {
                self.filter.max_age_days = if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "allowed_kinds" => self.filter.allowed_kinds = parse_list(value).into_iter().collect(),
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "lambda" => self.train.lambda = parse(key, value)?,
            "alpha" => self.train.alpha = parse(key, value)?,
            "gamma" => self.train.gamma = parse(key, value)?,
            "min_child_weight" => self.train.min_child_weight = parse(key, value)?,
            "max_depth" => self.train.max_depth = parse(key, value)?,
            "n_estimators" => self.train.n_estimators = parse(key, value)?,
            "early_stopping_rounds" => self.train.early_stopping_rounds = parse(key, value)?,
            "synth_blocks" => self.synth.blocks = parse(key, value)?,
            "synth_listings" => self.synth.listings = parse(key, value)?,
            "synth_noise" => self.synth.noise_scale = parse(key, value)?,
            "synth_neighborhood_share" => self.synth.neighborhood_share = parse(key, value)?,
            "synth_amenity_scale" => self.synth.amenity_scale = parse(key, value)?,
            "synth_unpriced_fraction" => self.synth.unpriced_fraction = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn layer_paths(&self) -> LayerPaths {
        let mut p = LayerPaths::in_dir(self.data_dir());
        for (k, v) in &self.layer_overrides {
            let slot = match *k {
                "blocks" => &mut p.blocks,
                "listings" => &mut p.listings,
                "amenities" => &mut p.amenities,
                "landuse" => &mut p.landuse,
                "security" => &mut p.security,
                _ => &mut p.roads,
            };
            *slot = v.clone();
        }
        p
    }

    pub fn walk(&self) -> &WalkParams {
        &self.features.walk
    }

    /// Effective settings as sorted key/value pairs, recorded in manifests.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("out", self.out.display().to_string());
        put("seed", self.seed.to_string());
        put("variant", self.variant.to_string());
        put("data_dir", self.data_dir().display().to_string());
        let lp = self.layer_paths();
        for (k, v) in LAYERS.iter().zip([&lp.blocks, &lp.listings, &lp.amenities, &lp.landuse, &lp.security, &lp.roads]) {
            put(k, v.display().to_string());
        }
        put("walk_max_distance_m", self.features.walk.max_distance_m.to_string());
        put("walk_k_default", self.features.walk.default_k.to_string());
        for (c, k) in &self.features.walk.k_by_category {
            put(&format!("walk_k_{}", c.as_str()), k.to_string());
        }
        put("egohood_radius_m", self.features.egohood_radius_m.to_string());
        put("tile_side_m", self.tile_side_m.to_string());
        put("conflict_radius_m", self.conflict_radius_m.to_string());
        put("k_folds", self.k_folds.to_string());
        put("reference_date", self.filter.reference_date.format("%Y-%m-%d").to_string());
        put(
            "max_age_days",
            self.filter.max_age_days.map_or("none".into(), |d| d.to_string()),
        );
        put(
            "allowed_kinds",
            self.filter.allowed_kinds.iter().cloned().collect::<Vec<_>>().join(","),
        );
        let t = &self.train;
        put("learning_rate", t.learning_rate.to_string());
        put("lambda", t.lambda.to_string());
        put("alpha", t.alpha.to_string());
        put("gamma", t.gamma.to_string());
        put("min_child_weight", t.min_child_weight.to_string());
        put("max_depth", t.max_depth.to_string());
        put("n_estimators", t.n_estimators.to_string());
        put("early_stopping_rounds", t.early_stopping_rounds.to_string());
        let s = &self.synth;
        put("synth_blocks", s.blocks.to_string());
        put("synth_listings", s.listings.to_string());
        put("synth_noise", s.noise_scale.to_string());
        put("synth_neighborhood_share", s.neighborhood_share.to_string());
        put("synth_amenity_scale", s.amenity_scale.to_string());
        put("synth_unpriced_fraction", s.unpriced_fraction.to_string());
        m
    }
}
