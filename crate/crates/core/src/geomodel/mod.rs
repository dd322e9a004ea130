//! Domain data model, layer ingestion and ego-place assignment.

mod assign;
mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{LonLat, Polygon};

pub use assign::{AssignError, Assignment, BlockIndex, FALLBACK_RADIUS_M};
pub use io::{
    load_dataset, read_amenities, read_blocks, read_landuse, read_listings, read_roads, read_security,
    write_amenities, write_blocks, write_landuse, write_listings, write_roads, write_security,
};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{layer} layer: missing file {path}")]
    MissingFile { layer: &'static str, path: PathBuf },
    #[error("{layer} layer: cannot read {path}: {source}")]
    Io {
        layer: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{layer} layer, {location}: {message}")]
    Schema {
        layer: &'static str,
        location: String,
        message: String,
    },
    #[error("amenities layer, row {row}: unknown category `{value}` (allowed: {allowed})")]
    UnknownCategory { row: usize, value: String, allowed: String },
    #[error("landuse layer, feature {feature}: unknown klass `{value}` (allowed: {allowed})")]
    UnknownLandUse { feature: usize, value: String, allowed: String },
    #[error("{layer} layer: duplicate id `{id}`")]
    DuplicateId { layer: &'static str, id: String },
}

impl LoadError {
    pub(crate) fn schema(layer: &'static str, location: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema {
            layer,
            location: location.into(),
            message: message.into(),
        }
    }
}

/// A census block: the ego-place unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusBlock {
    pub id: String,
    /// One or more parts (multi-part blocks are rare but real).
    pub polygons: Vec<Polygon>,
    pub centroid: LonLat,
    pub area_m2: f64,
    pub population: u64,
    pub buildings_total: u64,
    pub buildings_residential: u64,
    pub buildings_commercial: u64,
    pub buildings_by_year_bracket: BTreeMap<String, u64>,
    pub companies: u64,
    pub company_avg_size: f64,
    pub employees: u64,
    pub shops: u64,
    pub heavy_industries: u64,
    pub avg_property_tax: f64,
    /// Company counts keyed by two-digit ATECO division.
    pub companies_by_ateco: BTreeMap<u32, u64>,
}

impl CensusBlock {
    pub fn covers(&self, p: LonLat) -> bool {
        self.polygons.iter().any(|poly| poly.covers(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeKind {
    Numeric,
    /// Absent unless the listing says otherwise.
    Boolean,
    Categorical,
}

/// The 25 property attributes, in listings.csv column order.
pub const PROPERTY_ATTRIBUTES: [(&str, AttributeKind); 25] = [
    ("square_meters", AttributeKind::Numeric),
    ("built_year", AttributeKind::Numeric),
    ("energy_certification", AttributeKind::Categorical),
    ("monthly_expenses", AttributeKind::Numeric),
    ("floor", AttributeKind::Numeric),
    ("heating_type", AttributeKind::Categorical),
    ("fixtures", AttributeKind::Categorical),
    ("garden", AttributeKind::Boolean),
    ("furnished", AttributeKind::Boolean),
    ("terrace", AttributeKind::Boolean),
    ("sun_exposition", AttributeKind::Categorical),
    ("kitchen_type", AttributeKind::Categorical),
    ("spa", AttributeKind::Boolean),
    ("cellar", AttributeKind::Boolean),
    ("garage", AttributeKind::Boolean),
    ("fireplace", AttributeKind::Boolean),
    ("place_type", AttributeKind::Categorical),
    ("property_class", AttributeKind::Categorical),
    ("property_type", AttributeKind::Categorical),
    ("property_taxes", AttributeKind::Numeric),
    ("condition", AttributeKind::Categorical),
    ("rooms", AttributeKind::Numeric),
    ("bathrooms", AttributeKind::Numeric),
    ("bedrooms", AttributeKind::Numeric),
    ("property_kind", AttributeKind::Categorical),
];

/// A geolocated property advertisement.
///
/// Location, price and date are optional at load time; `filter_listings`
/// keeps only complete records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Listing {
    pub id: String,
    pub location: Option<LonLat>,
    pub asked_price: Option<f64>,
    pub posted_date: Option<NaiveDate>,
    /// Raw non-empty attribute cells keyed by column name.
    pub attributes: BTreeMap<String, String>,
    pub ego_place_id: Option<String>,
}

macro_rules! closed_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn allowed() -> String {
                Self::ALL.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(", ")
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s { $($text => Ok($name::$variant),)+ other => Err(other.to_string()) }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

closed_enum!(
    AmenityCategory {
        Coffee => "coffee",
        Entertainment => "entertainment",
        Shopping => "shopping",
        RestaurantBar => "restaurant_bar",
        School => "school",
        Grocery => "grocery",
        Library => "library",
        Park => "park",
        MetroStation => "metro_station",
        RailStation => "rail_station",
        Airport => "airport",
        BusStop => "bus_stop",
        IndustrialArea => "industrial_area",
    }
);

impl AmenityCategory {
    /// Categories scored by the walking-distance decay.
    pub const WALKABLE: [AmenityCategory; 8] = [
        AmenityCategory::Coffee,
        AmenityCategory::Entertainment,
        AmenityCategory::Shopping,
        AmenityCategory::RestaurantBar,
        AmenityCategory::School,
        AmenityCategory::Grocery,
        AmenityCategory::Library,
        AmenityCategory::Park,
    ];
}

closed_enum!(
    LandUseClass {
        Urban => "urban",
        Commercial => "commercial",
        Green => "green",
    }
);

#[derive(Debug, Clone, PartialEq)]
pub enum AmenityGeometry {
    Point(LonLat),
    Area(Polygon),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Amenity {
    pub id: String,
    pub category: AmenityCategory,
    pub geometry: AmenityGeometry,
}

impl Amenity {
    /// Representative point: the location, or the polygon centroid.
    pub fn anchor(&self) -> LonLat {
        match &self.geometry {
            AmenityGeometry::Point(p) => *p,
            AmenityGeometry::Area(poly) => poly.centroid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandUsePolygon {
    pub klass: LandUseClass,
    pub polygon: Polygon,
    pub area_m2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecurityPoint {
    pub location: LonLat,
    /// Perceived safety in the open interval (0, 10).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadEdge {
    pub node_a: String,
    pub node_b: String,
    pub a: LonLat,
    pub b: LonLat,
    pub length_m: f64,
}

/// File locations of the six input layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPaths {
    pub blocks: PathBuf,
    pub listings: PathBuf,
    pub amenities: PathBuf,
    pub landuse: PathBuf,
    pub security: PathBuf,
    pub roads: PathBuf,
}

impl LayerPaths {
    /// Conventional file names inside one directory.
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        Self {
            blocks: dir.join("blocks.geojson"),
            listings: dir.join("listings.csv"),
            amenities: dir.join("amenities.csv"),
            landuse: dir.join("landuse.geojson"),
            security: dir.join("security.csv"),
            roads: dir.join("roads.csv"),
        }
    }
}

/// Every input layer of one city. Blocks are sorted by id.
#[derive(Debug, Clone, Default)]
pub struct CityDataset {
    pub blocks: Vec<CensusBlock>,
    pub listings: Vec<Listing>,
    pub amenities: Vec<Amenity>,
    pub landuse: Vec<LandUsePolygon>,
    pub security: Vec<SecurityPoint>,
    pub roads: Vec<RoadEdge>,
}

impl CityDataset {
    pub fn block_position(&self, id: &str) -> Option<usize> {
        self.blocks.binary_search_by(|b| b.id.as_str().cmp(id)).ok()
    }
}

/// Rules applied by [`filter_listings`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRules {
    pub allowed_kinds: BTreeSet<String>,
    pub reference_date: NaiveDate,
    /// Window length in days; `None` disables the date check.
    pub max_age_days: Option<i64>,
    /// `(attribute, value)` pairs that exclude a listing, e.g. auctions.
    pub exclusions: Vec<(String, String)>,
    pub require_price: bool,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            allowed_kinds: ["apartment", "attic", "detached", "semi_detached", "loft", "open_space"]
                .into_iter()
                .map(String::from)
                .collect(),
            reference_date: NaiveDate::from_ymd_opt(2018, 5, 10).expect("valid date"),
            max_age_days: Some(365),
            exclusions: vec![
                ("property_type".into(), "auction".into()),
                ("condition".into(), "under_construction".into()),
            ],
            require_price: true,
        }
    }
}

impl FilterRules {
    pub fn accepts(&self, l: &Listing) -> bool {
        if !l.location.is_some_and(|p| p.is_finite()) {
            return false;
        }
        if self.require_price && !l.asked_price.is_some_and(|p| p.is_finite() && p > 0.0) {
            return false;
        }
        if !l
            .attributes
            .get("property_kind")
            .is_some_and(|k| self.allowed_kinds.contains(k))
        {
            return false;
        }
        if self
            .exclusions
            .iter()
            .any(|(attr, value)| l.attributes.get(attr) == Some(value))
        {
            return false;
        }
        if let Some(max_age) = self.max_age_days {
            match l.posted_date {
                Some(d) => {
                    let age = (self.reference_date - d).num_days();
                    if !(0..=max_age).contains(&age) {
                        return false;
                    }
                }
                None => return false,
            }
        }
        true
    }
}

/// Keeps complete, recent listings of an allowed kind. Order is preserved.
pub fn filter_listings(listings: Vec<Listing>, rules: &FilterRules) -> Vec<Listing> {
    listings.into_iter().filter(|l| rules.accepts(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn listing(id: &str) -> Listing {
        let mut attributes = BTreeMap::new();
        attributes.insert("property_kind".to_string(), "apartment".to_string());
        Listing {
            id: id.into(),
            location: Some(LonLat::new(7.6, 45.0)),
            asked_price: Some(200_000.0),
            posted_date: NaiveDate::from_ymd_opt(2018, 1, 1),
            attributes,
            ego_place_id: None,
        }
    }

    #[test]
    fn drops_listing_without_coordinates() {
        let mut l = listing("a");
        l.location = None;
        assert!(filter_listings(vec![l, listing("b")], &FilterRules::default())
            .iter()
            .map(|l| l.id.as_str())
            .eq(["b"]));
    }

    #[test]
    fn drops_listing_older_than_window() {
        let rules = FilterRules::default();
        let mut old = listing("old");
        old.posted_date = Some(rules.reference_date - chrono::Duration::days(400));
        let mut edge = listing("edge");
        edge.posted_date = Some(rules.reference_date - chrono::Duration::days(365));
        let kept = filter_listings(vec![old, edge], &rules);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "edge");
    }

    #[test]
    fn empty_input_gives_empty_output() {
        assert!(filter_listings(vec![], &FilterRules::default()).is_empty());
    }

    #[test]
    fn drops_auctions_missing_prices_and_disallowed_kinds() {
        let mut auction = listing("auction");
        auction.attributes.insert("property_type".into(), "auction".into());
        let mut no_price = listing("no_price");
        no_price.asked_price = None;
        let mut negative = listing("negative");
        negative.asked_price = Some(-5.0);
        let mut garage = listing("garage");
        garage.attributes.insert("property_kind".into(), "garage_box".into());
        let kept = filter_listings(vec![auction, no_price, negative, garage, listing("ok")], &FilterRules::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "ok");
    }

    #[test]
    fn nowcast_rules_accept_missing_price() {
        let rules = FilterRules {
            require_price: false,
            max_age_days: None,
            ..FilterRules::default()
        };
        let mut l = listing("x");
        l.asked_price = None;
        l.posted_date = None;
        assert_eq!(filter_listings(vec![l], &rules).len(), 1);
    }

    #[test]
    fn closed_enums_parse() {
        assert_eq!("restaurant_bar".parse::<AmenityCategory>(), Ok(AmenityCategory::RestaurantBar));
        assert!("water".parse::<LandUseClass>().is_err());
        assert_eq!(LandUseClass::allowed(), "urban, commercial, green");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_listing() -> impl Strategy<Value = Listing> {
            (
                any::<bool>(),
                prop_oneof![Just(None), (-10.0f64..1e6).prop_map(Some)],
                0i64..800,
                prop_oneof![Just("apartment"), Just("loft"), Just("castle")],
                any::<bool>(),
            )
                .prop_map(|(has_loc, price, age, kind, auction)| {
                    let mut l = listing("p");
                    if !has_loc {
                        l.location = None;
                    }
                    l.asked_price = price;
                    l.posted_date = Some(FilterRules::default().reference_date - chrono::Duration::days(age));
                    l.attributes.insert("property_kind".into(), kind.into());
                    if auction {
                        l.attributes.insert("property_type".into(), "auction".into());
                    }
                    l
                })
        }

        proptest! {
            #[test]
            fn filtering_is_idempotent(ls in proptest::collection::vec(arb_listing(), 0..40)) {
                let rules = FilterRules::default();
                let once = filter_listings(ls, &rules);
                let twice = filter_listings(once.clone(), &rules);
                prop_assert_eq!(&once, &twice);
                prop_assert!(once.iter().all(|l| l.asked_price.unwrap() > 0.0));
            }
        }
    }
}
