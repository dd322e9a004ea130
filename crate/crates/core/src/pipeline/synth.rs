//! Synthetic city: a block grid with census attributes, a lattice road
//! network, amenities, land use, security points and listings priced by a
//! known function of property and neighborhood features.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::egohood::{ContiguityMatrix, DesignColumn, FeatureGroup};
use crate::features::{compute_features, FeatureParams};
use crate::geo::{haversine_m, LocalProjection, LonLat, Polygon};
use crate::geomodel::{
    Amenity, AmenityCategory, AmenityGeometry, CensusBlock, CityDataset, LandUseClass, LandUsePolygon, Listing,
    RoadEdge, SecurityPoint,
};
use crate::table::FeatureTable;

/// Neighborhood columns of the oracle and their weights on standardized
/// values. All are defined for every block of a generated city.
pub const NEIGHBORHOOD_TERMS: [(&str, f64); 10] = [
    ("egohood:walk_coffee", 0.6),
    ("egohood:walk_restaurant_bar", 0.5),
    ("egohood:walk_park", 0.5),
    ("egohood:walk_school", 0.3),
    ("egohood:security_mean", 0.6),
    ("egohood:avg_property_tax", 0.8),
    ("egohood:heavy_industries", -0.5),
    ("egohood:area_green", 0.4),
    ("ego-place:shops", 0.2),
    ("ego-place:avg_property_tax", 0.4),
];

const YEAR_BRACKETS: [&str; 9] = [
    "before_1919",
    "1919_1945",
    "1946_1960",
    "1961_1970",
    "1971_1980",
    "1981_1990",
    "1991_2000",
    "2001_2005",
    "after_2005",
];

const ATECO_DIVISIONS: [u32; 11] = [10, 25, 41, 47, 56, 58, 62, 68, 69, 71, 90];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub blocks: usize,
    pub block_side_m: f64,
    pub listings: usize,
    /// Per km², multiplied by `amenity_scale`.
    pub amenity_density: BTreeMap<String, f64>,
    pub amenity_scale: f64,
    pub security_per_block: f64,
    /// Side of a square land-use cell in blocks.
    pub landuse_cell_blocks: usize,
    /// Standard deviation of the multiplicative price noise.
    pub noise_scale: f64,
    /// Target share of noiseless price variance carried by the
    /// neighborhood term.
    pub neighborhood_share: f64,
    pub unpriced_fraction: f64,
    pub origin: LonLat,
    pub reference_date: NaiveDate,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let density = [
            (AmenityCategory::Coffee, 6.0),
            (AmenityCategory::Entertainment, 1.5),
            (AmenityCategory::Shopping, 4.0),
            (AmenityCategory::RestaurantBar, 8.0),
            (AmenityCategory::School, 1.2),
            (AmenityCategory::Grocery, 3.0),
            (AmenityCategory::Library, 0.4),
            (AmenityCategory::Park, 1.0),
            (AmenityCategory::MetroStation, 0.25),
            (AmenityCategory::RailStation, 0.04),
            (AmenityCategory::Airport, 0.01),
            (AmenityCategory::BusStop, 6.0),
            (AmenityCategory::IndustrialArea, 0.15),
        ];
        Self {
            seed: 0,
            blocks: 2000,
            block_side_m: 250.0,
            listings: 10_000,
            amenity_density: density.iter().map(|(c, d)| (c.as_str().to_string(), *d)).collect(),
            amenity_scale: 1.0,
            security_per_block: 1.5,
            landuse_cell_blocks: 2,
            noise_scale: 0.05,
            neighborhood_share: 0.6,
            unpriced_fraction: 0.0,
            origin: LonLat::new(7.6, 45.0),
            reference_date: NaiveDate::from_ymd_opt(2018, 5, 10).expect("valid date"),
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Invalid(format!("synth: {m}")));
        if self.blocks == 0 {
            return bad("at least one block is required");
        }
        if !(self.block_side_m > 0.0) {
            return bad("block side must be positive");
        }
        if !(0.0..1.0).contains(&self.neighborhood_share) {
            return bad("neighborhood share must lie in [0, 1)");
        }
        if !(0.0..=0.3).contains(&self.noise_scale) {
            return bad("noise scale must lie in [0, 0.3]");
        }
        if !(0.0..=1.0).contains(&self.unpriced_fraction) {
            return bad("unpriced fraction must lie in [0, 1]");
        }
        if !(self.amenity_scale >= 0.0) || self.amenity_density.values().any(|d| !(*d >= 0.0)) {
            return bad("amenity densities must be non-negative");
        }
        for k in self.amenity_density.keys() {
            if k.parse::<AmenityCategory>().is_err() {
                return bad(&format!("unknown amenity category `{k}`"));
            }
        }
        if self.landuse_cell_blocks == 0 {
            return bad("land-use cells must span at least one block");
        }
        Ok(())
    }
}

/// Price weights on property attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyWeights {
    pub per_square_meter: f64,
    pub per_extra_bathroom: f64,
    pub per_floor: f64,
    pub garage: f64,
    pub terrace: f64,
    pub condition: BTreeMap<String, f64>,
    pub energy_certification: BTreeMap<String, f64>,
    pub property_class: BTreeMap<String, f64>,
}

impl Default for PropertyWeights {
    fn default() -> Self {
        let map = |v: &[(&str, f64)]| v.iter().map(|(k, w)| (k.to_string(), *w)).collect();
        Self {
            per_square_meter: 1800.0,
            per_extra_bathroom: 15_000.0,
            per_floor: 1500.0,
            garage: 12_000.0,
            terrace: 8000.0,
            condition: map(&[("new", 30_000.0), ("good", 0.0), ("to_renovate", -35_000.0)]),
            energy_certification: map(&[
                ("A", 25_000.0),
                ("B", 15_000.0),
                ("C", 5000.0),
                ("D", 0.0),
                ("E", -5000.0),
                ("F", -10_000.0),
                ("G", -15_000.0),
            ]),
            property_class: map(&[("economy", -20_000.0), ("medium", 0.0), ("luxury", 45_000.0)]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodTerm {
    /// Design-matrix header, `group:name`.
    pub column: String,
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Generative price function and realized variance decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub spec: SynthSpec,
    pub intercept: f64,
    pub property: PropertyWeights,
    pub neighborhood: Vec<NeighborhoodTerm>,
    pub neighborhood_scale: f64,
    pub property_variance: f64,
    pub neighborhood_variance: f64,
    pub neighborhood_variance_share: f64,
}

impl Oracle {
    pub fn property_term(&self, l: &Listing) -> Option<f64> {
        let w = &self.property;
        let num = |k: &str| l.attributes.get(k).and_then(|s| s.parse::<f64>().ok());
        let flag = |k: &str| if l.attributes.get(k).map(String::as_str) == Some("yes") { 1.0 } else { 0.0 };
        let level = |m: &BTreeMap<String, f64>, k: &str| l.attributes.get(k).and_then(|v| m.get(v)).copied();
        Some(
            w.per_square_meter * num("square_meters")?
                + w.per_extra_bathroom * (num("bathrooms")? - 1.0)
                + w.per_floor * num("floor")?
                + w.garage * flag("garage")
                + w.terrace * flag("terrace")
                + level(&w.condition, "condition")?
                + level(&w.energy_certification, "energy_certification")?
                + level(&w.property_class, "property_class")?,
        )
    }

    /// Neighborhood term from design-matrix values looked up by header.
    pub fn neighborhood_term(&self, value: impl Fn(&str) -> Option<f64>) -> Option<f64> {
        let mut s = 0.0;
        for t in &self.neighborhood {
            let v = value(&t.column)?;
            if t.std > 0.0 {
                s += t.weight * (v - t.mean) / t.std;
            }
        }
        Some(self.neighborhood_scale * s)
    }
}

/// Noiseless oracle price of a listing.
pub fn oracle_price(oracle: &Oracle, listing: &Listing, value: impl Fn(&str) -> Option<f64>) -> Option<f64> {
    Some(oracle.intercept + oracle.property_term(listing)? + oracle.neighborhood_term(value)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleListing {
    pub id: String,
    pub block_id: String,
    pub property_term: f64,
    pub neighborhood_term: f64,
    pub noise_factor: f64,
    pub price: f64,
    pub priced: bool,
}

pub struct SynthCity {
    pub dataset: CityDataset,
    pub oracle: Oracle,
    pub oracle_listings: Vec<OracleListing>,
    pub features: FeatureTable,
    pub egohood: FeatureTable,
}

/// Smooth field from a sum of Gaussian bumps, in local meters.
struct Field {
    bumps: Vec<(f64, f64, f64, f64)>,
}

impl Field {
    fn new(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Self {
        let bumps = (0..8)
            .map(|i| {
                let a = if i < 5 { rng.random_range(0.5..1.5) } else { rng.random_range(-1.0..-0.3) };
                (rng.random_range(0.0..w), rng.random_range(0.0..h), rng.random_range(800.0..2500.0), a)
            })
            .collect();
        Self { bumps }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.bumps
            .iter()
            .map(|(cx, cy, s, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
            .sum()
    }
}

fn square(proj: &LocalProjection, x0: f64, y0: f64, side: f64) -> Polygon {
    Polygon::new(
        vec![
            proj.to_lonlat(x0, y0),
            proj.to_lonlat(x0 + side, y0),
            proj.to_lonlat(x0 + side, y0 + side),
            proj.to_lonlat(x0, y0 + side),
        ],
        vec![],
    )
}

fn id_width(n: usize) -> usize {
    n.max(1).to_string().len().max(4)
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn yes_no(rng: &mut ChaCha8Rng, p: f64) -> Option<String> {
    // Absent means "no"; an explicit "no" appears now and then.
    if rng.random_bool(p) {
        Some("yes".into())
    } else if rng.random_bool(0.3) {
        Some("no".into())
    } else {
        None
    }
}

/// Generates a city and prices its listings. Deterministic in `spec.seed`.
pub fn synth_city(spec: &SynthSpec, params: &FeatureParams) -> Result<SynthCity, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.block_side_m;
    let cols = (spec.blocks as f64).sqrt().ceil() as usize;
    let rows = spec.blocks.div_ceil(cols);
    let (width, height) = (cols as f64 * side, rows as f64 * side);
    let proj = LocalProjection::new(spec.origin);
    let prestige = Field::new(&mut rng, width, height);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let gauss = |rng: &mut ChaCha8Rng, s: f64| s * normal.sample(rng);

    // Blocks, row-major from the origin.
    let bw = id_width(spec.blocks);
    let mut blocks = Vec::with_capacity(spec.blocks);
    let mut cells = Vec::with_capacity(spec.blocks);
    for k in 0..spec.blocks {
        let (c, r) = (k % cols, k / cols);
        let (x0, y0) = (c as f64 * side, r as f64 * side);
        let p = prestige.at(x0 + side / 2.0, y0 + side / 2.0);
        let poly = square(&proj, x0, y0, side);
        let total = rng.random_range(4..=24u64);
        let res_share = (0.75 + 0.1 * p + gauss(&mut rng, 0.08)).clamp(0.2, 1.0);
        let residential = ((total as f64) * res_share).round() as u64;
        let mut brackets: BTreeMap<String, u64> = BTreeMap::new();
        for _ in 0..total {
            let weights: Vec<f64> = (0..YEAR_BRACKETS.len())
                .map(|i| (0.3 * p * (4.0 - i as f64) / 4.0).exp())
                .collect();
            let mut u = rng.random_range(0.0..weights.iter().sum::<f64>());
            let mut pick = YEAR_BRACKETS.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            *brackets.entry(YEAR_BRACKETS[pick].to_string()).or_default() += 1;
        }
        let companies = (8.0 + 6.0 * p + gauss(&mut rng, 3.0)).round().max(0.0) as u64;
        let avg_size = if companies > 0 { rng.random_range(1.5..12.0) } else { 0.0 };
        let mut ateco: BTreeMap<u32, u64> = BTreeMap::new();
        for _ in 0..companies {
            *ateco.entry(*ATECO_DIVISIONS.choose(&mut rng).expect("non-empty")).or_default() += 1;
        }
        blocks.push(CensusBlock {
            id: format!("B{:0bw$}", k + 1),
            centroid: proj.to_lonlat(x0 + side / 2.0, y0 + side / 2.0),
            area_m2: poly.area_m2(),
            polygons: vec![poly],
            population: (180.0 + 120.0 * p + gauss(&mut rng, 40.0)).round().max(0.0) as u64,
            buildings_total: total,
            buildings_residential: residential,
            buildings_commercial: total - residential,
            buildings_by_year_bracket: brackets,
            companies,
            company_avg_size: avg_size,
            employees: (companies as f64 * avg_size).round() as u64,
            shops: (3.0 + 3.0 * p + gauss(&mut rng, 1.5)).round().max(0.0) as u64,
            heavy_industries: (1.2 - 1.5 * p + gauss(&mut rng, 0.8)).round().max(0.0) as u64,
            avg_property_tax: (700.0 + 350.0 * p + gauss(&mut rng, 60.0)).max(50.0),
            companies_by_ateco: ateco,
        });
        cells.push((x0, y0, p));
    }

    // Road lattice along block edges.
    let node = |c: usize, r: usize| format!("N{c}_{r}");
    let mut roads = Vec::new();
    for r in 0..=rows {
        for c in 0..=cols {
            let here = proj.to_lonlat(c as f64 * side, r as f64 * side);
            if c < cols {
                let east = proj.to_lonlat((c + 1) as f64 * side, r as f64 * side);
                roads.push(RoadEdge {
                    node_a: node(c, r),
                    node_b: node(c + 1, r),
                    a: here,
                    b: east,
                    length_m: haversine_m(here, east),
                });
            }
            if r < rows {
                let north = proj.to_lonlat(c as f64 * side, (r + 1) as f64 * side);
                roads.push(RoadEdge {
                    node_a: node(c, r),
                    node_b: node(c, r + 1),
                    a: here,
                    b: north,
                    length_m: haversine_m(here, north),
                });
            }
        }
    }

    // Amenities, thinned toward high-prestige areas for urban categories.
    let area_km2 = width * height / 1e6;
    let p_max = cells.iter().map(|c| c.2).fold(f64::MIN, f64::max).max(0.0) + 0.5;
    let mut amenities = Vec::new();
    for &cat in AmenityCategory::ALL {
        let density = spec.amenity_density.get(cat.as_str()).copied().unwrap_or(0.0) * spec.amenity_scale;
        let n = (density * area_km2).round() as usize;
        let beta = match cat {
            AmenityCategory::IndustrialArea => -1.5,
            AmenityCategory::Airport | AmenityCategory::RailStation | AmenityCategory::BusStop => 0.0,
            _ => 1.2,
        };
        let mut placed = 0;
        while placed < n {
            let (x, y) = (rng.random_range(0.0..width), rng.random_range(0.0..height));
            let accept = if beta >= 0.0 {
                (beta * (prestige.at(x, y) - p_max)).exp()
            } else {
                (beta * (prestige.at(x, y) + p_max)).exp().min(1.0)
            };
            if !rng.random_bool(accept.clamp(0.0, 1.0)) {
                continue;
            }
            placed += 1;
            let id = format!("{}_{placed:04}", cat.as_str());
            let geometry = match cat {
                AmenityCategory::Park | AmenityCategory::IndustrialArea => {
                    let s = rng.random_range(80.0..220.0);
                    AmenityGeometry::Area(square(&proj, x - s / 2.0, y - s / 2.0, s))
                }
                _ => AmenityGeometry::Point(proj.to_lonlat(x, y)),
            };
            amenities.push(Amenity {
                id,
                category: cat,
                geometry,
            });
        }
    }

    // Land-use mosaic.
    let cell = spec.landuse_cell_blocks as f64 * side;
    let mut landuse = Vec::new();
    let (lc, lr) = ((width / cell).ceil() as usize, (height / cell).ceil() as usize);
    for r in 0..lr {
        for c in 0..lc {
            let (x0, y0) = (c as f64 * cell, r as f64 * cell);
            let p = prestige.at(x0 + cell / 2.0, y0 + cell / 2.0);
            let u: f64 = rng.random();
            let klass = if u < (0.2 + 0.1 * p).clamp(0.05, 0.5) {
                LandUseClass::Green
            } else if u < 0.5 {
                LandUseClass::Commercial
            } else {
                LandUseClass::Urban
            };
            let polygon = square(&proj, x0, y0, cell);
            landuse.push(LandUsePolygon {
                klass,
                area_m2: polygon.area_m2(),
                polygon,
            });
        }
    }

    // Security perception points inside blocks.
    let mut security = Vec::new();
    for &(x0, y0, p) in &cells {
        let n = (spec.security_per_block + rng.random_range(-1.0..1.0)).round().max(0.0) as usize;
        for _ in 0..n {
            let (x, y) = (x0 + rng.random_range(0.05..0.95) * side, y0 + rng.random_range(0.05..0.95) * side);
            security.push(SecurityPoint {
                location: proj.to_lonlat(x, y),
                score: (5.0 + 2.0 * p + gauss(&mut rng, 1.0)).clamp(0.1, 9.9),
            });
        }
    }

    let mut dataset = CityDataset {
        blocks,
        listings: Vec::new(),
        amenities,
        landuse,
        security,
        roads,
    };

    // Listings and their property attributes.
    let lw = id_width(spec.listings).max(5);
    let sqm_dist = LogNormal::new(85f64.ln(), 0.35).expect("valid lognormal");
    let kinds = ["apartment", "attic", "detached", "semi_detached", "loft", "open_space"];
    let mut listing_blocks = Vec::with_capacity(spec.listings);
    for i in 0..spec.listings {
        let b = rng.random_range(0..spec.blocks);
        let (x0, y0, _) = cells[b];
        let loc = proj.to_lonlat(x0 + rng.random_range(0.1..0.9) * side, y0 + rng.random_range(0.1..0.9) * side);
        let sqm = sqm_dist.sample(&mut rng).clamp(25.0, 400.0).round();
        let rooms = (sqm / 25.0).round().clamp(1.0, 8.0);
        let bathrooms = rng.random_range(1..=3u32).min(rooms as u32).max(1);
        let mut a: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            a.insert(k.to_string(), v);
        };
        put("square_meters", sqm.to_string());
        if rng.random_bool(0.93) {
            put("built_year", rng.random_range(1900..=2017u32).to_string());
        }
        put("energy_certification", ["A", "B", "C", "D", "E", "F", "G"].choose(&mut rng).expect("levels").to_string());
        if rng.random_bool(0.9) {
            put("monthly_expenses", (sqm * 1.2 + rng.random_range(0.0..60.0)).round().to_string());
        }
        put("floor", rng.random_range(0..=8u32).to_string());
        put("heating_type", ["autonomous", "centralized", "none"].choose(&mut rng).expect("levels").to_string());
        put("fixtures", ["single_glass", "double_glass", "triple_glass"].choose(&mut rng).expect("levels").to_string());
        for (k, p) in [("garden", 0.2), ("furnished", 0.3), ("terrace", 0.35), ("spa", 0.03), ("cellar", 0.4), ("garage", 0.3), ("fireplace", 0.1)] {
            if let Some(v) = yes_no(&mut rng, p) {
                put(k, v);
            }
        }
        put("sun_exposition", ["north", "south", "east", "west"].choose(&mut rng).expect("levels").to_string());
        put("kitchen_type", ["open", "kitchenette", "separate"].choose(&mut rng).expect("levels").to_string());
        put("place_type", ["residential", "mixed"].choose(&mut rng).expect("levels").to_string());
        put("property_class", ["economy", "medium", "luxury"].choose(&mut rng).expect("levels").to_string());
        put("property_type", ["entire_property", "bare_ownership"].choose(&mut rng).expect("levels").to_string());
        put("property_taxes", (sqm * rng.random_range(3.0..9.0)).round().to_string());
        put("condition", ["new", "good", "to_renovate"].choose(&mut rng).expect("levels").to_string());
        put("rooms", rooms.to_string());
        put("bathrooms", bathrooms.to_string());
        put("bedrooms", (rooms - 1.0).max(1.0).to_string());
        put("property_kind", kinds.choose(&mut rng).expect("kinds").to_string());
        dataset.listings.push(Listing {
            id: format!("L{:0lw$}", i + 1),
            location: Some(loc),
            asked_price: None,
            posted_date: Some(spec.reference_date - Duration::days(rng.random_range(0..365))),
            attributes: a,
            ego_place_id: None,
        });
        listing_blocks.push(b);
    }

    // Closed loop: the neighborhood term reads the same features the
    // pipeline computes.
    let features = compute_features(&dataset, params)?;
    let centroids: Vec<LonLat> = dataset.blocks.iter().map(|b| b.centroid).collect();
    let wn = ContiguityMatrix::build(&centroids, params.egohood_radius_m).row_normalize();
    let egohood = crate::egohood::egohood_features(&wn, &features)?;

    let mut terms = Vec::with_capacity(NEIGHBORHOOD_TERMS.len());
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (header, weight) in NEIGHBORHOOD_TERMS {
        let col = DesignColumn::parse(header)
            .ok_or_else(|| PipelineError::Invalid(format!("synth: bad column header `{header}`")))?;
        let table = if col.group == FeatureGroup::EgoPlace { &features } else { &egohood };
        let j = table
            .column_index(&col.name)
            .ok_or_else(|| PipelineError::Invalid(format!("synth: no feature column `{}`", col.name)))?;
        let mut vals = Vec::with_capacity(table.n_rows());
        for (bi, row) in table.rows().iter().enumerate() {
            vals.push(row[j].ok_or_else(|| {
                PipelineError::Invalid(format!(
                    "synth: `{header}` is undefined for block {}; densities too low",
                    table.block_ids()[bi]
                ))
            })?);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = variance(&vals).sqrt();
        terms.push(NeighborhoodTerm {
            column: header.to_string(),
            weight,
            mean,
            std,
        });
        columns.push(vals);
    }

    let mut oracle = Oracle {
        spec: spec.clone(),
        intercept: 0.0,
        property: PropertyWeights::default(),
        neighborhood: terms,
        neighborhood_scale: 1.0,
        property_variance: 0.0,
        neighborhood_variance: 0.0,
        neighborhood_variance_share: 0.0,
    };
    // Blocks are generated in id order, so table row == block index.
    let lookup = |b: usize| {
        let cols = &columns;
        let heads = &oracle.neighborhood;
        move |h: &str| heads.iter().position(|t| t.column == h).map(|k| cols[k][b])
    };
    let f: Vec<f64> = dataset
        .listings
        .iter()
        .map(|l| oracle.property_term(l).expect("generated listings carry every priced attribute"))
        .collect();
    let g_raw: Vec<f64> = listing_blocks
        .iter()
        .map(|&b| oracle.neighborhood_term(lookup(b)).expect("all terms defined"))
        .collect();
    let (vf, vg) = (variance(&f), variance(&g_raw));
    let share = spec.neighborhood_share;
    let scale = if vg > 0.0 && share > 0.0 { (share / (1.0 - share) * vf / vg).sqrt() } else { 0.0 };
    oracle.neighborhood_scale = scale;
    let g: Vec<f64> = listing_blocks
        .iter()
        .map(|&b| oracle.neighborhood_term(lookup(b)).expect("all terms defined"))
        .collect();
    let lowest = f.iter().zip(&g).map(|(a, b)| a + b).fold(f64::INFINITY, f64::min);
    oracle.intercept = 50_000.0 + if lowest.is_finite() { (-lowest).max(0.0) } else { 0.0 };
    oracle.property_variance = vf;
    oracle.neighborhood_variance = variance(&g);
    let total = oracle.property_variance + oracle.neighborhood_variance;
    oracle.neighborhood_variance_share = if total > 0.0 { oracle.neighborhood_variance / total } else { 0.0 };

    let mut oracle_listings = Vec::with_capacity(spec.listings);
    for (i, l) in dataset.listings.iter_mut().enumerate() {
        let eps = normal.sample(&mut rng).clamp(-3.0, 3.0);
        let noise_factor = 1.0 + spec.noise_scale * eps;
        let b = listing_blocks[i];
        let lookup_b = lookup(b);
        let base = oracle_price(&oracle, l, lookup_b).expect("all terms defined");
        let price = if spec.noise_scale == 0.0 { base } else { base * noise_factor };
        let priced = !rng.random_bool(spec.unpriced_fraction);
        if priced {
            l.asked_price = Some(price);
        }
        oracle_listings.push(OracleListing {
            id: l.id.clone(),
            block_id: dataset.blocks[b].id.clone(),
            property_term: f[i],
            neighborhood_term: g[i],
            noise_factor,
            price,
            priced,
        });
    }

    Ok(SynthCity {
        dataset,
        oracle,
        oracle_listings,
        features,
        egohood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            blocks: 150,
            listings: 300,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let p = FeatureParams::default();
        let a = synth_city(&small(7), &p).unwrap();
        let b = synth_city(&small(7), &p).unwrap();
        assert_eq!(a.dataset.blocks, b.dataset.blocks);
        assert_eq!(a.dataset.listings, b.dataset.listings);
        assert_eq!(a.oracle, b.oracle);
        let c = synth_city(&small(8), &p).unwrap();
        let pa: Vec<f64> = a.oracle_listings.iter().map(|o| o.price).collect();
        let pc: Vec<f64> = c.oracle_listings.iter().map(|o| o.price).collect();
        assert!(pa.iter().all(|x| !pc.contains(x)));
    }

    #[test]
    fn realized_share_matches_target() {
        let s = synth_city(&small(3), &FeatureParams::default()).unwrap();
        assert!((s.oracle.neighborhood_variance_share - 0.6).abs() < 1e-9);
        assert!(s.oracle_listings.iter().all(|o| o.price > 0.0));
        assert_eq!(s.dataset.blocks.len(), 150);
        let ids: Vec<&String> = s.dataset.blocks.iter().map(|b| &b.id).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn noiseless_prices_are_the_oracle() {
        let spec = SynthSpec {
            noise_scale: 0.0,
            ..small(4)
        };
        let s = synth_city(&spec, &FeatureParams::default()).unwrap();
        for (l, o) in s.dataset.listings.iter().zip(&s.oracle_listings) {
            assert_eq!(l.asked_price, Some(s.oracle.intercept + o.property_term + o.neighborhood_term));
        }
    }

    #[test]
    fn no_amenities_means_zero_walkability() {
        let spec = SynthSpec {
            amenity_scale: 0.0,
            ..small(5)
        };
        let s = synth_city(&spec, &FeatureParams::default()).unwrap();
        assert!(s.dataset.amenities.is_empty());
        for c in AmenityCategory::WALKABLE {
            let j = s.features.column_index(&format!("walk_{}", c.as_str())).unwrap();
            assert!(s.features.rows().iter().all(|r| r[j] == Some(0.0)));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let p = FeatureParams::default();
        for spec in [
            SynthSpec { blocks: 0, ..small(1) },
            SynthSpec { neighborhood_share: 1.0, ..small(1) },
            SynthSpec { noise_scale: -0.1, ..small(1) },
        ] {
            assert!(synth_city(&spec, &p).is_err());
        }
    }
}
