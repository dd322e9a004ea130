//! Per-block place features: walkability, transit, urban fabric, cultural
//! capital, security perception and living conditions.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::egohood::{ContiguityMatrix, EGOHOOD_RADIUS_M};
use crate::geo::{area_within_radius, haversine_m, PointGrid};
use crate::geomodel::{AmenityCategory, BlockIndex, CensusBlock, CityDataset, LandUseClass};
use crate::roadnet::{k_nearest_by_category, AmenityNodes, Dijkstra, RoadError, RoadGraph, SnapIndex, WALK_CUTOFF_M};
use crate::table::{ColumnSpec, FeatureTable, TableError};

/// ATECO divisions counted as cultural and creative industries.
pub const CULTURAL_ATECO: [u32; 9] = [58, 59, 62, 63, 71, 73, 74, 90, 91];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("cannot derive a year for building bracket `{0}`")]
    UnknownBracket(String),
    #[error("no census blocks to featurize")]
    NoBlocks,
    #[error(transparent)]
    Road(#[from] RoadError),
    #[error(transparent)]
    Table(#[from] TableError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkParams {
    /// Maximum walking distance in meters.
    pub max_distance_m: f64,
    pub k_by_category: BTreeMap<AmenityCategory, usize>,
    pub default_k: usize,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self {
            max_distance_m: WALK_CUTOFF_M,
            k_by_category: BTreeMap::from([
                (AmenityCategory::RestaurantBar, 10),
                (AmenityCategory::Shopping, 5),
                (AmenityCategory::Park, 2),
            ]),
            default_k: 1,
        }
    }
}

impl WalkParams {
    pub fn k(&self, category: AmenityCategory) -> usize {
        self.k_by_category.get(&category).copied().unwrap_or(self.default_k)
    }
}

/// Distance decay `exp(-5 (d/M)^5)`, zero beyond `M`.
pub fn decay_score(d: f64, params: &WalkParams) -> Result<f64, FeatureError> {
    if d < 0.0 || d.is_nan() {
        return Err(FeatureError::NegativeDistance(d));
    }
    let m = params.max_distance_m;
    if d > m {
        return Ok(0.0);
    }
    Ok((-5.0 * (d / m).powi(5)).exp())
}

/// Mean decay over the given nearest distances; 0 when there are none.
pub fn category_walkability(distances: &[f64], params: &WalkParams) -> Result<f64, FeatureError> {
    if distances.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &d in distances {
        sum += decay_score(d, params)?;
    }
    Ok(sum / distances.len() as f64)
}

/// Normalized entropy of the three land-use areas; `None` when nothing is
/// classified. Terms are summed in sorted order so the result does not
/// depend on class order.
pub fn lum(areas: [f64; 3]) -> Option<f64> {
    let mut a = areas.map(|x| x.max(0.0));
    a.sort_by(f64::total_cmp);
    let total: f64 = a.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let h: f64 = a
        .iter()
        .map(|&x| {
            let p = x / total;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum();
    Some((h / 3f64.ln()).clamp(0.0, 1.0))
}

/// Representative construction year of a census year bracket.
///
/// Accepted keys: `before_1919` (maps to 1910), `1919_1945` (midpoint),
/// `1960s` (decade midpoint), `after_2005` (bound plus five) and bare
/// years.
pub fn bracket_midpoint(key: &str) -> Option<f64> {
    let year = |s: &str| s.parse::<u32>().ok().filter(|y| (1000..=3000).contains(y)).map(f64::from);
    if let Some(rest) = key.strip_prefix("before_") {
        return year(rest).map(|y| y - 9.0);
    }
    if let Some(rest) = key.strip_prefix("after_") {
        return year(rest).map(|y| y + 5.0);
    }
    if let Some((a, b)) = key.split_once('_') {
        return Some((year(a)? + year(b)?) / 2.0);
    }
    if let Some(rest) = key.strip_suffix('s') {
        return year(rest).map(|y| y + 5.0);
    }
    year(key)
}

/// Count-weighted mean and population standard deviation of construction
/// years; `None` without any counted building.
pub fn building_age_moments(brackets: &BTreeMap<String, u64>) -> Result<Option<(f64, f64)>, FeatureError> {
    let mut n = 0.0;
    let mut sum = 0.0;
    let mut pts = Vec::with_capacity(brackets.len());
    for (k, &c) in brackets {
        let m = bracket_midpoint(k).ok_or_else(|| FeatureError::UnknownBracket(k.clone()))?;
        pts.push((m, c as f64));
        n += c as f64;
        sum += m * c as f64;
    }
    if n == 0.0 {
        return Ok(None);
    }
    let mean = sum / n;
    let var = pts.iter().map(|(m, c)| c * (m - mean).powi(2)).sum::<f64>() / n;
    Ok(Some((mean, var.sqrt())))
}

pub fn company_avg_size(employees: u64, companies: u64) -> f64 {
    if companies == 0 {
        0.0
    } else {
        employees as f64 / companies as f64
    }
}

pub fn cultural_companies<'a>(ateco_counts: impl IntoIterator<Item = (&'a u32, &'a u64)>) -> u64 {
    ateco_counts
        .into_iter()
        .filter(|(code, _)| CULTURAL_ATECO.contains(code))
        .map(|(_, c)| *c)
        .sum()
}

pub fn mean_score(scores: &[f64]) -> Option<f64> {
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Census aggregates over an egohood block set.
#[derive(Debug, Clone, PartialEq)]
pub struct FabricFeatures {
    pub avg_block_size_m2: f64,
    pub buildings_total: u64,
    pub buildings_residential: u64,
    pub buildings_commercial: u64,
    pub building_year: Option<(f64, f64)>,
    pub buildings_by_bracket: BTreeMap<String, u64>,
    pub company_avg_size: f64,
    pub companies: u64,
    pub employees: u64,
    pub shops: u64,
    pub population: u64,
    pub cultural_companies: u64,
    pub heavy_industries: u64,
}

pub fn fabric_features(members: &[&CensusBlock]) -> Result<FabricFeatures, FeatureError> {
    let mut brackets: BTreeMap<String, u64> = BTreeMap::new();
    let mut ateco: BTreeMap<u32, u64> = BTreeMap::new();
    let mut area = 0.0;
    let mut f = FabricFeatures {
        avg_block_size_m2: 0.0,
        buildings_total: 0,
        buildings_residential: 0,
        buildings_commercial: 0,
        building_year: None,
        buildings_by_bracket: BTreeMap::new(),
        company_avg_size: 0.0,
        companies: 0,
        employees: 0,
        shops: 0,
        population: 0,
        cultural_companies: 0,
        heavy_industries: 0,
    };
    for b in members {
        area += b.area_m2;
        f.buildings_total += b.buildings_total;
        f.buildings_residential += b.buildings_residential;
        f.buildings_commercial += b.buildings_commercial;
        f.companies += b.companies;
        f.employees += b.employees;
        f.shops += b.shops;
        f.population += b.population;
        f.heavy_industries += b.heavy_industries;
        for (k, c) in &b.buildings_by_year_bracket {
            *brackets.entry(k.clone()).or_default() += c;
        }
        for (k, c) in &b.companies_by_ateco {
            *ateco.entry(*k).or_default() += c;
        }
    }
    if !members.is_empty() {
        f.avg_block_size_m2 = area / members.len() as f64;
    }
    f.building_year = building_age_moments(&brackets)?;
    f.buildings_by_bracket = brackets;
    f.company_avg_size = company_avg_size(f.employees, f.companies);
    f.cultural_companies = cultural_companies(&ateco);
    Ok(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureParams {
    pub walk: WalkParams,
    pub egohood_radius_m: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            walk: WalkParams::default(),
            egohood_radius_m: EGOHOOD_RADIUS_M,
        }
    }
}

/// Year-bracket keys present in `blocks`, ordered by representative year.
pub fn bracket_keys(blocks: &[CensusBlock]) -> Result<Vec<String>, FeatureError> {
    let keys: BTreeSet<&String> = blocks.iter().flat_map(|b| b.buildings_by_year_bracket.keys()).collect();
    let mut keyed = Vec::with_capacity(keys.len());
    for k in keys {
        let m = bracket_midpoint(k).ok_or_else(|| FeatureError::UnknownBracket(k.clone()))?;
        keyed.push((m, k.clone()));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, k)| k).collect())
}

/// Column layout of the place-feature table.
pub fn feature_columns(brackets: &[String]) -> Vec<ColumnSpec> {
    let mut cols: Vec<ColumnSpec> = AmenityCategory::WALKABLE
        .iter()
        .map(|c| ColumnSpec::new(format!("walk_{}", c.as_str()), "score", "amenities+roads"))
        .collect();
    cols.extend([
        ColumnSpec::new("dist_rail_m", "m", "amenities+roads"),
        ColumnSpec::new("dist_metro_m", "m", "amenities+roads"),
        ColumnSpec::new("dist_airport_m", "m", "amenities"),
        ColumnSpec::new("bus_stops", "count", "amenities"),
        ColumnSpec::new("lum", "index", "landuse"),
        ColumnSpec::new("area_urban", "m2", "landuse"),
        ColumnSpec::new("area_commercial", "m2", "landuse"),
        ColumnSpec::new("area_green", "m2", "landuse"),
        ColumnSpec::new("avg_block_size_m2", "m2", "blocks"),
        ColumnSpec::new("buildings_total", "count", "blocks"),
        ColumnSpec::new("buildings_residential", "count", "blocks"),
        ColumnSpec::new("buildings_commercial", "count", "blocks"),
        ColumnSpec::new("building_year_mean", "year", "blocks"),
        ColumnSpec::new("building_year_std", "year", "blocks"),
    ]);
    cols.extend(brackets.iter().map(|k| ColumnSpec::new(format!("buildings_{k}"), "count", "blocks")));
    cols.extend([
        ColumnSpec::new("company_avg_size", "employees", "blocks"),
        ColumnSpec::new("companies", "count", "blocks"),
        ColumnSpec::new("employees", "count", "blocks"),
        ColumnSpec::new("shops", "count", "blocks"),
        ColumnSpec::new("population", "count", "blocks"),
        ColumnSpec::new("cultural_companies", "count", "blocks"),
        ColumnSpec::new("heavy_industries", "count", "blocks"),
        ColumnSpec::new("dist_industrial_m", "m", "amenities+roads"),
        ColumnSpec::new("security_mean", "score", "security"),
        ColumnSpec::new("avg_property_tax", "euro/year", "blocks"),
    ]);
    cols
}

fn nearest_or_none(graph: &RoadGraph, amen: &AmenityNodes, c: AmenityCategory) -> Vec<Option<f64>> {
    let nodes = amen.nodes(c);
    if nodes.is_empty() {
        vec![None; graph.node_count()]
    } else {
        graph.nearest_source_distances(nodes)
    }
}

/// Computes the place-feature table `F`, one row per block in id order.
pub fn compute_features(data: &CityDataset, params: &FeatureParams) -> Result<FeatureTable, FeatureError> {
    let blocks = &data.blocks;
    if blocks.is_empty() {
        return Err(FeatureError::NoBlocks);
    }
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.sort_by(|&a, &b| blocks[a].id.cmp(&blocks[b].id));

    let graph = RoadGraph::build(&data.roads)?;
    let snap = SnapIndex::new(&graph);
    let amen = AmenityNodes::snap(&snap, &data.amenities);
    let block_nodes: Vec<usize> = blocks.par_iter().map(|b| snap.snap(b.centroid)).collect();
    let rail = nearest_or_none(&graph, &amen, AmenityCategory::RailStation);
    let metro = nearest_or_none(&graph, &amen, AmenityCategory::MetroStation);
    let industrial = nearest_or_none(&graph, &amen, AmenityCategory::IndustrialArea);

    let anchors = |c: AmenityCategory| -> Vec<_> {
        data.amenities.iter().filter(|a| a.category == c).map(|a| a.anchor()).collect()
    };
    let airports = anchors(AmenityCategory::Airport);
    let bus = PointGrid::new(anchors(AmenityCategory::BusStop), params.egohood_radius_m.max(1.0));

    let centroids: Vec<_> = blocks.iter().map(|b| b.centroid).collect();
    let w = ContiguityMatrix::build(&centroids, params.egohood_radius_m);

    let lu_centers: Vec<_> = data.landuse.iter().map(|l| l.polygon.centroid()).collect();
    let lu_reach = data
        .landuse
        .iter()
        .zip(&lu_centers)
        .flat_map(|(l, c)| l.polygon.exterior.iter().map(move |v| haversine_m(*c, *v)))
        .fold(0.0, f64::max);
    let lu_grid = PointGrid::new(lu_centers, params.egohood_radius_m.max(1.0));

    let index = BlockIndex::new(blocks);
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); blocks.len()];
    for p in &data.security {
        for i in index.covering(p.location) {
            scores[i].push(p.score);
        }
    }

    let brackets = bracket_keys(blocks)?;
    let columns = feature_columns(&brackets);
    let ks: BTreeMap<AmenityCategory, usize> =
        AmenityCategory::WALKABLE.iter().map(|&c| (c, params.walk.k(c))).collect();

    let rows: Vec<Vec<Option<f64>>> = order
        .par_iter()
        .map_init(
            || Dijkstra::new(graph.node_count()),
            |scratch, &i| -> Result<Vec<Option<f64>>, FeatureError> {
                let b = &blocks[i];
                let node = block_nodes[i];
                let near = k_nearest_by_category(&graph, &amen, scratch, node, &ks, params.walk.max_distance_m);
                let mut row: Vec<Option<f64>> = Vec::with_capacity(columns.len());
                for c in AmenityCategory::WALKABLE {
                    row.push(Some(category_walkability(&near[&c], &params.walk)?));
                }
                row.push(rail[node]);
                row.push(metro[node]);
                row.push(airports.iter().map(|a| haversine_m(b.centroid, *a)).min_by(f64::total_cmp));
                row.push(Some(bus.within(b.centroid, params.egohood_radius_m).len() as f64));

                let mut areas = [0.0; 3];
                for j in lu_grid.within(b.centroid, params.egohood_radius_m + lu_reach + 1.0) {
                    let l = &data.landuse[j];
                    let slot = match l.klass {
                        LandUseClass::Urban => 0,
                        LandUseClass::Commercial => 1,
                        LandUseClass::Green => 2,
                    };
                    areas[slot] += area_within_radius(&l.polygon, b.centroid, params.egohood_radius_m);
                }
                row.push(lum(areas));
                row.extend(areas.iter().map(|&a| Some(a)));

                let mut members: Vec<&CensusBlock> = vec![b];
                members.extend(w.row(i).0.iter().map(|&j| &blocks[j]));
                let fab = fabric_features(&members)?;
                row.push(Some(fab.avg_block_size_m2));
                row.push(Some(fab.buildings_total as f64));
                row.push(Some(fab.buildings_residential as f64));
                row.push(Some(fab.buildings_commercial as f64));
                row.push(fab.building_year.map(|m| m.0));
                row.push(fab.building_year.map(|m| m.1));
                for k in &brackets {
                    row.push(Some(fab.buildings_by_bracket.get(k).copied().unwrap_or(0) as f64));
                }
                row.push(Some(fab.company_avg_size));
                row.push(Some(fab.companies as f64));
                row.push(Some(fab.employees as f64));
                row.push(Some(fab.shops as f64));
                row.push(Some(fab.population as f64));
                row.push(Some(fab.cultural_companies as f64));
                row.push(Some(fab.heavy_industries as f64));
                row.push(industrial[node]);
                row.push(mean_score(&scores[i]));
                row.push(Some(b.avg_property_tax));
                debug_assert_eq!(row.len(), columns.len());
                Ok(row.into_iter().map(|v| v.filter(|x| x.is_finite())).collect())
            },
        )
        .collect::<Result<_, _>>()?;
    let ids = order.iter().map(|&i| blocks[i].id.clone()).collect();
    Ok(FeatureTable::new(ids, columns, rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wp() -> WalkParams {
        WalkParams::default()
    }

    #[test]
    fn decay_reference_values() {
        let m = WALK_CUTOFF_M;
        assert_eq!(decay_score(0.0, &wp()).unwrap(), 1.0);
        assert!((decay_score(500.0, &wp()).unwrap() - 0.9856).abs() < 1e-3);
        assert!((decay_score(500.0, &wp()).unwrap() - 0.985_630_493_484_725_6).abs() < 1e-12);
        assert!((decay_score(m, &wp()).unwrap() - (-5f64).exp()).abs() < 1e-15);
        assert_eq!(decay_score(1700.0, &wp()).unwrap(), 0.0);
        assert_eq!(decay_score(m + 1e-9, &wp()).unwrap(), 0.0);
        assert!(matches!(decay_score(-1.0, &wp()), Err(FeatureError::NegativeDistance(_))));
    }

    #[test]
    fn walkability_averages_decay() {
        let v = category_walkability(&[0.0, WALK_CUTOFF_M], &wp()).unwrap();
        assert!((v - (1.0 + (-5f64).exp()) / 2.0).abs() < 1e-15);
        assert!((v - 0.5034).abs() < 1e-3);
        assert_eq!(category_walkability(&[], &wp()).unwrap(), 0.0);
        assert_eq!(category_walkability(&[0.0], &wp()).unwrap(), 1.0);
    }

    #[test]
    fn default_ks() {
        let p = wp();
        assert_eq!(p.k(AmenityCategory::RestaurantBar), 10);
        assert_eq!(p.k(AmenityCategory::Shopping), 5);
        assert_eq!(p.k(AmenityCategory::Park), 2);
        assert_eq!(p.k(AmenityCategory::Library), 1);
    }

    #[test]
    fn lum_reference_values() {
        assert!((lum([1.0, 1.0, 1.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(lum([5.0, 0.0, 0.0]), Some(0.0));
        assert!((lum([0.5, 0.5, 0.0]).unwrap() - 2f64.ln() / 3f64.ln()).abs() < 1e-15);
        assert!((lum([0.5, 0.5, 0.0]).unwrap() - 0.63093).abs() < 1e-5);
        assert_eq!(lum([0.0, 0.0, 0.0]), None);
    }

    #[test]
    fn bracket_midpoints() {
        assert_eq!(bracket_midpoint("before_1919"), Some(1910.0));
        assert_eq!(bracket_midpoint("1919_1945"), Some(1932.0));
        assert_eq!(bracket_midpoint("1950s"), Some(1955.0));
        assert_eq!(bracket_midpoint("after_2005"), Some(2010.0));
        assert_eq!(bracket_midpoint("1990"), Some(1990.0));
        assert_eq!(bracket_midpoint("old"), None);
    }

    #[test]
    fn building_age_weighted_moments() {
        let b = BTreeMap::from([("1950s".to_string(), 10), ("2000s".to_string(), 10)]);
        assert_eq!(building_age_moments(&b).unwrap(), Some((1980.0, 25.0)));
        assert_eq!(building_age_moments(&BTreeMap::new()).unwrap(), None);
        let bad = BTreeMap::from([("medieval".to_string(), 1)]);
        assert!(building_age_moments(&bad).is_err());
    }

    #[test]
    fn cultural_codes() {
        let m = BTreeMap::from([(58, 1), (62, 1), (10, 1)]);
        assert_eq!(cultural_companies(&m), 2);
        assert_eq!(cultural_companies(&BTreeMap::from([(47, 3)])), 0);
    }

    #[test]
    fn security_means() {
        assert_eq!(mean_score(&[4.0, 6.0]), Some(5.0));
        assert_eq!(mean_score(&[]), None);
        assert_eq!(mean_score(&[3.82]), Some(3.82));
    }

    #[test]
    fn company_size_guard() {
        assert_eq!(company_avg_size(10, 0), 0.0);
        assert_eq!(company_avg_size(10, 4), 2.5);
    }

    proptest! {
        #[test]
        fn decay_is_nonincreasing(a in 0.0..2000.0f64, b in 0.0..2000.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(decay_score(lo, &wp()).unwrap() >= decay_score(hi, &wp()).unwrap());
        }

        #[test]
        fn walkability_bounded_by_nearest(mut d in prop::collection::vec(0.0..2000.0f64, 1..12)) {
            d.sort_by(f64::total_cmp);
            let v = category_walkability(&d, &wp()).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v <= decay_score(d[0], &wp()).unwrap());
        }

        #[test]
        fn lum_permutation_invariant(a in 0.0..1e6f64, b in 0.0..1e6f64, c in 0.0..1e6f64) {
            let base = lum([a, b, c]);
            for p in [[a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
                prop_assert_eq!(lum(p), base);
            }
            if let Some(v) = base {
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(v <= lum([1.0, 1.0, 1.0]).unwrap());
            }
        }
    }
}
