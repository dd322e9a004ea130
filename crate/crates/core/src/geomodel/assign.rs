use rayon::prelude::*;
use thiserror::Error;

use super::{CensusBlock, Listing};
use crate::geo::{BBox, LonLat, PointGrid};

/// Points outside every block snap to the nearest centroid within this
/// distance.
pub const FALLBACK_RADIUS_M: f64 = 250.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssignError {
    #[error("listing `{listing}` has no coordinates")]
    NoLocation { listing: String },
    #[error("point ({lon}, {lat}) is outside every block and more than {radius_m} m from any centroid")]
    Unassignable { lon: f64, lat: f64, radius_m: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Assignment {
    Contained(String),
    /// Fallback to the nearest centroid; carries the distance in meters.
    Nearest(String, f64),
}

impl Assignment {
    pub fn block_id(&self) -> &str {
        match self {
            Assignment::Contained(id) | Assignment::Nearest(id, _) => id,
        }
    }
}

/// Bucket grid over block bounding boxes for point-in-polygon queries.
#[derive(Debug, Clone)]
pub struct BlockIndex<'a> {
    blocks: &'a [CensusBlock],
    bboxes: Vec<BBox>,
    origin: LonLat,
    cell_deg: f64,
    dims: (usize, usize),
    cells: Vec<Vec<usize>>,
    centroids: PointGrid,
}

impl<'a> BlockIndex<'a> {
    pub fn new(blocks: &'a [CensusBlock]) -> Self {
        let bboxes: Vec<BBox> = blocks
            .iter()
            .map(|b| {
                let mut bb = BBox::empty();
                for p in b.polygons.iter().flat_map(|poly| poly.exterior.iter()) {
                    bb.extend(*p);
                }
                bb
            })
            .collect();
        let mut all = BBox::empty();
        for bb in bboxes.iter().filter(|b| !b.is_empty()) {
            all.extend(bb.min);
            all.extend(bb.max);
        }
        let (origin, dims, cell_deg) = if all.is_empty() {
            (LonLat::new(0.0, 0.0), (0, 0), 1.0)
        } else {
            let span = (all.max.lon - all.min.lon).max(all.max.lat - all.min.lat).max(1e-9);
            let per_side = ((blocks.len() as f64).sqrt().ceil() as usize).clamp(1, 512);
            let cell = span / per_side as f64 * 1.000_001;
            let nx = ((all.max.lon - all.min.lon) / cell).floor() as usize + 1;
            let ny = ((all.max.lat - all.min.lat) / cell).floor() as usize + 1;
            (all.min, (nx, ny), cell)
        };
        let mut cells = vec![Vec::new(); dims.0 * dims.1];
        for (i, bb) in bboxes.iter().enumerate() {
            if bb.is_empty() {
                continue;
            }
            let (x0, y0) = Self::cell(origin, cell_deg, dims, bb.min);
            let (x1, y1) = Self::cell(origin, cell_deg, dims, bb.max);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    cells[y * dims.0 + x].push(i);
                }
            }
        }
        let centroids = PointGrid::new(blocks.iter().map(|b| b.centroid).collect(), 500.0);
        Self {
            blocks,
            bboxes,
            origin,
            cell_deg,
            dims,
            cells,
            centroids,
        }
    }

    fn cell(origin: LonLat, cell: f64, dims: (usize, usize), p: LonLat) -> (usize, usize) {
        let x = ((p.lon - origin.lon) / cell).floor().max(0.0) as usize;
        let y = ((p.lat - origin.lat) / cell).floor().max(0.0) as usize;
        (x.min(dims.0.saturating_sub(1)), y.min(dims.1.saturating_sub(1)))
    }

    pub fn blocks(&self) -> &'a [CensusBlock] {
        self.blocks
    }

    /// Positions of all blocks covering `p` (inside or on the boundary),
    /// ascending.
    pub fn covering(&self, p: LonLat) -> Vec<usize> {
        if self.cells.is_empty() || !p.is_finite() {
            return Vec::new();
        }
        let (x, y) = Self::cell(self.origin, self.cell_deg, self.dims, p);
        let mut hits: Vec<usize> = self.cells[y * self.dims.0 + x]
            .iter()
            .copied()
            .filter(|&i| self.bboxes[i].contains(p) && self.blocks[i].covers(p))
            .collect();
        hits.sort_unstable();
        hits
    }

    /// Ego-place of a point: the covering block with the smallest id, else
    /// the nearest centroid within [`FALLBACK_RADIUS_M`].
    pub fn assign_point(&self, p: LonLat) -> Result<Assignment, AssignError> {
        let hits = self.covering(p);
        if let Some(best) = hits.iter().min_by(|&&a, &&b| self.blocks[a].id.cmp(&self.blocks[b].id)) {
            return Ok(Assignment::Contained(self.blocks[*best].id.clone()));
        }
        match self.centroids.nearest_by(p, |i| self.blocks[i].id.as_str()) {
            Some((i, d)) if d <= FALLBACK_RADIUS_M => Ok(Assignment::Nearest(self.blocks[i].id.clone(), d)),
            _ => Err(AssignError::Unassignable {
                lon: p.lon,
                lat: p.lat,
                radius_m: FALLBACK_RADIUS_M,
            }),
        }
    }

    pub fn assign_ego_place(&self, listing: &Listing) -> Result<Assignment, AssignError> {
        let p = listing.location.ok_or_else(|| AssignError::NoLocation {
            listing: listing.id.clone(),
        })?;
        self.assign_point(p)
    }

    /// Assigns every listing in parallel. Returns the assigned listings (in
    /// input order) and the excluded ones with their reasons.
    pub fn assign_all(&self, listings: Vec<Listing>) -> (Vec<Listing>, Vec<(Listing, AssignError)>) {
        let results: Vec<_> = listings
            .into_par_iter()
            .map(|l| {
                let r = self.assign_ego_place(&l);
                (l, r)
            })
            .collect();
        let mut assigned = Vec::new();
        let mut excluded = Vec::new();
        for (mut l, r) in results {
            match r {
                Ok(a) => {
                    l.ego_place_id = Some(a.block_id().to_string());
                    assigned.push(l);
                }
                Err(e) => {
                    log::warn!("excluding listing {}: {e}", l.id);
                    excluded.push((l, e));
                }
            }
        }
        (assigned, excluded)
    }

    /// Nearest centroid distance, exposed for diagnostics.
    pub fn nearest_centroid(&self, p: LonLat) -> Option<(&'a CensusBlock, f64)> {
        self.centroids
            .nearest_by(p, |i| self.blocks[i].id.as_str())
            .map(|(i, d)| (&self.blocks[i], d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{LocalProjection, Polygon};
    use std::collections::BTreeMap;

    fn block(id: &str, proj: &LocalProjection, x0: f64, y0: f64, side: f64) -> CensusBlock {
        let ring = vec![
            proj.to_lonlat(x0, y0),
            proj.to_lonlat(x0 + side, y0),
            proj.to_lonlat(x0 + side, y0 + side),
            proj.to_lonlat(x0, y0 + side),
        ];
        let poly = Polygon::new(ring, vec![]);
        CensusBlock {
            id: id.into(),
            centroid: proj.to_lonlat(x0 + side / 2.0, y0 + side / 2.0),
            area_m2: side * side,
            polygons: vec![poly],
            population: 0,
            buildings_total: 0,
            buildings_residential: 0,
            buildings_commercial: 0,
            buildings_by_year_bracket: BTreeMap::new(),
            companies: 0,
            company_avg_size: 0.0,
            employees: 0,
            shops: 0,
            heavy_industries: 0,
            avg_property_tax: 0.0,
            companies_by_ateco: BTreeMap::new(),
        }
    }

    fn fixture() -> (LocalProjection, Vec<CensusBlock>) {
        let proj = LocalProjection::new(LonLat::new(7.6, 45.0));
        let blocks = vec![
            block("B2", &proj, 0.0, 0.0, 200.0),
            block("B7", &proj, 200.0, 0.0, 200.0),
            block("B9", &proj, 0.0, 200.0, 200.0),
        ];
        (proj, blocks)
    }

    #[test]
    fn strictly_inside_point_gets_its_block() {
        let (proj, blocks) = fixture();
        let idx = BlockIndex::new(&blocks);
        let a = idx.assign_point(proj.to_lonlat(300.0, 100.0)).unwrap();
        assert_eq!(a, Assignment::Contained("B7".into()));
    }

    #[test]
    fn shared_boundary_resolves_to_smallest_id() {
        // Two abutting squares sharing the vertical edge at lon = 7.601.
        let mk = |id: &str, x0: f64| {
            let ring = vec![
                LonLat::new(x0, 45.0),
                LonLat::new(x0 + 0.001, 45.0),
                LonLat::new(x0 + 0.001, 45.001),
                LonLat::new(x0, 45.001),
            ];
            let mut b = block(id, &LocalProjection::new(LonLat::new(x0, 45.0)), 0.0, 0.0, 1.0);
            b.polygons = vec![Polygon::new(ring, vec![])];
            b.centroid = LonLat::new(x0 + 0.0005, 45.0005);
            b
        };
        let blocks = vec![mk("B2", 7.600), mk("B10", 7.601)];
        let idx = BlockIndex::new(&blocks);
        let on_edge = LonLat::new(7.601, 45.0004);
        assert_eq!(idx.covering(on_edge).len(), 2);
        // lexicographic: "B10" < "B2"
        assert_eq!(idx.assign_point(on_edge).unwrap().block_id(), "B10");
    }

    #[test]
    fn point_just_outside_falls_back_to_nearest_centroid() {
        let (proj, blocks) = fixture();
        let idx = BlockIndex::new(&blocks);
        let a = idx.assign_point(proj.to_lonlat(450.0, 100.0)).unwrap();
        match a {
            Assignment::Nearest(id, d) => {
                assert_eq!(id, "B7");
                assert!((d - 150.0).abs() < 0.5);
            }
            other => panic!("expected fallback, got {other:?}"),
        }
    }

    #[test]
    fn offshore_point_is_unassignable() {
        let (proj, blocks) = fixture();
        let idx = BlockIndex::new(&blocks);
        let err = idx.assign_point(proj.to_lonlat(5000.0, -200.0)).unwrap_err();
        assert!(matches!(err, AssignError::Unassignable { .. }));
    }

    #[test]
    fn assignment_is_deterministic_and_excludes() {
        let (proj, blocks) = fixture();
        let idx = BlockIndex::new(&blocks);
        let mk = |id: &str, x: f64, y: f64| crate::geomodel::Listing {
            id: id.into(),
            location: Some(proj.to_lonlat(x, y)),
            asked_price: Some(1.0),
            posted_date: None,
            attributes: BTreeMap::new(),
            ego_place_id: None,
        };
        let ls: Vec<_> = (0..50).map(|i| mk(&format!("L{i}"), (i * 13 % 600) as f64, (i * 7 % 400) as f64 - 50.0)).collect();
        let (a1, e1) = idx.assign_all(ls.clone());
        let (a2, e2) = idx.assign_all(ls);
        assert_eq!(a1, a2);
        assert_eq!(e1.len(), e2.len());
        for l in &a1 {
            let id = l.ego_place_id.as_deref().unwrap();
            assert!(blocks.iter().any(|b| b.id == id));
        }
    }
}
