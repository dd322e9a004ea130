//! Planar and spherical geometry helpers shared by every layer.
//!
//! Coordinates are WGS84 `(lon, lat)` in degrees. Distances between points
//! are great-circle (haversine) meters; areas and clipping run on a local
//! equirectangular projection, which is accurate to well under a percent at
//! city scale.

use serde::{Deserialize, Serialize};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub const fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }

    pub fn is_finite(&self) -> bool {
        self.lon.is_finite() && self.lat.is_finite()
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: LonLat, b: LonLat) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Equirectangular projection around a reference point, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalProjection {
    origin: LonLat,
    cos_lat: f64,
}

impl LocalProjection {
    pub fn new(origin: LonLat) -> Self {
        Self {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    pub fn origin(&self) -> LonLat {
        self.origin
    }

    pub fn to_local(&self, p: LonLat) -> (f64, f64) {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        (
            (p.lon - self.origin.lon) * k * self.cos_lat,
            (p.lat - self.origin.lat) * k,
        )
    }

    pub fn to_lonlat(&self, x: f64, y: f64) -> LonLat {
        let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        LonLat::new(
            self.origin.lon + x / (k * self.cos_lat),
            self.origin.lat + y / k,
        )
    }
}

/// Axis-aligned bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min: LonLat,
    pub max: LonLat,
}

impl BBox {
    pub fn empty() -> Self {
        Self {
            min: LonLat::new(f64::INFINITY, f64::INFINITY),
            max: LonLat::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn extend(&mut self, p: LonLat) {
        self.min.lon = self.min.lon.min(p.lon);
        self.min.lat = self.min.lat.min(p.lat);
        self.max.lon = self.max.lon.max(p.lon);
        self.max.lat = self.max.lat.max(p.lat);
    }

    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a LonLat>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.extend(*p);
        }
        b
    }

    pub fn contains(&self, p: LonLat) -> bool {
        p.lon >= self.min.lon && p.lon <= self.max.lon && p.lat >= self.min.lat && p.lat <= self.max.lat
    }

    pub fn is_empty(&self) -> bool {
        self.min.lon > self.max.lon
    }
}

/// A simple polygon: one exterior ring plus optional holes.
///
/// Rings are stored without the closing duplicate vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Vec<LonLat>,
    #[serde(default)]
    pub holes: Vec<Vec<LonLat>>,
}

impl Polygon {
    /// Builds a polygon, dropping a closing vertex equal to the first one.
    pub fn new(exterior: Vec<LonLat>, holes: Vec<Vec<LonLat>>) -> Self {
        Self {
            exterior: open_ring(exterior),
            holes: holes.into_iter().map(open_ring).collect(),
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::of_points(&self.exterior)
    }

    /// Number of distinct vertices of the exterior ring.
    pub fn vertex_count(&self) -> usize {
        self.exterior.len()
    }

    pub fn locate(&self, p: LonLat) -> Location {
        match locate_in_ring(&self.exterior, p) {
            Location::Outside => Location::Outside,
            Location::Boundary => Location::Boundary,
            Location::Inside => {
                for hole in &self.holes {
                    match locate_in_ring(hole, p) {
                        Location::Inside => return Location::Outside,
                        Location::Boundary => return Location::Boundary,
                        Location::Outside => {}
                    }
                }
                Location::Inside
            }
        }
    }

    /// Inside or on the boundary.
    pub fn covers(&self, p: LonLat) -> bool {
        self.locate(p) != Location::Outside
    }

    /// Area in square meters under a projection centered on the polygon.
    pub fn area_m2(&self) -> f64 {
        let proj = LocalProjection::new(self.bbox_center());
        self.area_m2_with(&proj)
    }

    pub fn area_m2_with(&self, proj: &LocalProjection) -> f64 {
        let ext = ring_area(&project_ring(proj, &self.exterior)).abs();
        let holes: f64 = self
            .holes
            .iter()
            .map(|h| ring_area(&project_ring(proj, h)).abs())
            .sum();
        (ext - holes).max(0.0)
    }

    pub fn bbox_center(&self) -> LonLat {
        let b = self.bbox();
        LonLat::new((b.min.lon + b.max.lon) / 2.0, (b.min.lat + b.max.lat) / 2.0)
    }

    /// Area-weighted centroid of the exterior ring.
    pub fn centroid(&self) -> LonLat {
        let proj = LocalProjection::new(self.bbox_center());
        let ring = project_ring(&proj, &self.exterior);
        let n = ring.len();
        let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (x0, y0) = ring[i];
            let (x1, y1) = ring[(i + 1) % n];
            let cross = x0 * y1 - x1 * y0;
            a += cross;
            cx += (x0 + x1) * cross;
            cy += (y0 + y1) * cross;
        }
        if a.abs() < 1e-12 {
            return self.bbox_center();
        }
        proj.to_lonlat(cx / (3.0 * a), cy / (3.0 * a))
    }

    /// Smallest great-circle-consistent distance from `p` to any edge of the
    /// polygon, in meters (local projection around `p`).
    pub fn boundary_distance_m(&self, p: LonLat) -> f64 {
        let proj = LocalProjection::new(p);
        std::iter::once(&self.exterior)
            .chain(self.holes.iter())
            .map(|ring| {
                let pts = project_ring(&proj, ring);
                let n = pts.len();
                (0..n)
                    .map(|i| point_segment_distance((0.0, 0.0), pts[i], pts[(i + 1) % n]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn open_ring(mut ring: Vec<LonLat>) -> Vec<LonLat> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

/// Result of a point-in-polygon query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Inside,
    Boundary,
    Outside,
}

// Points closer than this (in degrees) to an edge count as on the boundary.
const BOUNDARY_EPS: f64 = 1e-12;

fn locate_in_ring(ring: &[LonLat], p: LonLat) -> Location {
    let n = ring.len();
    if n < 3 {
        return Location::Outside;
    }
    let mut inside = false;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        if on_segment(a, b, p) {
            return Location::Boundary;
        }
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    if inside {
        Location::Inside
    } else {
        Location::Outside
    }
}

fn on_segment(a: LonLat, b: LonLat, p: LonLat) -> bool {
    let cross = (b.lon - a.lon) * (p.lat - a.lat) - (b.lat - a.lat) * (p.lon - a.lon);
    let len = ((b.lon - a.lon).powi(2) + (b.lat - a.lat).powi(2)).sqrt();
    if cross.abs() > BOUNDARY_EPS * len.max(1e-300) {
        return false;
    }
    p.lon >= a.lon.min(b.lon) - BOUNDARY_EPS
        && p.lon <= a.lon.max(b.lon) + BOUNDARY_EPS
        && p.lat >= a.lat.min(b.lat) - BOUNDARY_EPS
        && p.lat <= a.lat.max(b.lat) + BOUNDARY_EPS
}

pub fn project_ring(proj: &LocalProjection, ring: &[LonLat]) -> Vec<(f64, f64)> {
    ring.iter().map(|p| proj.to_local(*p)).collect()
}

/// Signed shoelace area (counter-clockwise positive).
pub fn ring_area(ring: &[(f64, f64)]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    s / 2.0
}

pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Regular polygon approximating a circle, counter-clockwise.
pub fn circle_ring(center: (f64, f64), radius: f64, segments: usize) -> Vec<(f64, f64)> {
    (0..segments)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / segments as f64;
            (center.0 + radius * t.cos(), center.1 + radius * t.sin())
        })
        .collect()
}

/// Sutherland-Hodgman clipping of `subject` against a convex,
/// counter-clockwise `clip` ring. Works for concave subjects as far as the
/// resulting area is concerned.
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let inside = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let (cin, pin) = (inside(cur), inside(prev));
            if cin {
                if !pin {
                    output.push(intersect(prev, cur, a, b));
                }
                output.push(cur);
            } else if pin {
                output.push(intersect(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect(p: (f64, f64), q: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (r, s) = ((q.0 - p.0, q.1 - p.1), (b.0 - a.0, b.1 - a.1));
    let denom = r.0 * s.1 - r.1 * s.0;
    if denom.abs() < 1e-300 {
        return q;
    }
    let t = ((a.0 - p.0) * s.1 - (a.1 - p.1) * s.0) / denom;
    (p.0 + t * r.0, p.1 + t * r.1)
}

/// Area in m² of the part of `poly` inside a circle of `radius_m` around
/// `center`.
pub fn area_within_radius(poly: &Polygon, center: LonLat, radius_m: f64) -> f64 {
    let proj = LocalProjection::new(center);
    let circle = circle_ring((0.0, 0.0), radius_m, 128);
    let clipped = |ring: &[LonLat]| {
        let mut pts = project_ring(&proj, ring);
        if ring_area(&pts) < 0.0 {
            pts.reverse();
        }
        ring_area(&clip_convex(&pts, &circle)).abs()
    };
    let ext = clipped(&poly.exterior);
    if ext == 0.0 {
        return 0.0;
    }
    let holes: f64 = poly.holes.iter().map(|h| clipped(h)).sum();
    (ext - holes).max(0.0)
}

/// Parses a WKT `POLYGON ((x y, ...), (...))`.
pub fn parse_wkt_polygon(text: &str) -> Result<Polygon, String> {
    let t = text.trim();
    let upper = t.to_ascii_uppercase();
    let body = upper
        .strip_prefix("POLYGON")
        .ok_or_else(|| format!("expected POLYGON, got `{t}`"))?
        .trim();
    let body = body
        .strip_prefix('(')
        .and_then(|b| b.strip_suffix(')'))
        .ok_or_else(|| "unbalanced parentheses".to_string())?;
    let mut rings = Vec::new();
    for chunk in body.split(')') {
        let chunk = chunk.trim().trim_start_matches(',').trim();
        if chunk.is_empty() {
            continue;
        }
        let chunk = chunk
            .strip_prefix('(')
            .ok_or_else(|| format!("malformed ring `{chunk}`"))?;
        let ring = chunk
            .split(',')
            .map(|pair| {
                let mut it = pair.split_whitespace();
                let x = it.next().and_then(|v| v.parse::<f64>().ok());
                let y = it.next().and_then(|v| v.parse::<f64>().ok());
                match (x, y, it.next()) {
                    (Some(x), Some(y), None) => Ok(LonLat::new(x, y)),
                    _ => Err(format!("bad coordinate `{}`", pair.trim())),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rings.push(ring);
    }
    let mut rings = rings.into_iter();
    let exterior = rings.next().ok_or_else(|| "polygon without rings".to_string())?;
    Ok(Polygon::new(exterior, rings.collect()))
}

pub fn format_wkt_polygon(poly: &Polygon) -> String {
    let ring = |r: &[LonLat]| {
        let mut pts: Vec<String> = r.iter().map(|p| format!("{} {}", p.lon, p.lat)).collect();
        if let Some(first) = r.first() {
            pts.push(format!("{} {}", first.lon, first.lat));
        }
        format!("({})", pts.join(", "))
    };
    let mut parts = vec![ring(&poly.exterior)];
    parts.extend(poly.holes.iter().map(|h| ring(h)));
    format!("POLYGON ({})", parts.join(", "))
}

/// Uniform grid over projected points for radius and nearest queries.
#[derive(Debug, Clone)]
pub struct PointGrid {
    proj: LocalProjection,
    cell: f64,
    min: (i64, i64),
    dims: (usize, usize),
    cells: Vec<Vec<usize>>,
    points: Vec<LonLat>,
}

impl PointGrid {
    pub fn new(points: Vec<LonLat>, cell_m: f64) -> Self {
        let bbox = BBox::of_points(&points);
        let origin = if bbox.is_empty() {
            LonLat::new(0.0, 0.0)
        } else {
            LonLat::new(
                (bbox.min.lon + bbox.max.lon) / 2.0,
                (bbox.min.lat + bbox.max.lat) / 2.0,
            )
        };
        let proj = LocalProjection::new(origin);
        let keys: Vec<(i64, i64)> = points
            .iter()
            .map(|p| {
                let (x, y) = proj.to_local(*p);
                ((x / cell_m).floor() as i64, (y / cell_m).floor() as i64)
            })
            .collect();
        let min = keys.iter().fold((i64::MAX, i64::MAX), |m, k| (m.0.min(k.0), m.1.min(k.1)));
        let max = keys.iter().fold((i64::MIN, i64::MIN), |m, k| (m.0.max(k.0), m.1.max(k.1)));
        let dims = if keys.is_empty() {
            (0, 0)
        } else {
            ((max.0 - min.0 + 1) as usize, (max.1 - min.1 + 1) as usize)
        };
        let mut cells = vec![Vec::new(); dims.0 * dims.1];
        for (i, k) in keys.iter().enumerate() {
            let idx = (k.1 - min.1) as usize * dims.0 + (k.0 - min.0) as usize;
            cells[idx].push(i);
        }
        Self {
            proj,
            cell: cell_m,
            min,
            dims,
            cells,
            points,
        }
    }

    pub fn points(&self) -> &[LonLat] {
        &self.points
    }

    fn cell_of(&self, p: LonLat) -> (i64, i64) {
        let (x, y) = self.proj.to_local(p);
        ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64)
    }

    fn cell_items(&self, cx: i64, cy: i64) -> &[usize] {
        let (gx, gy) = (cx - self.min.0, cy - self.min.1);
        if gx < 0 || gy < 0 || gx as usize >= self.dims.0 || gy as usize >= self.dims.1 {
            return &[];
        }
        &self.cells[gy as usize * self.dims.0 + gx as usize]
    }

    /// Indices of points within great-circle distance `< radius_m` of `p`,
    /// ascending.
    pub fn within(&self, p: LonLat, radius_m: f64) -> Vec<usize> {
        // projection distortion is far below 10% at city scale
        let reach = ((radius_m * 1.1) / self.cell).ceil() as i64 + 1;
        let (cx, cy) = self.cell_of(p);
        let mut out = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                for &i in self.cell_items(cx + dx, cy + dy) {
                    if haversine_m(p, self.points[i]) < radius_m {
                        out.push(i);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Nearest point by great-circle distance, ties to the lowest
    /// `tie_key`. Returns `(index, distance_m)`.
    pub fn nearest_by<K: Ord>(&self, p: LonLat, tie_key: impl Fn(usize) -> K) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let (cx, cy) = self.cell_of(p);
        let (x0, y0) = self.min;
        let (x1, y1) = (x0 + self.dims.0 as i64 - 1, y0 + self.dims.1 as i64 - 1);
        // Rings closer than the grid are empty; rings past the farthest
        // corner add nothing.
        let first = [x0 - cx, cx - x1, y0 - cy, cy - y1, 0].into_iter().max().unwrap_or(0);
        let last = [cx - x0, x1 - cx, cy - y0, y1 - cy].into_iter().max().unwrap_or(0);
        let mut best: Option<(usize, f64)> = None;
        let visit = |gx: i64, gy: i64, best: &mut Option<(usize, f64)>| {
            for &i in self.cell_items(gx, gy) {
                let d = haversine_m(p, self.points[i]);
                let better = match *best {
                    None => true,
                    Some((j, bd)) => d < bd || (d == bd && tie_key(i) < tie_key(j)),
                };
                if better {
                    *best = Some((i, d));
                }
            }
        };
        for ring in first..=last {
            for gy in (cy - ring).max(y0)..=(cy + ring).min(y1) {
                if (gy - cy).abs() == ring {
                    for gx in (cx - ring).max(x0)..=(cx + ring).min(x1) {
                        visit(gx, gy, &mut best);
                    }
                } else {
                    for gx in [cx - ring, cx + ring] {
                        if (x0..=x1).contains(&gx) {
                            visit(gx, gy, &mut best);
                        }
                    }
                }
            }
            if let Some((_, bd)) = best {
                // every unvisited cell is at least `ring` cells away
                if (ring as f64) * self.cell * 0.9 > bd {
                    break;
                }
            }
        }
        best
    }
}
