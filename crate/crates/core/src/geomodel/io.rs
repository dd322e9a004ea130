use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde_json::{json, Map, Value};

use super::{
    Amenity, AmenityCategory, AmenityGeometry, CensusBlock, CityDataset, LandUseClass, LandUsePolygon, LayerPaths,
    Listing, LoadError, RoadEdge, SecurityPoint, PROPERTY_ATTRIBUTES,
};
use crate::geo::{format_wkt_polygon, parse_wkt_polygon, LonLat, Polygon};

const LISTING_FIXED: [&str; 5] = ["id", "lon", "lat", "asked_price", "posted_date"];

fn read_text(layer: &'static str, path: &Path) -> Result<String, LoadError> {
    if !path.exists() {
        return Err(LoadError::MissingFile {
            layer,
            path: path.to_path_buf(),
        });
    }
    fs::read_to_string(path).map_err(|source| LoadError::Io {
        layer,
        path: path.to_path_buf(),
        source,
    })
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

struct Header {
    layer: &'static str,
    index: BTreeMap<String, usize>,
}

impl Header {
    fn new(layer: &'static str, rdr: &mut csv::Reader<&[u8]>, required: &[&str]) -> Result<Self, LoadError> {
        let headers = rdr
            .headers()
            .map_err(|e| LoadError::schema(layer, "header", e.to_string()))?
            .clone();
        let index: BTreeMap<String, usize> = headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        for r in required {
            if !index.contains_key(*r) {
                return Err(LoadError::schema(layer, "header", format!("missing column `{r}`")));
            }
        }
        Ok(Self { layer, index })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, col: &str) -> Option<&'r str> {
        self.index
            .get(col)
            .and_then(|&i| rec.get(i))
            .filter(|s| !s.is_empty())
    }

    fn req<'r>(&self, rec: &'r csv::StringRecord, row: usize, col: &str) -> Result<&'r str, LoadError> {
        self.get(rec, col)
            .ok_or_else(|| LoadError::schema(self.layer, format!("row {row}"), format!("empty `{col}`")))
    }

    fn num(&self, rec: &csv::StringRecord, row: usize, col: &str) -> Result<Option<f64>, LoadError> {
        match self.get(rec, col) {
            None => Ok(None),
            Some(s) => s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| LoadError::schema(self.layer, format!("row {row}"), format!("`{col}` is not a number: `{s}`"))),
        }
    }

    fn req_num(&self, rec: &csv::StringRecord, row: usize, col: &str) -> Result<f64, LoadError> {
        self.num(rec, row, col)?
            .ok_or_else(|| LoadError::schema(self.layer, format!("row {row}"), format!("empty `{col}`")))
    }
}

fn records(layer: &'static str, rdr: &mut csv::Reader<&[u8]>) -> Result<Vec<csv::StringRecord>, LoadError> {
    rdr.records()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| LoadError::schema(layer, format!("row {}", i + 1), e.to_string())))
        .collect()
}

pub fn read_listings(path: &Path) -> Result<Vec<Listing>, LoadError> {
    const LAYER: &str = "listings";
    let text = read_text(LAYER, path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv_reader(&text);
    let mut required: Vec<&str> = LISTING_FIXED.to_vec();
    required.extend(PROPERTY_ATTRIBUTES.iter().map(|(n, _)| *n));
    let h = Header::new(LAYER, &mut rdr, &required)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in records(LAYER, &mut rdr)?.into_iter().enumerate() {
        let row = i + 1;
        let id = h.req(&rec, row, "id")?.to_string();
        if !seen.insert(id.clone()) {
            return Err(LoadError::DuplicateId { layer: LAYER, id });
        }
        let location = match (h.num(&rec, row, "lon")?, h.num(&rec, row, "lat")?) {
            (Some(lon), Some(lat)) => Some(LonLat::new(lon, lat)),
            _ => None,
        };
        let asked_price = h.num(&rec, row, "asked_price")?;
        if let Some(p) = asked_price {
            if p <= 0.0 {
                return Err(LoadError::schema(LAYER, format!("row {row}"), format!("asked_price must be positive, got {p}")));
            }
        }
        let posted_date = match h.get(&rec, "posted_date") {
            None => None,
            Some(s) => Some(NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| {
                LoadError::schema(LAYER, format!("row {row}"), format!("posted_date `{s}`: {e}"))
            })?),
        };
        let attributes = PROPERTY_ATTRIBUTES
            .iter()
            .filter_map(|(name, _)| h.get(&rec, name).map(|v| (name.to_string(), v.to_string())))
            .collect();
        out.push(Listing {
            id,
            location,
            asked_price,
            posted_date,
            attributes,
            ego_place_id: None,
        });
    }
    Ok(out)
}

pub fn read_amenities(path: &Path) -> Result<Vec<Amenity>, LoadError> {
    const LAYER: &str = "amenities";
    let text = read_text(LAYER, path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv_reader(&text);
    let h = Header::new(LAYER, &mut rdr, &["id", "category", "lon", "lat"])?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in records(LAYER, &mut rdr)?.into_iter().enumerate() {
        let row = i + 1;
        let id = h.req(&rec, row, "id")?.to_string();
        if !seen.insert(id.clone()) {
            return Err(LoadError::DuplicateId { layer: LAYER, id });
        }
        let raw = h.req(&rec, row, "category")?;
        let category: AmenityCategory = raw.parse().map_err(|value| LoadError::UnknownCategory {
            row,
            value,
            allowed: AmenityCategory::allowed(),
        })?;
        let geometry = match h.get(&rec, "wkt_polygon") {
            Some(wkt) => {
                let poly = parse_wkt_polygon(wkt).map_err(|m| LoadError::schema(LAYER, format!("row {row}"), m))?;
                if poly.vertex_count() < 3 {
                    return Err(LoadError::schema(LAYER, format!("row {row}"), "polygon needs at least 3 vertices"));
                }
                AmenityGeometry::Area(poly)
            }
            None => AmenityGeometry::Point(LonLat::new(
                h.req_num(&rec, row, "lon")?,
                h.req_num(&rec, row, "lat")?,
            )),
        };
        out.push(Amenity { id, category, geometry });
    }
    Ok(out)
}

pub fn read_security(path: &Path) -> Result<Vec<SecurityPoint>, LoadError> {
    const LAYER: &str = "security";
    let text = read_text(LAYER, path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv_reader(&text);
    let h = Header::new(LAYER, &mut rdr, &["lon", "lat", "score"])?;
    let mut out = Vec::new();
    for (i, rec) in records(LAYER, &mut rdr)?.into_iter().enumerate() {
        let row = i + 1;
        let location = LonLat::new(h.req_num(&rec, row, "lon")?, h.req_num(&rec, row, "lat")?);
        let score = h.req_num(&rec, row, "score")?;
        if !(score > 0.0 && score < 10.0) {
            return Err(LoadError::schema(LAYER, format!("row {row}"), format!("score {score} outside (0, 10)")));
        }
        out.push(SecurityPoint { location, score });
    }
    Ok(out)
}

pub fn read_roads(path: &Path) -> Result<Vec<RoadEdge>, LoadError> {
    const LAYER: &str = "roads";
    let text = read_text(LAYER, path)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv_reader(&text);
    let h = Header::new(
        LAYER,
        &mut rdr,
        &["node_a_id", "node_b_id", "lon_a", "lat_a", "lon_b", "lat_b", "length_m"],
    )?;
    let mut out = Vec::new();
    for (i, rec) in records(LAYER, &mut rdr)?.into_iter().enumerate() {
        let row = i + 1;
        out.push(RoadEdge {
            node_a: h.req(&rec, row, "node_a_id")?.to_string(),
            node_b: h.req(&rec, row, "node_b_id")?.to_string(),
            a: LonLat::new(h.req_num(&rec, row, "lon_a")?, h.req_num(&rec, row, "lat_a")?),
            b: LonLat::new(h.req_num(&rec, row, "lon_b")?, h.req_num(&rec, row, "lat_b")?),
            length_m: h.req_num(&rec, row, "length_m")?,
        });
    }
    Ok(out)
}

fn features_of(layer: &'static str, text: &str) -> Result<Vec<Value>, LoadError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| LoadError::schema(layer, "document", e.to_string()))?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(LoadError::schema(layer, "document", "expected a FeatureCollection"));
    }
    match doc.get("features") {
        Some(Value::Array(fs)) => Ok(fs.clone()),
        _ => Err(LoadError::schema(layer, "document", "missing `features` array")),
    }
}

fn parse_ring(v: &Value) -> Option<Vec<LonLat>> {
    v.as_array()?
        .iter()
        .map(|pt| {
            let a = pt.as_array()?;
            Some(LonLat::new(a.first()?.as_f64()?, a.get(1)?.as_f64()?))
        })
        .collect()
}

fn parse_polygon_coords(v: &Value) -> Option<Polygon> {
    let rings: Vec<Vec<LonLat>> = v.as_array()?.iter().map(parse_ring).collect::<Option<_>>()?;
    let mut it = rings.into_iter();
    let ext = it.next()?;
    Some(Polygon::new(ext, it.collect()))
}

fn parse_geometry(layer: &'static str, idx: usize, feature: &Value) -> Result<Vec<Polygon>, LoadError> {
    let loc = format!("feature {idx}");
    let geom = feature
        .get("geometry")
        .ok_or_else(|| LoadError::schema(layer, loc.clone(), "missing geometry"))?;
    let coords = geom.get("coordinates").unwrap_or(&Value::Null);
    let polys = match geom.get("type").and_then(Value::as_str) {
        Some("Polygon") => parse_polygon_coords(coords).map(|p| vec![p]),
        Some("MultiPolygon") => coords
            .as_array()
            .and_then(|parts| parts.iter().map(parse_polygon_coords).collect::<Option<Vec<_>>>()),
        other => {
            return Err(LoadError::schema(
                layer,
                loc,
                format!("unsupported geometry type {other:?}"),
            ))
        }
    }
    .ok_or_else(|| LoadError::schema(layer, loc.clone(), "malformed coordinates"))?;
    if polys.is_empty() || polys.iter().any(|p| p.vertex_count() < 3) {
        return Err(LoadError::schema(layer, loc, "polygon needs at least 3 vertices"));
    }
    Ok(polys)
}

struct Props<'a> {
    layer: &'static str,
    idx: usize,
    map: &'a Map<String, Value>,
}

impl Props<'_> {
    fn err(&self, msg: String) -> LoadError {
        LoadError::schema(self.layer, format!("feature {}", self.idx), msg)
    }

    fn real(&self, key: &str) -> Result<f64, LoadError> {
        let v = self
            .map
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| self.err(format!("missing numeric property `{key}`")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(self.err(format!("`{key}` must be a non-negative number, got {v}")));
        }
        Ok(v)
    }

    fn count(&self, key: &str) -> Result<u64, LoadError> {
        let v = self.real(key)?;
        if v.fract() != 0.0 {
            return Err(self.err(format!("`{key}` must be an integer count, got {v}")));
        }
        Ok(v as u64)
    }

    fn count_map(&self, key: &str) -> Result<BTreeMap<String, u64>, LoadError> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(BTreeMap::new()),
            Some(Value::Object(m)) => m
                .iter()
                .map(|(k, v)| match v.as_u64() {
                    Some(n) => Ok((k.clone(), n)),
                    None => Err(self.err(format!("`{key}.{k}` must be a non-negative integer"))),
                })
                .collect(),
            Some(_) => Err(self.err(format!("`{key}` must be an object"))),
        }
    }
}

pub fn read_blocks(path: &Path) -> Result<Vec<CensusBlock>, LoadError> {
    const LAYER: &str = "blocks";
    let text = read_text(LAYER, path)?;
    let mut blocks = Vec::new();
    for (idx, f) in features_of(LAYER, &text)?.iter().enumerate() {
        let polygons = parse_geometry(LAYER, idx, f)?;
        let empty = Map::new();
        let map = f.get("properties").and_then(Value::as_object).unwrap_or(&empty);
        let p = Props { layer: LAYER, idx, map };
        let id = match map.get("id").or_else(|| f.get("id")) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(p.err("missing `id`".into())),
        };
        let area_m2 = p.real("area_m2")?;
        if area_m2 <= 0.0 {
            return Err(p.err(format!("area_m2 must be positive, got {area_m2}")));
        }
        let centroid = match map.get("centroid") {
            Some(v) => {
                let a = v.as_array().filter(|a| a.len() == 2);
                match a.and_then(|a| Some(LonLat::new(a[0].as_f64()?, a[1].as_f64()?))) {
                    Some(c) => c,
                    None => return Err(p.err("`centroid` must be [lon, lat]".into())),
                }
            }
            None => polygons[0].centroid(),
        };
        let mut bbox = crate::geo::BBox::empty();
        for q in polygons.iter().flat_map(|poly| poly.exterior.iter()) {
            bbox.extend(*q);
        }
        if !bbox.contains(centroid) {
            return Err(p.err("centroid lies outside the polygon bounding box".into()));
        }
        let companies_by_ateco = p
            .count_map("companies_by_ateco")?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|code| (code, v))
                    .map_err(|_| p.err(format!("ATECO code `{k}` is not numeric")))
            })
            .collect::<Result<_, _>>()?;
        blocks.push(CensusBlock {
            id,
            polygons,
            centroid,
            area_m2,
            population: p.count("population")?,
            buildings_total: p.count("buildings_total")?,
            buildings_residential: p.count("buildings_residential")?,
            buildings_commercial: p.count("buildings_commercial")?,
            buildings_by_year_bracket: p.count_map("buildings_by_year_bracket")?,
            companies: p.count("companies")?,
            company_avg_size: p.real("company_avg_size")?,
            employees: p.count("employees")?,
            shops: p.count("shops")?,
            heavy_industries: p.count("heavy_industries")?,
            avg_property_tax: p.real("avg_property_tax")?,
            companies_by_ateco,
        });
    }
    blocks.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = blocks.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(LoadError::DuplicateId {
            layer: LAYER,
            id: w[0].id.clone(),
        });
    }
    Ok(blocks)
}

pub fn read_landuse(path: &Path) -> Result<Vec<LandUsePolygon>, LoadError> {
    const LAYER: &str = "landuse";
    let text = read_text(LAYER, path)?;
    let mut out = Vec::new();
    for (idx, f) in features_of(LAYER, &text)?.iter().enumerate() {
        let polygons = parse_geometry(LAYER, idx, f)?;
        let raw = f
            .get("properties")
            .and_then(|p| p.get("klass"))
            .and_then(Value::as_str)
            .ok_or_else(|| LoadError::schema(LAYER, format!("feature {idx}"), "missing `klass`"))?;
        let klass: LandUseClass = raw.parse().map_err(|value| LoadError::UnknownLandUse {
            feature: idx,
            value,
            allowed: LandUseClass::allowed(),
        })?;
        for polygon in polygons {
            let area_m2 = polygon.area_m2();
            if area_m2 <= 0.0 {
                return Err(LoadError::schema(LAYER, format!("feature {idx}"), "polygon has zero area"));
            }
            out.push(LandUsePolygon { klass, polygon, area_m2 });
        }
    }
    Ok(out)
}

/// Loads and validates all six layers.
pub fn load_dataset(paths: &LayerPaths) -> Result<CityDataset, LoadError> {
    let blocks = read_blocks(&paths.blocks)?;
    let listings = read_listings(&paths.listings)?;
    let amenities = read_amenities(&paths.amenities)?;
    let landuse = read_landuse(&paths.landuse)?;
    let security = read_security(&paths.security)?;
    let roads = read_roads(&paths.roads)?;
    Ok(CityDataset {
        blocks,
        listings,
        amenities,
        landuse,
        security,
        roads,
    })
}

// ---------------------------------------------------------------- writers

fn ring_json(ring: &[LonLat]) -> Value {
    let mut pts: Vec<Value> = ring.iter().map(|p| json!([p.lon, p.lat])).collect();
    if let Some(first) = ring.first() {
        pts.push(json!([first.lon, first.lat]));
    }
    Value::Array(pts)
}

fn polygon_json(poly: &Polygon) -> Value {
    let mut rings = vec![ring_json(&poly.exterior)];
    rings.extend(poly.holes.iter().map(|h| ring_json(h)));
    Value::Array(rings)
}

fn geometry_json(polys: &[Polygon]) -> Value {
    if polys.len() == 1 {
        json!({"type": "Polygon", "coordinates": polygon_json(&polys[0])})
    } else {
        json!({"type": "MultiPolygon", "coordinates": polys.iter().map(polygon_json).collect::<Vec<_>>()})
    }
}

fn write_json(path: &Path, v: &Value) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut f, v)?;
    f.write_all(b"\n")?;
    f.flush()
}

pub fn write_blocks(path: &Path, blocks: &[CensusBlock]) -> std::io::Result<()> {
    let features: Vec<Value> = blocks
        .iter()
        .map(|b| {
            let ateco: Map<String, Value> = b
                .companies_by_ateco
                .iter()
                .map(|(k, v)| (k.to_string(), json!(v)))
                .collect();
            json!({
                "type": "Feature",
                "geometry": geometry_json(&b.polygons),
                "properties": {
                    "id": b.id,
                    "centroid": [b.centroid.lon, b.centroid.lat],
                    "area_m2": b.area_m2,
                    "population": b.population,
                    "buildings_total": b.buildings_total,
                    "buildings_residential": b.buildings_residential,
                    "buildings_commercial": b.buildings_commercial,
                    "buildings_by_year_bracket": b.buildings_by_year_bracket,
                    "companies": b.companies,
                    "company_avg_size": b.company_avg_size,
                    "employees": b.employees,
                    "shops": b.shops,
                    "heavy_industries": b.heavy_industries,
                    "avg_property_tax": b.avg_property_tax,
                    "companies_by_ateco": ateco,
                }
            })
        })
        .collect();
    write_json(path, &json!({"type": "FeatureCollection", "features": features}))
}

pub fn write_landuse(path: &Path, landuse: &[LandUsePolygon]) -> std::io::Result<()> {
    let features: Vec<Value> = landuse
        .iter()
        .map(|l| {
            json!({
                "type": "Feature",
                "geometry": geometry_json(std::slice::from_ref(&l.polygon)),
                "properties": {"klass": l.klass.as_str()}
            })
        })
        .collect();
    write_json(path, &json!({"type": "FeatureCollection", "features": features}))
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_listings(path: &Path, listings: &[Listing]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = LISTING_FIXED.to_vec();
    header.extend(PROPERTY_ATTRIBUTES.iter().map(|(n, _)| *n));
    w.write_record(&header)?;
    for l in listings {
        let mut rec = vec![
            l.id.clone(),
            opt_num(l.location.map(|p| p.lon)),
            opt_num(l.location.map(|p| p.lat)),
            opt_num(l.asked_price),
            l.posted_date.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default(),
        ];
        rec.extend(
            PROPERTY_ATTRIBUTES
                .iter()
                .map(|(n, _)| l.attributes.get(*n).cloned().unwrap_or_default()),
        );
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn write_amenities(path: &Path, amenities: &[Amenity]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "category", "lon", "lat", "wkt_polygon"])?;
    for a in amenities {
        let p = a.anchor();
        let wkt = match &a.geometry {
            AmenityGeometry::Point(_) => String::new(),
            AmenityGeometry::Area(poly) => format_wkt_polygon(poly),
        };
        w.write_record([a.id.clone(), a.category.to_string(), p.lon.to_string(), p.lat.to_string(), wkt])?;
    }
    w.flush()
}

pub fn write_security(path: &Path, points: &[SecurityPoint]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lon", "lat", "score"])?;
    for s in points {
        w.write_record([s.location.lon.to_string(), s.location.lat.to_string(), s.score.to_string()])?;
    }
    w.flush()
}

pub fn write_roads(path: &Path, roads: &[RoadEdge]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node_a_id", "node_b_id", "lon_a", "lat_a", "lon_b", "lat_b", "length_m"])?;
    for r in roads {
        w.write_record([
            r.node_a.clone(),
            r.node_b.clone(),
            r.a.lon.to_string(),
            r.a.lat.to_string(),
            r.b.lon.to_string(),
            r.b.lat.to_string(),
            r.length_m.to_string(),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn unknown_landuse_class_names_allowed_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "landuse.geojson",
            r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{"klass":"water"},
               "geometry":{"type":"Polygon","coordinates":[[[0,0],[0.001,0],[0.001,0.001],[0,0]]]}}]}"#,
        );
        let err = read_landuse(&p).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, LoadError::UnknownLandUse { .. }));
        assert!(msg.contains("water") && msg.contains("urban, commercial, green"), "{msg}");
    }

    #[test]
    fn empty_listings_file_is_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "listings.csv", "");
        assert!(read_listings(&p).unwrap().is_empty());
        write_listings(&p, &[]).unwrap();
        assert!(read_listings(&p).unwrap().is_empty());
    }

    #[test]
    fn missing_file_names_the_layer() {
        let err = read_roads(Path::new("/nonexistent/roads.csv")).unwrap_err();
        assert!(matches!(err, LoadError::MissingFile { layer: "roads", .. }));
    }

    #[test]
    fn unknown_amenity_category_lists_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "id,category,lon,lat,wkt_polygon\na1,coffee,7,45,\na2,casino,7,45,\n");
        match read_amenities(&p).unwrap_err() {
            LoadError::UnknownCategory { row, value, allowed } => {
                assert_eq!((row, value.as_str()), (2, "casino"));
                assert!(allowed.contains("restaurant_bar"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn security_score_outside_open_interval_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "lon,lat,score\n7,45,3.82\n7,45,10\n");
        let err = read_security(&p).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn listing_schema_error_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut header: Vec<&str> = LISTING_FIXED.to_vec();
        header.extend(PROPERTY_ATTRIBUTES.iter().map(|(n, _)| *n));
        let blank = ",".repeat(PROPERTY_ATTRIBUTES.len());
        let body = format!(
            "{}\nL1,7.6,45.0,100000,2018-01-01{blank}\nL2,7.6,45.0,abc,2018-01-01{blank}\n",
            header.join(",")
        );
        let p = write(dir.path(), "l.csv", &body);
        let err = read_listings(&p).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("asked_price"), "{err}");
    }

    #[test]
    fn blocks_round_trip_through_geojson() {
        let dir = tempfile::tempdir().unwrap();
        let poly = Polygon::new(
            vec![
                LonLat::new(7.6, 45.0),
                LonLat::new(7.601, 45.0),
                LonLat::new(7.601, 45.001),
                LonLat::new(7.6, 45.001),
            ],
            vec![],
        );
        let mut brackets = BTreeMap::new();
        brackets.insert("1950s".to_string(), 10);
        let block = CensusBlock {
            id: "B1".into(),
            centroid: poly.centroid(),
            area_m2: poly.area_m2(),
            polygons: vec![poly],
            population: 120,
            buildings_total: 12,
            buildings_residential: 10,
            buildings_commercial: 2,
            buildings_by_year_bracket: brackets,
            companies: 4,
            company_avg_size: 2.5,
            employees: 10,
            shops: 1,
            heavy_industries: 0,
            avg_property_tax: 812.25,
            companies_by_ateco: [(58, 1), (47, 3)].into_iter().collect(),
        };
        let p = dir.path().join("blocks.geojson");
        write_blocks(&p, std::slice::from_ref(&block)).unwrap();
        assert_eq!(read_blocks(&p).unwrap(), vec![block]);
    }
}
