use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::geomodel::{AttributeKind, Listing, PROPERTY_ATTRIBUTES};
use crate::table::FeatureTable;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("place and egohood tables cover different blocks")]
    TableMismatch,
    #[error("unknown design column `{0}`")]
    UnknownColumn(String),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureGroup {
    Property,
    EgoPlace,
    Egohood,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 3] = [FeatureGroup::Property, FeatureGroup::EgoPlace, FeatureGroup::Egohood];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureGroup::Property => "property",
            FeatureGroup::EgoPlace => "ego-place",
            FeatureGroup::Egohood => "egohood",
        }
    }

    pub fn is_neighborhood(self) -> bool {
        self != FeatureGroup::Property
    }
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureGroup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|g| g.as_str() == s).ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DesignColumn {
    pub group: FeatureGroup,
    pub name: String,
}

impl DesignColumn {
    pub fn new(group: FeatureGroup, name: impl Into<String>) -> Self {
        Self {
            group,
            name: name.into(),
        }
    }

    /// `group:name`, as written in design.csv headers and model files.
    pub fn header(&self) -> String {
        format!("{}:{}", self.group, self.name)
    }

    pub fn parse(header: &str) -> Option<Self> {
        let (g, n) = header.split_once(':')?;
        Some(Self::new(g.parse().ok()?, n))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodedColumn {
    Numeric(String),
    Boolean(String),
    /// One-hot indicator for `attribute == level`.
    Level(String, String),
}

impl EncodedColumn {
    pub fn name(&self) -> String {
        match self {
            EncodedColumn::Numeric(a) | EncodedColumn::Boolean(a) => a.clone(),
            EncodedColumn::Level(a, l) => format!("{a}={l}"),
        }
    }

    pub fn attribute(&self) -> &str {
        match self {
            EncodedColumn::Numeric(a) | EncodedColumn::Boolean(a) | EncodedColumn::Level(a, _) => a,
        }
    }
}

fn parse_bool(s: &str) -> Option<f64> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "si" | "sì" => Some(1.0),
        "0" | "false" | "no" | "n" => Some(0.0),
        _ => None,
    }
}

/// Numeric encoding of the 25 property attributes.
///
/// Numeric attributes pass through (missing stays missing), booleans
/// default to absent, categoricals are one-hot over the levels seen at fit
/// time; an unseen or missing level encodes as all zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyEncoder {
    columns: Vec<EncodedColumn>,
}

impl PropertyEncoder {
    pub fn fit(listings: &[Listing]) -> Self {
        let mut levels: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for l in listings {
            for (name, kind) in PROPERTY_ATTRIBUTES {
                if kind == AttributeKind::Categorical {
                    if let Some(v) = l.attributes.get(name) {
                        levels.entry(name).or_default().insert(v.as_str());
                    }
                }
            }
        }
        let mut columns = Vec::new();
        for (name, kind) in PROPERTY_ATTRIBUTES {
            match kind {
                AttributeKind::Numeric => columns.push(EncodedColumn::Numeric(name.into())),
                AttributeKind::Boolean => columns.push(EncodedColumn::Boolean(name.into())),
                AttributeKind::Categorical => {
                    for lv in levels.get(name).into_iter().flatten() {
                        columns.push(EncodedColumn::Level(name.into(), lv.to_string()));
                    }
                }
            }
        }
        Self { columns }
    }

    /// Rebuilds an encoder from encoded column names (without group tag).
    pub fn from_column_names<S: AsRef<str>>(names: &[S]) -> Result<Self, DesignError> {
        let kinds: BTreeMap<&str, AttributeKind> = PROPERTY_ATTRIBUTES.into_iter().collect();
        let mut columns = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            let col = match n.split_once('=') {
                Some((a, l)) if kinds.get(a) == Some(&AttributeKind::Categorical) => {
                    EncodedColumn::Level(a.into(), l.into())
                }
                None => match kinds.get(n) {
                    Some(AttributeKind::Numeric) => EncodedColumn::Numeric(n.into()),
                    Some(AttributeKind::Boolean) => EncodedColumn::Boolean(n.into()),
                    _ => return Err(DesignError::UnknownColumn(n.into())),
                },
                _ => return Err(DesignError::UnknownColumn(n.into())),
            };
            columns.push(col);
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &[EncodedColumn] {
        &self.columns
    }

    pub fn encode(&self, listing: &Listing) -> Vec<Option<f64>> {
        self.columns
            .iter()
            .map(|c| {
                let raw = listing.attributes.get(c.attribute()).map(|s| s.as_str());
                match c {
                    EncodedColumn::Numeric(_) => raw.and_then(|s| s.trim().parse::<f64>().ok()).filter(|x| x.is_finite()),
                    EncodedColumn::Boolean(_) => match raw {
                        None => Some(0.0),
                        Some(s) => parse_bool(s),
                    },
                    EncodedColumn::Level(_, lv) => Some(if raw == Some(lv.as_str()) { 1.0 } else { 0.0 }),
                }
            })
            .collect()
    }
}

/// Listings × (property ⧺ ego-place ⧺ egohood) features plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub ids: Vec<String>,
    pub block_ids: Vec<String>,
    pub columns: Vec<DesignColumn>,
    pub rows: Vec<Vec<Option<f64>>>,
    /// Asked prices; `None` for listings to be nowcast.
    pub targets: Vec<Option<f64>>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn headers(&self) -> Vec<String> {
        self.columns.iter().map(DesignColumn::header).collect()
    }

    pub fn column_index(&self, header: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.header() == header)
    }

    pub fn row_index(&self) -> BTreeMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn group_counts(&self) -> BTreeMap<FeatureGroup, usize> {
        let mut m = BTreeMap::new();
        for c in &self.columns {
            *m.entry(c.group).or_default() += 1;
        }
        m
    }

    pub fn write_csv(&self, design: &Path, targets: &Path) -> Result<(), DesignError> {
        let mut w = csv::Writer::from_path(design)?;
        let mut header = vec!["id".to_string(), "block_id".to_string()];
        header.extend(self.headers());
        w.write_record(&header)?;
        for ((id, b), row) in self.ids.iter().zip(&self.block_ids).zip(&self.rows) {
            let mut rec = vec![id.clone(), b.clone()];
            rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(targets)?;
        w.write_record(["id", "asked_price"])?;
        for (id, y) in self.ids.iter().zip(&self.targets) {
            w.write_record([id.clone(), y.map(|v| v.to_string()).unwrap_or_default()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(design: &Path, targets: &Path) -> Result<Self, DesignError> {
        let err = |p: &Path, m: String| DesignError::Parse {
            path: p.display().to_string(),
            message: m,
        };
        let num = |p: &Path, cell: &str, row: usize| -> Result<Option<f64>, DesignError> {
            if cell.is_empty() {
                Ok(None)
            } else {
                cell.parse::<f64>()
                    .map(Some)
                    .map_err(|_| err(p, format!("row {row}: bad number `{cell}`")))
            }
        };
        let mut rdr = csv::Reader::from_path(design)?;
        let header = rdr.headers()?.clone();
        if header.len() < 2 || &header[0] != "id" || &header[1] != "block_id" {
            return Err(err(design, "expected id,block_id,... header".into()));
        }
        let columns = header
            .iter()
            .skip(2)
            .map(|h| DesignColumn::parse(h).ok_or_else(|| err(design, format!("bad column header `{h}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut m = DesignMatrix {
            ids: Vec::new(),
            block_ids: Vec::new(),
            columns,
            rows: Vec::new(),
            targets: Vec::new(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            m.ids.push(rec[0].to_string());
            m.block_ids.push(rec[1].to_string());
            m.rows
                .push(rec.iter().skip(2).map(|c| num(design, c, i + 1)).collect::<Result<Vec<_>, _>>()?);
        }
        let mut by_id: BTreeMap<String, Option<f64>> = BTreeMap::new();
        let mut rdr = csv::Reader::from_path(targets)?;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            by_id.insert(rec[0].to_string(), num(targets, &rec[1], i + 1)?);
        }
        m.targets = m
            .ids
            .iter()
            .map(|id| by_id.get(id).copied().ok_or_else(|| err(targets, format!("no target row for `{id}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(m)
    }
}

/// Concatenates the encoded property attributes with the place (`f`) and
/// egohood (`e`) rows of each listing's ego-place. Listings without a
/// known ego-place are returned separately with a reason.
pub fn assemble_design_matrix(
    listings: &[Listing],
    encoder: &PropertyEncoder,
    f: &FeatureTable,
    e: &FeatureTable,
) -> Result<(DesignMatrix, Vec<(String, String)>), DesignError> {
    if f.block_ids() != e.block_ids() {
        return Err(DesignError::TableMismatch);
    }
    let mut columns: Vec<DesignColumn> = encoder
        .columns()
        .iter()
        .map(|c| DesignColumn::new(FeatureGroup::Property, c.name()))
        .collect();
    columns.extend(f.column_names().map(|n| DesignColumn::new(FeatureGroup::EgoPlace, n)));
    columns.extend(e.column_names().map(|n| DesignColumn::new(FeatureGroup::Egohood, n)));
    let mut m = DesignMatrix {
        ids: Vec::new(),
        block_ids: Vec::new(),
        columns,
        rows: Vec::new(),
        targets: Vec::new(),
    };
    let mut excluded = Vec::new();
    for l in listings {
        let Some(block) = l.ego_place_id.as_deref() else {
            log::warn!("listing {} has no ego-place; excluded", l.id);
            excluded.push((l.id.clone(), "no ego-place".to_string()));
            continue;
        };
        let (Some(fr), Some(er)) = (f.row_of(block), e.row_of(block)) else {
            log::warn!("listing {} references unknown block {block}; excluded", l.id);
            excluded.push((l.id.clone(), format!("unknown ego-place {block}")));
            continue;
        };
        let mut row = encoder.encode(l);
        row.extend_from_slice(fr);
        row.extend_from_slice(er);
        m.ids.push(l.id.clone());
        m.block_ids.push(block.to_string());
        m.rows.push(row);
        m.targets.push(l.asked_price);
    }
    Ok((m, excluded))
}
