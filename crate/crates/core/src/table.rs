//! Block-by-feature table with explicit missing values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("row {row} has {got} values, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("block ids must be unique and sorted (offending id `{0}`)")]
    Unsorted(String),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub unit: String,
    pub source: String,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, unit: &str, source: &str) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
            source: source.into(),
        }
    }
}

/// Rows are blocks sorted by id; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    block_ids: Vec<String>,
    columns: Vec<ColumnSpec>,
    values: Vec<Vec<Option<f64>>>,
}

impl FeatureTable {
    pub fn new(block_ids: Vec<String>, columns: Vec<ColumnSpec>, values: Vec<Vec<Option<f64>>>) -> Result<Self, TableError> {
        if let Some(w) = block_ids.windows(2).find(|w| w[0] >= w[1]) {
            return Err(TableError::Unsorted(w[1].clone()));
        }
        if values.len() != block_ids.len() {
            return Err(TableError::Ragged {
                row: values.len(),
                got: values.len(),
                expected: block_ids.len(),
            });
        }
        for (row, r) in values.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(TableError::Ragged {
                    row,
                    got: r.len(),
                    expected: columns.len(),
                });
            }
        }
        Ok(Self {
            block_ids,
            columns,
            values,
        })
    }

    pub fn block_ids(&self) -> &[String] {
        &self.block_ids
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn n_rows(&self) -> usize {
        self.block_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        &self.values[i]
    }

    pub fn row_of(&self, block_id: &str) -> Option<&[Option<f64>]> {
        self.block_ids
            .binary_search_by(|b| b.as_str().cmp(block_id))
            .ok()
            .map(|i| self.values[i].as_slice())
    }

    pub fn get(&self, block_id: &str, column: &str) -> Option<f64> {
        let c = self.column_index(column)?;
        self.row_of(block_id)?[c]
    }

    /// Writes `block_id,<columns...>` with empty cells for missing values.
    pub fn write_csv(&self, path: &Path) -> Result<(), TableError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["block_id".to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        w.write_record(&header)?;
        for (id, row) in self.block_ids.iter().zip(&self.values) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Sidecar schema: `name,unit,source`, one line per column in order.
    pub fn write_schema(&self, path: &Path) -> Result<(), TableError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "unit", "source"])?;
        for c in &self.columns {
            w.write_record([&c.name, &c.unit, &c.source])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(csv_path: &Path, schema_path: &Path) -> Result<Self, TableError> {
        let parse_err = |path: &Path, message: String| TableError::Parse {
            path: path.display().to_string(),
            message,
        };
        let mut columns = Vec::new();
        let mut rdr = csv::Reader::from_path(schema_path)?;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(parse_err(schema_path, "expected name,unit,source".into()));
            }
            columns.push(ColumnSpec::new(&rec[0], &rec[1], &rec[2]));
        }
        let mut rdr = csv::Reader::from_path(csv_path)?;
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().skip(1).collect();
        if names != columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>() {
            return Err(parse_err(csv_path, "header does not match schema".into()));
        }
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .map(Some)
                            .map_err(|_| parse_err(csv_path, format!("row {}: bad number `{cell}`", i + 1)))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            values.push(row);
        }
        Self::new(ids, columns, values)
    }
}
