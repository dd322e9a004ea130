//! Spatial contiguity of census blocks and egohood aggregation.

mod design;

use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{LonLat, PointGrid};
use crate::table::{FeatureTable, TableError};

pub use design::{
    assemble_design_matrix, DesignColumn, DesignError, DesignMatrix, EncodedColumn, FeatureGroup, PropertyEncoder,
};

/// Radius of the circular buffer defining an egohood.
pub const EGOHOOD_RADIUS_M: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum EgohoodError {
    #[error("contiguity matrix has {matrix} rows but the feature table has {table}")]
    DimensionMismatch { matrix: usize, table: usize },
    #[error("egohood aggregation expects a row-normalized matrix")]
    NotNormalized,
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Sparse n×n block adjacency in row-compressed form with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ContiguityMatrix {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    row_normalized: bool,
    isolated: Vec<bool>,
}

impl ContiguityMatrix {
    /// Binary matrix: `W_ij = 1` iff `i != j` and the great-circle distance
    /// between centroids is strictly below `radius_m`.
    pub fn build(centroids: &[LonLat], radius_m: f64) -> Self {
        let grid = PointGrid::new(centroids.to_vec(), radius_m.max(1.0));
        let rows: Vec<Vec<usize>> = (0..centroids.len())
            .into_par_iter()
            .map(|i| grid.within(centroids[i], radius_m).into_iter().filter(|&j| j != i).collect())
            .collect();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut cols = Vec::new();
        for r in &rows {
            cols.extend_from_slice(r);
            offsets.push(cols.len());
        }
        let isolated = rows.iter().map(Vec::is_empty).collect();
        Self {
            n: centroids.len(),
            offsets,
            vals: vec![1.0; cols.len()],
            cols,
            row_normalized: false,
            isolated,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_row_normalized(&self) -> bool {
        self.row_normalized
    }

    pub fn is_isolated(&self, i: usize) -> bool {
        self.isolated[i]
    }

    pub fn isolated_count(&self) -> usize {
        self.isolated.iter().filter(|&&b| b).count()
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Column indices (ascending) and weights of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// Divides each non-empty row by its degree; empty rows stay zero and
    /// keep their isolated flag.
    pub fn row_normalize(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            let d = self.degree(i);
            if d > 0 {
                let w = 1.0 / d as f64;
                for v in &mut out.vals[self.offsets[i]..self.offsets[i + 1]] {
                    *v = w;
                }
            }
        }
        out.row_normalized = true;
        out
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).1.iter().sum()
    }
}

/// Egohood aggregates: row `i` is the weighted mean of its neighbors' rows
/// of `f`. Missing neighbor values are skipped and the remaining weights
/// renormalized; isolated blocks copy their own row.
pub fn egohood_features(wn: &ContiguityMatrix, f: &FeatureTable) -> Result<FeatureTable, EgohoodError> {
    if !wn.is_row_normalized() {
        return Err(EgohoodError::NotNormalized);
    }
    if wn.n() != f.n_rows() {
        return Err(EgohoodError::DimensionMismatch {
            matrix: wn.n(),
            table: f.n_rows(),
        });
    }
    let rows: Vec<Vec<Option<f64>>> = (0..wn.n())
        .into_par_iter()
        .map(|i| {
            if wn.is_isolated(i) {
                return f.row(i).to_vec();
            }
            let (cols, vals) = wn.row(i);
            (0..f.n_cols())
                .map(|c| {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for (&j, &w) in cols.iter().zip(vals) {
                        if let Some(x) = f.row(j)[c] {
                            num += w * x;
                            den += w;
                        }
                    }
                    (den > 0.0).then(|| num / den)
                })
                .collect()
        })
        .collect();
    Ok(FeatureTable::new(f.block_ids().to_vec(), f.columns().to_vec(), rows)?)
}
