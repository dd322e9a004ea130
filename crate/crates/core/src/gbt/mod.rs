//! Second-order gradient boosted regression trees with L1/L2 leaf
//! regularization, exact greedy splits and learned missing-value
//! directions.

mod model_io;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model_io::{load_model, save_model, FORMAT_VERSION};
pub use train::train;

#[derive(Debug, Error)]
pub enum GbtError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("expected {expected} features, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("target {index} is not finite")]
    NonFiniteTarget { index: usize },
    #[error("{0} rows but {1} targets")]
    LengthMismatch(usize, usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub min_child_weight: f64,
    pub max_depth: usize,
    pub n_estimators: usize,
    pub early_stopping_rounds: usize,
    pub gamma: f64,
    /// Defaults to the mean training target.
    pub base_score: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            lambda: 5.0,
            alpha: 1.0,
            min_child_weight: 3.0,
            max_depth: 20,
            n_estimators: 4000,
            early_stopping_rounds: 50,
            gamma: 0.0,
            base_score: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GbtError> {
        let bad = |m: &str| Err(GbtError::Config(m.into()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.alpha >= 0.0) || !(self.gamma >= 0.0) {
            return bad("lambda, alpha and gamma must be non-negative");
        }
        if !(self.min_child_weight >= 0.0) {
            return bad("min_child_weight must be non-negative");
        }
        if self.early_stopping_rounds == 0 {
            return bad("early_stopping_rounds must be at least 1");
        }
        if self.base_score.is_some_and(|b| !b.is_finite()) {
            return bad("base_score must be finite");
        }
        Ok(())
    }
}

pub fn soft_threshold(g: f64, alpha: f64) -> f64 {
    if g > alpha {
        g - alpha
    } else if g < -alpha {
        g + alpha
    } else {
        0.0
    }
}

/// Optimal leaf value: minimizer of `½(H+λ)w² + Gw + α|w|`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    -soft_threshold(g, alpha) / (h + lambda)
}

/// Structure score `T(G,α)²/(H+λ)`, twice the objective reduction of an
/// optimally weighted leaf.
pub fn structure_score(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    let t = soft_threshold(g, alpha);
    t * t / (h + lambda)
}

pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, alpha: f64, gamma: f64) -> f64 {
    0.5 * (structure_score(gl, hl, lambda, alpha) + structure_score(gr, hr, lambda, alpha)
        - structure_score(gl + gr, hl + hr, lambda, alpha))
        - gamma
}

/// Row-major matrix; `NaN` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self, GbtError> {
        if data.len() != n_rows * n_cols {
            return Err(GbtError::Arity {
                expected: n_rows * n_cols,
                got: data.len(),
            });
        }
        Ok(Self { n_rows, n_cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>], n_cols: usize) -> Result<Self, GbtError> {
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(GbtError::Arity {
                    expected: n_cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            n_rows: rows.len(),
            n_cols,
            data,
        })
    }

    /// Selects `cols` from optional-valued rows, mapping `None` to `NaN`.
    pub fn from_options(rows: &[Vec<Option<f64>>], cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows {
            data.extend(cols.iter().map(|&c| r[c].unwrap_or(f64::NAN)));
        }
        Self {
            n_rows: rows.len(),
            n_cols: cols.len(),
            data,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf {
        weight: f64,
    },
    /// `x < threshold` goes left; missing values follow `default_left`.
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        gain: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    /// Sum of training hessians reaching the node.
    pub cover: f64,
    /// Cover-weighted mean leaf weight of the subtree.
    pub expected_value: f64,
}

/// Binary tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(weight: f64, cover: f64) -> Self {
        Self {
            nodes: vec![Node {
                kind: NodeKind::Leaf { weight },
                cover,
                expected_value: weight,
            }],
        }
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i].kind {
                NodeKind::Leaf { .. } => return i,
                NodeKind::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)].kind {
            NodeKind::Leaf { weight } => weight,
            NodeKind::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    /// Depth of the deepest leaf (root-only tree has depth 0).
    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i].kind {
                NodeKind::Leaf { .. } => 0,
                NodeKind::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
    }

    /// Renumbers nodes in pre-order (root, left subtree, right subtree), the
    /// layout produced by deserialization.
    pub fn into_preorder(self) -> Tree {
        fn go(src: &[Node], i: usize, out: &mut Vec<Node>) -> usize {
            let id = out.len();
            out.push(src[i].clone());
            if let NodeKind::Split { left, right, .. } = src[i].kind {
                let l = go(src, left, out);
                let r = go(src, right, out);
                if let NodeKind::Split { left, right, .. } = &mut out[id].kind {
                    *left = l;
                    *right = r;
                }
            }
            id
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        go(&self.nodes, 0, &mut nodes);
        Tree { nodes }
    }

    /// Recomputes expected values bottom-up from leaf weights and covers.
    pub fn fill_expected_values(&mut self) {
        fn go(t: &mut Tree, i: usize) -> f64 {
            let v = match t.nodes[i].kind {
                NodeKind::Leaf { weight } => weight,
                NodeKind::Split { left, right, .. } => {
                    let (el, er) = (go(t, left), go(t, right));
                    let (cl, cr) = (t.nodes[left].cover, t.nodes[right].cover);
                    if cl + cr > 0.0 {
                        (cl * el + cr * er) / (cl + cr)
                    } else {
                        0.5 * (el + er)
                    }
                }
            };
            t.nodes[i].expected_value = v;
            v
        }
        go(self, 0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config: TrainConfig,
    /// Trees kept after truncation.
    pub rounds_used: usize,
    /// Round with the lowest validation MAE; 0 means the base score alone.
    pub best_round: usize,
    pub best_validation_mae: f64,
    /// Validation MAE after 0, 1, 2, ... trees.
    pub validation_mae: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    pub base_score: f64,
    pub learning_rate: f64,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
    pub meta: Option<TrainMeta>,
}

impl TreeEnsemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn check_arity(&self, x: &[f64]) -> Result<(), GbtError> {
        if x.len() != self.n_features() {
            return Err(GbtError::Arity {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `base_score + learning_rate × Σ tree outputs`; `NaN` marks missing.
    pub fn predict(&self, x: &[f64]) -> Result<f64, GbtError> {
        self.check_arity(x)?;
        let s: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(self.base_score + self.learning_rate * s)
    }

    pub fn predict_matrix(&self, m: &DenseMatrix) -> Result<Vec<f64>, GbtError> {
        use rayon::prelude::*;
        if m.n_cols() != self.n_features() {
            return Err(GbtError::Arity {
                expected: self.n_features(),
                got: m.n_cols(),
            });
        }
        (0..m.n_rows()).into_par_iter().map(|i| self.predict(m.row(i))).collect()
    }

    /// Total split gain and split count per feature over all trees.
    pub fn feature_gain(&self) -> (Vec<f64>, Vec<u64>) {
        let mut gain = vec![0.0; self.n_features()];
        let mut count = vec![0u64; self.n_features()];
        for t in &self.trees {
            for n in &t.nodes {
                if let NodeKind::Split { feature, gain: g, .. } = n.kind {
                    gain[feature] += g;
                    count[feature] += 1;
                }
            }
        }
        (gain, count)
    }

    /// One ensemble predicting the mean of `models`. All members must share
    /// feature names and learning rate; the trees are pooled and the
    /// learning rate divided by the member count.
    pub fn average(models: &[TreeEnsemble]) -> Result<TreeEnsemble, GbtError> {
        let first = models.first().ok_or(GbtError::EmptyTrainingSet)?;
        for m in &models[1..] {
            if m.feature_names != first.feature_names || m.learning_rate != first.learning_rate {
                return Err(GbtError::Config("averaged models differ in features or learning rate".into()));
            }
        }
        let n = models.len() as f64;
        Ok(TreeEnsemble {
            base_score: models.iter().map(|m| m.base_score).sum::<f64>() / n,
            learning_rate: first.learning_rate / n,
            feature_names: first.feature_names.clone(),
            trees: models.iter().flat_map(|m| m.trees.iter().cloned()).collect(),
            meta: None,
        })
    }
}
