use rayon::prelude::*;

use super::{leaf_weight, split_gain, DenseMatrix, GbtError, Node, NodeKind, TrainConfig, TrainMeta, Tree, TreeEnsemble};

const NONE: u32 = u32::MAX;

/// Per-feature row orders, computed once per training run.
struct Presorted {
    sorted: Vec<Vec<u32>>,
    missing: Vec<Vec<u32>>,
}

impl Presorted {
    fn new(x: &DenseMatrix) -> Self {
        let (sorted, missing) = (0..x.n_cols())
            .into_par_iter()
            .map(|f| {
                let mut present: Vec<u32> = Vec::with_capacity(x.n_rows());
                let mut missing = Vec::new();
                for r in 0..x.n_rows() {
                    if x.get(r, f).is_nan() {
                        missing.push(r as u32);
                    } else {
                        present.push(r as u32);
                    }
                }
                present.sort_by(|&a, &b| x.get(a as usize, f).total_cmp(&x.get(b as usize, f)).then(a.cmp(&b)));
                (present, missing)
            })
            .unzip();
        Self { sorted, missing }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    threshold: f64,
    default_left: bool,
    /// Left-child statistics, missing rows included when routed left.
    gl: f64,
    hl: f64,
}

/// Threshold strictly above `lo` and at most `hi`, so `x < t` separates them.
fn threshold_between(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo && mid <= hi {
        mid
    } else {
        hi
    }
}

struct Builder<'a> {
    x: &'a DenseMatrix,
    pre: &'a Presorted,
    grad: &'a [f64],
    hess: &'a [f64],
    cfg: &'a TrainConfig,
}

impl Builder<'_> {
    /// Best split of every active node on feature `f`. Candidates are
    /// visited in ascending threshold, missing-left before missing-right,
    /// and only a strictly better gain replaces the incumbent.
    fn scan_feature(&self, f: usize, pos: &[u32], slot_of: &[u32], stats: &[(f64, f64)]) -> Vec<Option<Candidate>> {
        let m = stats.len();
        let mut mg = vec![0.0; m];
        let mut mh = vec![0.0; m];
        for &r in &self.pre.missing[f] {
            let n = pos[r as usize];
            if n != NONE {
                let s = slot_of[n as usize] as usize;
                mg[s] += self.grad[r as usize];
                mh[s] += self.hess[r as usize];
            }
        }
        let mut acc_g = vec![0.0; m];
        let mut acc_h = vec![0.0; m];
        let mut last = vec![f64::NAN; m];
        let mut best: Vec<Option<Candidate>> = vec![None; m];
        let c = self.cfg;
        for &r in &self.pre.sorted[f] {
            let n = pos[r as usize];
            if n == NONE {
                continue;
            }
            let s = slot_of[n as usize] as usize;
            let v = self.x.get(r as usize, f);
            if v > last[s] {
                let (g, h) = stats[s];
                for default_left in [true, false] {
                    let (gl, hl) = if default_left {
                        (acc_g[s] + mg[s], acc_h[s] + mh[s])
                    } else {
                        (acc_g[s], acc_h[s])
                    };
                    let (gr, hr) = (g - gl, h - hl);
                    if hl < c.min_child_weight || hr < c.min_child_weight {
                        continue;
                    }
                    let gain = split_gain(gl, hl, gr, hr, c.lambda, c.alpha, c.gamma);
                    if gain > 0.0 && best[s].is_none_or(|b| gain > b.gain) {
                        best[s] = Some(Candidate {
                            gain,
                            threshold: threshold_between(last[s], v),
                            default_left,
                            gl,
                            hl,
                        });
                    }
                }
            }
            acc_g[s] += self.grad[r as usize];
            acc_h[s] += self.hess[r as usize];
            last[s] = v;
        }
        best
    }

    /// Grows one tree level by level.
    fn build(&self) -> Tree {
        let n = self.x.n_rows();
        let mut pos = vec![0u32; n];
        let root = (self.grad.iter().sum::<f64>(), self.hess.iter().sum::<f64>());
        let mut nodes = vec![Node {
            kind: NodeKind::Leaf { weight: 0.0 },
            cover: root.1,
            expected_value: 0.0,
        }];
        let mut stats_of = vec![root];
        let mut active = vec![0usize];
        let mut depth = 0;
        while !active.is_empty() {
            let mut splits: Vec<Option<(usize, Candidate)>> = vec![None; active.len()];
            if depth < self.cfg.max_depth {
                let mut slot_of = vec![NONE; nodes.len()];
                for (s, &id) in active.iter().enumerate() {
                    slot_of[id] = s as u32;
                }
                let stats: Vec<(f64, f64)> = active.iter().map(|&id| stats_of[id]).collect();
                let per_feature: Vec<Vec<Option<Candidate>>> = (0..self.x.n_cols())
                    .into_par_iter()
                    .map(|f| self.scan_feature(f, &pos, &slot_of, &stats))
                    .collect();
                for (f, cands) in per_feature.into_iter().enumerate() {
                    for (s, c) in cands.into_iter().enumerate() {
                        if let Some(c) = c {
                            if splits[s].is_none_or(|(_, b)| c.gain > b.gain) {
                                splits[s] = Some((f, c));
                            }
                        }
                    }
                }
            }
            let mut route: Vec<Option<(usize, f64, bool, u32, u32)>> = vec![None; nodes.len()];
            let mut next = Vec::new();
            for (s, &id) in active.iter().enumerate() {
                let (g, h) = stats_of[id];
                match splits[s] {
                    None => {
                        nodes[id].kind = NodeKind::Leaf {
                            weight: leaf_weight(g, h, self.cfg.lambda, self.cfg.alpha),
                        };
                    }
                    Some((f, c)) => {
                        let (l, r) = (nodes.len(), nodes.len() + 1);
                        for (cover, st) in [(c.hl, (c.gl, c.hl)), (h - c.hl, (g - c.gl, h - c.hl))] {
                            nodes.push(Node {
                                kind: NodeKind::Leaf { weight: 0.0 },
                                cover,
                                expected_value: 0.0,
                            });
                            stats_of.push(st);
                        }
                        nodes[id].kind = NodeKind::Split {
                            feature: f,
                            threshold: c.threshold,
                            default_left: c.default_left,
                            gain: c.gain,
                            left: l,
                            right: r,
                        };
                        route[id] = Some((f, c.threshold, c.default_left, l as u32, r as u32));
                        next.push(l);
                        next.push(r);
                    }
                }
            }
            for (r, p) in pos.iter_mut().enumerate() {
                if *p == NONE {
                    continue;
                }
                *p = match route[*p as usize] {
                    None => NONE,
                    Some((f, t, dl, l, rt)) => {
                        let v = self.x.get(r, f);
                        let left = if v.is_nan() { dl } else { v < t };
                        if left {
                            l
                        } else {
                            rt
                        }
                    }
                };
            }
            active = next;
            depth += 1;
        }
        let mut tree = Tree { nodes };
        tree.fill_expected_values();
        tree.into_preorder()
    }
}

fn mae(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / y.len() as f64
}

/// Squared-error boosting with early stopping on validation MAE. The
/// returned ensemble is truncated to the first round with the lowest
/// validation MAE (round 0 being the base score alone).
pub fn train(
    x: &DenseMatrix,
    y: &[f64],
    x_val: &DenseMatrix,
    y_val: &[f64],
    feature_names: Vec<String>,
    cfg: &TrainConfig,
) -> Result<TreeEnsemble, GbtError> {
    cfg.validate()?;
    if x.n_rows() == 0 {
        return Err(GbtError::EmptyTrainingSet);
    }
    if x_val.n_rows() == 0 {
        return Err(GbtError::EmptyValidationSet);
    }
    if x.n_rows() != y.len() {
        return Err(GbtError::LengthMismatch(x.n_rows(), y.len()));
    }
    if x_val.n_rows() != y_val.len() {
        return Err(GbtError::LengthMismatch(x_val.n_rows(), y_val.len()));
    }
    for m in [x, x_val] {
        if m.n_cols() != feature_names.len() {
            return Err(GbtError::Arity {
                expected: feature_names.len(),
                got: m.n_cols(),
            });
        }
    }
    if let Some(i) = y.iter().chain(y_val).position(|v| !v.is_finite()) {
        return Err(GbtError::NonFiniteTarget { index: i });
    }
    let base = cfg.base_score.unwrap_or_else(|| y.iter().sum::<f64>() / y.len() as f64);
    let mut pred = vec![base; y.len()];
    let mut pred_val = vec![base; y_val.len()];
    let mut history = vec![mae(&pred_val, y_val)];
    let mut best = (0usize, history[0]);
    let mut trees: Vec<Tree> = Vec::new();
    let constant = y.iter().all(|v| *v == y[0]);

    if !constant {
        let pre = Presorted::new(x);
        let hess = vec![1.0; y.len()];
        let mut grad = vec![0.0; y.len()];
        for round in 1..=cfg.n_estimators {
            for i in 0..y.len() {
                grad[i] = pred[i] - y[i];
            }
            let tree = Builder {
                x,
                pre: &pre,
                grad: &grad,
                hess: &hess,
                cfg,
            }
            .build();
            if tree.nodes.len() == 1 && tree.predict(&[]) == 0.0 {
                log::debug!("round {round}: no further progress possible");
                break;
            }
            for (i, p) in pred.iter_mut().enumerate() {
                *p += cfg.learning_rate * tree.predict(x.row(i));
            }
            for (i, p) in pred_val.iter_mut().enumerate() {
                *p += cfg.learning_rate * tree.predict(x_val.row(i));
            }
            let v = mae(&pred_val, y_val);
            history.push(v);
            trees.push(tree);
            if v < best.1 {
                best = (round, v);
            } else if round - best.0 >= cfg.early_stopping_rounds {
                log::debug!("early stop at round {round}; best round {}", best.0);
                break;
            }
        }
    }
    trees.truncate(best.0);
    log::info!(
        "trained {} trees; best validation MAE {:.4} at round {}",
        trees.len(),
        best.1,
        best.0
    );
    Ok(TreeEnsemble {
        base_score: base,
        learning_rate: cfg.learning_rate,
        feature_names,
        meta: Some(TrainMeta {
            config: cfg.clone(),
            rounds_used: trees.len(),
            best_round: best.0,
            best_validation_mae: best.1,
            validation_mae: history,
        }),
        trees,
    })
}
