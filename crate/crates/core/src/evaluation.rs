//! Error metrics, per-prediction contribution decomposition and feature
//! importance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::gbt::{GbtError, NodeKind, TreeEnsemble};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric of an empty set")]
    Empty,
    #[error("percentage error undefined for a zero target (pair {0})")]
    ZeroTarget(usize),
    #[error("missing rotation {0}")]
    MissingRotation(usize),
    #[error(transparent)]
    Model(#[from] GbtError),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Mean absolute error over `(y, prediction)` pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(pairs.iter().map(|(y, x)| (y - x).abs()).sum::<f64>() / pairs.len() as f64)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median absolute percentage error, in percent.
pub fn mdape(pairs: &[(f64, f64)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut p = Vec::with_capacity(pairs.len());
    for (i, (y, x)) in pairs.iter().enumerate() {
        if *y == 0.0 {
            return Err(EvalError::ZeroTarget(i));
        }
        p.push((y - x).abs() / y.abs());
    }
    Ok(median(p) * 100.0)
}

/// A prediction split into bias plus one signed term per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionReport {
    pub listing_id: String,
    pub bias: f64,
    /// One entry per model feature, in model order.
    pub contributions: Vec<(String, f64)>,
    pub prediction: f64,
}

impl ContributionReport {
    pub fn total(&self) -> f64 {
        self.bias + self.contributions.iter().map(|(_, c)| c).sum::<f64>()
    }

    /// Largest positive contributions, descending.
    pub fn top_positive(&self, k: usize) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self
            .contributions
            .iter()
            .filter(|(_, c)| *c > 0.0)
            .map(|(n, c)| (n.as_str(), *c))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v.truncate(k);
        v
    }

    /// Most negative contributions, ascending.
    pub fn top_negative(&self, k: usize) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self
            .contributions
            .iter()
            .filter(|(_, c)| *c < 0.0)
            .map(|(n, c)| (n.as_str(), *c))
            .collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        v.truncate(k);
        v
    }
}

/// Per-path attribution: each split on the decision path credits its
/// feature with the change in subtree expected value; bias collects the
/// root expectations. Scaled like [`TreeEnsemble::predict`], so bias plus
/// contributions reproduces the prediction.
pub fn path_contributions(model: &TreeEnsemble, listing_id: &str, x: &[f64]) -> Result<ContributionReport, EvalError> {
    let prediction = model.predict(x)?;
    let mut contrib = vec![0.0; model.n_features()];
    let mut root_sum = 0.0;
    for t in &model.trees {
        let mut i = 0;
        root_sum += t.nodes[0].expected_value;
        while let NodeKind::Split {
            feature,
            threshold,
            default_left,
            left,
            right,
            ..
        } = t.nodes[i].kind
        {
            let v = x[feature];
            let next = if (v.is_nan() && default_left) || v < threshold { left } else { right };
            contrib[feature] += t.nodes[next].expected_value - t.nodes[i].expected_value;
            i = next;
        }
    }
    let lr = model.learning_rate;
    Ok(ContributionReport {
        listing_id: listing_id.to_string(),
        bias: model.base_score + lr * root_sum,
        contributions: model
            .feature_names
            .iter()
            .cloned()
            .zip(contrib.into_iter().map(|c| lr * c))
            .collect(),
        prediction,
    })
}

/// Fixed-width text report: prediction, bias and the strongest terms in
/// each direction.
pub fn format_explanation(r: &ContributionReport, k: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "listing {}", r.listing_id);
    let _ = writeln!(s, "predicted price   {:>14.2}", r.prediction);
    let _ = writeln!(s, "bias              {:>14.2}", r.bias);
    let _ = writeln!(s, "\nraising the price:");
    for (n, c) in r.top_positive(k) {
        let _ = writeln!(s, "  {:+14.2}  {n}", c);
    }
    let _ = writeln!(s, "\nlowering the price:");
    for (n, c) in r.top_negative(k) {
        let _ = writeln!(s, "  {:+14.2}  {n}", c);
    }
    let rest: f64 = r.total() - r.bias
        - r.top_positive(k).iter().map(|x| x.1).sum::<f64>()
        - r.top_negative(k).iter().map(|x| x.1).sum::<f64>();
    let _ = writeln!(s, "\nother features    {:>+14.2}", rest);
    let _ = writeln!(s, "bias + contributions = {:.2}", r.total());
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRow {
    pub feature: String,
    pub gain: f64,
    pub splits: u64,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    /// Sorted by gain descending, then name.
    pub rows: Vec<ImportanceRow>,
    /// Group gain shares; empty when the model has no splits.
    pub group_shares: BTreeMap<String, f64>,
}

/// Default grouping: the `group:` prefix of a design-matrix column name.
pub fn group_by_prefix(feature: &str) -> String {
    feature.split_once(':').map(|(g, _)| g.to_string()).unwrap_or_else(|| "ungrouped".into())
}

pub fn feature_importance(model: &TreeEnsemble, grouping: &dyn Fn(&str) -> String) -> ImportanceTable {
    let (gain, splits) = model.feature_gain();
    let mut rows: Vec<ImportanceRow> = model
        .feature_names
        .iter()
        .enumerate()
        .map(|(i, f)| ImportanceRow {
            feature: f.clone(),
            gain: gain[i],
            splits: splits[i],
            group: grouping(f),
        })
        .collect();
    rows.sort_by(|a, b| b.gain.total_cmp(&a.gain).then_with(|| a.feature.cmp(&b.feature)));
    let mut group_shares: BTreeMap<String, f64> = BTreeMap::new();
    for r in &rows {
        *group_shares.entry(r.group.clone()).or_default() += r.gain;
    }
    let total: f64 = group_shares.values().sum();
    if total > 0.0 {
        for v in group_shares.values_mut() {
            *v /= total;
        }
    } else {
        group_shares.clear();
    }
    ImportanceTable { rows, group_shares }
}

/// Mean absolute contribution per group over `rows`, normalized to shares.
pub fn contribution_shares(
    model: &TreeEnsemble,
    rows: &[Vec<f64>],
    grouping: &dyn Fn(&str) -> String,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut acc: BTreeMap<String, f64> = BTreeMap::new();
    for x in rows {
        let r = path_contributions(model, "", x)?;
        for (f, c) in &r.contributions {
            *acc.entry(grouping(f)).or_default() += c.abs();
        }
    }
    let total: f64 = acc.values().sum();
    if total > 0.0 {
        for v in acc.values_mut() {
            *v /= total;
        }
    }
    Ok(acc)
}

pub fn write_importance_csv(t: &ImportanceTable, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature", "gain", "splits", "group"])?;
    for r in &t.rows {
        w.write_record([r.feature.clone(), r.gain.to_string(), r.splits.to_string(), r.group.clone()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_contributions_csv(reports: &[ContributionReport], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "feature", "value"])?;
    for r in reports {
        w.write_record([r.listing_id.as_str(), "bias", &r.bias.to_string()])?;
        for (f, c) in &r.contributions {
            if *c != 0.0 {
                w.write_record([r.listing_id.as_str(), f.as_str(), &c.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One holdout prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub rotation: usize,
    pub y: f64,
    pub prediction: f64,
}

pub fn write_predictions_csv(preds: &[Prediction], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "y", "prediction", "rotation"])?;
    for p in preds {
        w.write_record([p.id.clone(), p.y.to_string(), p.prediction.to_string(), p.rotation.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64, EvalError> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| EvalError::Parse(format!("{}: row {}: bad number", path.display(), i + 1)))
        };
        out.push(Prediction {
            id: rec[0].to_string(),
            y: num(1)?,
            prediction: num(2)?,
            rotation: num(3)? as usize,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub n: usize,
    pub mae: f64,
    pub mdape: f64,
}

impl MetricRow {
    pub fn of(pairs: &[(f64, f64)]) -> Result<Self, EvalError> {
        Ok(Self {
            n: pairs.len(),
            mae: mae(pairs)?,
            mdape: mdape(pairs)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub variant: String,
    pub per_rotation: Vec<MetricRow>,
    pub pooled: MetricRow,
}

/// Per-rotation and pooled holdout metrics; every rotation `0..k` must
/// contribute predictions.
pub fn evaluate_run(variant: &str, preds: &[Prediction], k: usize) -> Result<RunReport, EvalError> {
    let mut by_rot: Vec<Vec<(f64, f64)>> = vec![Vec::new(); k];
    for p in preds {
        if p.rotation < k {
            by_rot[p.rotation].push((p.y, p.prediction));
        }
    }
    let mut per_rotation = Vec::with_capacity(k);
    for (i, pairs) in by_rot.iter().enumerate() {
        if pairs.is_empty() {
            return Err(EvalError::MissingRotation(i));
        }
        per_rotation.push(MetricRow::of(pairs)?);
    }
    let pooled: Vec<(f64, f64)> = by_rot.into_iter().flatten().collect();
    Ok(RunReport {
        variant: variant.to_string(),
        per_rotation,
        pooled: MetricRow::of(&pooled)?,
    })
}

/// Comparison table, one row per variant, in the given order.
pub fn format_comparison(reports: &[RunReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<34} {:>8} {:>16} {:>10}", "model", "n", "MAE", "MdAPE (%)");
    for r in reports {
        let label = match r.variant.as_str() {
            "property" => "Property",
            "full" => "Property + Neighborhood",
            "open" => "Property + Neighborhood (Open)",
            other => other,
        };
        let _ = writeln!(s, "{:<34} {:>8} {:>16.2} {:>10.2}", label, r.pooled.n, r.pooled.mae, r.pooled.mdape);
    }
    let _ = writeln!(s);
    for r in reports {
        let _ = writeln!(s, "{}:", r.variant);
        for (i, m) in r.per_rotation.iter().enumerate() {
            let _ = writeln!(s, "  rotation {i}: n {:>6}  MAE {:>14.2}  MdAPE {:>7.2}", m.n, m.mae, m.mdape);
        }
    }
    s
}
