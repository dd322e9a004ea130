use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GbtError, Node, NodeKind, TrainMeta, Tree, TreeEnsemble};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "hoodprice-gbt";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum NodeDoc {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        gain: f64,
        cover: f64,
        expected_value: f64,
        left: Box<NodeDoc>,
        right: Box<NodeDoc>,
    },
    Leaf {
        weight: f64,
        cover: f64,
        expected_value: f64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    base_score: f64,
    learning_rate: f64,
    feature_names: Vec<String>,
    feature_gain: Vec<f64>,
    feature_splits: Vec<u64>,
    meta: Option<TrainMeta>,
    trees: Vec<NodeDoc>,
}

fn to_doc(t: &Tree, i: usize) -> NodeDoc {
    let n = &t.nodes[i];
    match n.kind {
        NodeKind::Leaf { weight } => NodeDoc::Leaf {
            weight,
            cover: n.cover,
            expected_value: n.expected_value,
        },
        NodeKind::Split {
            feature,
            threshold,
            default_left,
            gain,
            left,
            right,
        } => NodeDoc::Split {
            feature,
            threshold,
            default_left,
            gain,
            cover: n.cover,
            expected_value: n.expected_value,
            left: Box::new(to_doc(t, left)),
            right: Box::new(to_doc(t, right)),
        },
    }
}

fn from_doc(doc: NodeDoc, n_features: usize, nodes: &mut Vec<Node>) -> Result<usize, GbtError> {
    let id = nodes.len();
    match doc {
        NodeDoc::Leaf {
            weight,
            cover,
            expected_value,
        } => nodes.push(Node {
            kind: NodeKind::Leaf { weight },
            cover,
            expected_value,
        }),
        NodeDoc::Split {
            feature,
            threshold,
            default_left,
            gain,
            cover,
            expected_value,
            left,
            right,
        } => {
            if feature >= n_features {
                return Err(GbtError::Corrupt(format!("split on feature {feature} of {n_features}")));
            }
            nodes.push(Node {
                kind: NodeKind::Leaf { weight: 0.0 },
                cover,
                expected_value,
            });
            let l = from_doc(*left, n_features, nodes)?;
            let r = from_doc(*right, n_features, nodes)?;
            nodes[id].kind = NodeKind::Split {
                feature,
                threshold,
                default_left,
                gain,
                left: l,
                right: r,
            };
        }
    }
    Ok(id)
}

pub fn model_to_json(m: &TreeEnsemble) -> String {
    let (feature_gain, feature_splits) = m.feature_gain();
    let doc = ModelDoc {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        base_score: m.base_score,
        learning_rate: m.learning_rate,
        feature_names: m.feature_names.clone(),
        feature_gain,
        feature_splits,
        meta: m.meta.clone(),
        trees: m.trees.iter().map(|t| to_doc(t, 0)).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<TreeEnsemble, GbtError> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
    }
    let h: Header = serde_json::from_str(text).map_err(|e| GbtError::Corrupt(e.to_string()))?;
    if h.format != FORMAT_NAME {
        return Err(GbtError::Corrupt(format!("unknown format `{}`", h.format)));
    }
    if h.version != FORMAT_VERSION {
        return Err(GbtError::VersionMismatch {
            found: h.version,
            expected: FORMAT_VERSION,
        });
    }
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| GbtError::Corrupt(e.to_string()))?;
    let nf = doc.feature_names.len();
    let mut trees = Vec::with_capacity(doc.trees.len());
    for t in doc.trees {
        let mut nodes = Vec::new();
        from_doc(t, nf, &mut nodes)?;
        trees.push(Tree { nodes });
    }
    Ok(TreeEnsemble {
        base_score: doc.base_score,
        learning_rate: doc.learning_rate,
        feature_names: doc.feature_names,
        trees,
        meta: doc.meta,
    })
}

pub fn save_model(m: &TreeEnsemble, path: &Path) -> Result<(), GbtError> {
    fs::write(path, model_to_json(m))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TreeEnsemble, GbtError> {
    model_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbt::{train, DenseMatrix, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde_json::Value;

    fn model() -> (TreeEnsemble, DenseMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let data: Vec<f64> = (0..n * 4)
            .map(|i| if i % 11 == 0 { f64::NAN } else { rng.random_range(-3.0..3.0) })
            .collect();
        let x = DenseMatrix::new(n, 4, data).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let r = x.row(i);
                r[0].max(0.0) * 3.0 + if r[1].is_nan() { 2.0 } else { r[1].sin() } + rng.random_range(0.0..0.5)
            })
            .collect();
        let cfg = TrainConfig {
            n_estimators: 40,
            learning_rate: 0.3,
            max_depth: 5,
            ..TrainConfig::default()
        };
        let names = (0..4).map(|i| format!("f{i}")).collect();
        (train(&x, &y, &x, &y, names, &cfg).unwrap(), x)
    }

    /// Independent traversal over the serialized document.
    fn oracle_predict(doc: &Value, x: &[f64]) -> f64 {
        let lr = doc["learning_rate"].as_f64().unwrap();
        let mut s = 0.0;
        for t in doc["trees"].as_array().unwrap() {
            let mut n = t;
            while n["type"] == "split" {
                let v = x[n["feature"].as_u64().unwrap() as usize];
                let left = if v.is_nan() {
                    n["default_left"].as_bool().unwrap()
                } else {
                    v < n["threshold"].as_f64().unwrap()
                };
                n = if left { &n["left"] } else { &n["right"] };
            }
            s += n["weight"].as_f64().unwrap();
        }
        doc["base_score"].as_f64().unwrap() + lr * s
    }

    #[test]
    fn predict_matches_document_walker() {
        let (m, _) = model();
        let doc: Value = serde_json::from_str(&model_to_json(&m)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4)
                .map(|_| if rng.random_bool(0.1) { f64::NAN } else { rng.random_range(-4.0..4.0) })
                .collect();
            let p = m.predict(&x).unwrap();
            assert!((p - oracle_predict(&doc, &x)).abs() <= 1e-9 * p.abs().max(1.0));
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, x) = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, m);
        for i in 0..x.n_rows() {
            assert_eq!(back.predict(x.row(i)).unwrap().to_bits(), m.predict(x.row(i)).unwrap().to_bits());
        }
    }

    #[test]
    fn truncated_and_versioned_files_fail() {
        let (m, _) = model();
        let text = model_to_json(&m);
        assert!(matches!(model_from_json(&text[..text.len() / 2]), Err(GbtError::Corrupt(_))));
        let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
        assert!(matches!(model_from_json(&bumped), Err(GbtError::VersionMismatch { found: 99, .. })));
    }

    #[test]
    fn empty_ensemble_round_trips() {
        let m = TreeEnsemble {
            base_score: 42.5,
            learning_rate: 0.001,
            feature_names: vec!["a".into()],
            trees: vec![],
            meta: None,
        };
        let back = model_from_json(&model_to_json(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&[1.0]).unwrap(), 42.5);
    }
}
