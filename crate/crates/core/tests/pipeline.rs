use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use hoodprice::egohood::{DesignMatrix, FeatureGroup};
use hoodprice::evaluation::{mae, mdape, read_predictions_csv};
use hoodprice::gbt::load_model;
use hoodprice::geomodel::{load_dataset, read_listings, write_listings};
use hoodprice::pipeline::{self, oracle_price, Oracle, PipelineError, RunConfig, StagePaths, Variant};

fn config(out: &Path, settings: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out = out.to_path_buf();
    let base = [
        ("seed", "5"),
        ("synth_blocks", "900"),
        ("synth_listings", "2500"),
        ("learning_rate", "0.2"),
        ("n_estimators", "40"),
        ("max_depth", "4"),
        ("early_stopping_rounds", "10"),
    ];
    for (k, v) in base.iter().chain(settings) {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn data_stages(cfg: &RunConfig) -> pipeline::SynthCity {
    let city = pipeline::run_synth(cfg).unwrap();
    pipeline::run_ingest(cfg).unwrap();
    pipeline::run_features(cfg).unwrap();
    pipeline::run_egohood(cfg).unwrap();
    city
}

fn design(cfg: &RunConfig) -> DesignMatrix {
    let sp = StagePaths::new(&cfg.out);
    DesignMatrix::read_csv(&sp.design(), &sp.targets()).unwrap()
}

#[test]
fn noise_free_city_closes_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("synth_noise", "0")]);
    let city = data_stages(&cfg);

    // Layers written by synth read back as generated.
    let data = load_dataset(&cfg.layer_paths()).unwrap();
    assert_eq!(data.blocks, city.dataset.blocks);
    assert_eq!(data.listings, city.dataset.listings);
    assert_eq!(data.amenities, city.dataset.amenities);
    assert_eq!(data.landuse, city.dataset.landuse);
    assert_eq!(data.security, city.dataset.security);
    assert_eq!(data.roads, city.dataset.roads);

    let d = design(&cfg);
    assert_eq!(d.n_rows(), city.dataset.listings.len());
    // Neighborhood columns equal the generator's own F and E tables.
    for (i, b) in d.block_ids.iter().enumerate() {
        for (c, col) in d.columns.iter().enumerate() {
            let table = match col.group {
                FeatureGroup::Property => continue,
                FeatureGroup::EgoPlace => &city.features,
                FeatureGroup::Egohood => &city.egohood,
            };
            assert_eq!(d.rows[i][c], table.get(b, &col.name), "{} {}", d.ids[i], col.header());
        }
    }

    // Design values alone reproduce every price exactly.
    let text = fs::read_to_string(cfg.data_dir().join("oracle.json")).unwrap();
    let oracle: Oracle = serde_json::from_str(&text).unwrap();
    assert_eq!(oracle.neighborhood_variance_share, city.oracle.neighborhood_variance_share);
    let listings: BTreeMap<String, _> = read_listings(&StagePaths::new(&cfg.out).ingest_listings())
        .unwrap()
        .into_iter()
        .map(|l| (l.id.clone(), l))
        .collect();
    for i in 0..d.n_rows() {
        let lookup = |h: &str| d.column_index(h).and_then(|c| d.rows[i][c]);
        let p = oracle_price(&oracle, &listings[&d.ids[i]], lookup).unwrap();
        assert_eq!(Some(p), d.targets[i], "{}", d.ids[i]);
    }
}

#[test]
fn downstream_stages_refuse_stale_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("synth_blocks", "200"), ("synth_listings", "300")]);
    pipeline::run_synth(&cfg).unwrap();
    pipeline::run_ingest(&cfg).unwrap();

    let e = pipeline::run_egohood(&cfg).unwrap_err();
    assert!(e.to_string().contains("rerun `features`"), "{e}");

    pipeline::run_features(&cfg).unwrap();
    pipeline::run_egohood(&cfg).unwrap();
    let e = pipeline::run_train(&cfg, Variant::Full).unwrap_err();
    assert!(e.to_string().contains("rerun `folds`"), "{e}");

    let sp = StagePaths::new(&cfg.out);
    let mut text = fs::read_to_string(sp.features()).unwrap();
    text.push('\n');
    fs::write(sp.features(), text).unwrap();
    let e = pipeline::run_egohood(&cfg).unwrap_err();
    assert!(matches!(e, PipelineError::Stale { .. }));
    assert!(e.to_string().ends_with("rerun `features`"), "{e}");

    // Editing a raw layer invalidates everything derived from it.
    pipeline::run_features(&cfg).unwrap();
    let mut blocks = fs::read_to_string(&cfg.layer_paths().blocks).unwrap();
    blocks.push(' ');
    fs::write(&cfg.layer_paths().blocks, blocks).unwrap();
    let e = pipeline::run_egohood(&cfg).unwrap_err();
    assert!(matches!(e, PipelineError::Stale { .. }), "{e}");
}

#[test]
fn variants_share_rows_and_evaluation_matches_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("synth_unpriced_fraction", "0.1")]);
    data_stages(&cfg);
    pipeline::run_folds(&cfg).unwrap();
    let sp = StagePaths::new(&cfg.out);
    let d = design(&cfg);
    for v in Variant::ALL {
        pipeline::run_train(&cfg, v).unwrap();
    }

    let key = |v: Variant| {
        let mut p: Vec<(String, usize, u64)> = read_predictions_csv(&sp.predictions(v))
            .unwrap()
            .into_iter()
            .map(|p| (p.id, p.rotation, p.y.to_bits()))
            .collect();
        p.sort();
        p
    };
    assert!(!key(Variant::Full).is_empty());
    assert_eq!(key(Variant::Property), key(Variant::Full));
    assert_eq!(key(Variant::Open), key(Variant::Full));

    let names = |v: Variant| load_model(&sp.model(v)).unwrap().feature_names;
    let groups: BTreeSet<String> = names(Variant::Property)
        .iter()
        .map(|n| n.split(':').next().unwrap().to_string())
        .collect();
    assert_eq!(groups, BTreeSet::from(["property".to_string()]));
    assert_eq!(names(Variant::Full).len(), d.columns.len());
    let open = names(Variant::Open);
    assert!(open.len() < d.columns.len());
    assert!(!open.iter().any(|n| n.ends_with(":security_mean") || n.ends_with(":property_taxes")));

    let reports = pipeline::run_evaluate(&cfg).unwrap();
    assert_eq!(reports.len(), 3);
    for (r, shares) in &reports {
        let v: Variant = r.variant.parse().unwrap();
        let pairs: Vec<(f64, f64)> = read_predictions_csv(&sp.predictions(v))
            .unwrap()
            .into_iter()
            .map(|p| (p.y, p.prediction))
            .collect();
        assert_eq!(r.pooled.n, pairs.len());
        assert!((r.pooled.mae - mae(&pairs).unwrap()).abs() <= 1e-9 * r.pooled.mae.max(1.0));
        assert!((r.pooled.mdape - mdape(&pairs).unwrap()).abs() <= 1e-9);
        let total: f64 = shares.iter().map(|s| s.1).sum();
        assert!((total - 1.0).abs() <= 1e-9, "{} gain shares sum to {total}", r.variant);
    }
    let report = fs::read_to_string(sp.report()).unwrap();
    assert!(report.contains("Property + Neighborhood (Open)"));
}

#[test]
fn nowcast_and_explain_use_the_averaged_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("synth_unpriced_fraction", "0.1")]);
    let city = data_stages(&cfg);
    pipeline::run_folds(&cfg).unwrap();
    pipeline::run_train(&cfg, Variant::Full).unwrap();
    let sp = StagePaths::new(&cfg.out);
    let d = design(&cfg);
    let model = load_model(&sp.model(Variant::Full)).unwrap();
    let x_of = |i: usize| -> Vec<f64> {
        model
            .feature_names
            .iter()
            .map(|f| d.rows[i][d.column_index(f).unwrap()].unwrap_or(f64::NAN))
            .collect()
    };

    pipeline::run_nowcast(&cfg, Variant::Full, None).unwrap();
    let mut r = csv::Reader::from_path(sp.nowcast(Variant::Full)).unwrap();
    let rows: Vec<(String, f64)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[2].parse().unwrap())
        })
        .collect();
    let unpriced: Vec<usize> = (0..d.n_rows()).filter(|&i| d.targets[i].is_none()).collect();
    assert!(!unpriced.is_empty());
    assert_eq!(rows.len(), unpriced.len());
    for ((id, p), &i) in rows.iter().zip(&unpriced) {
        assert_eq!(id, &d.ids[i]);
        assert_eq!(*p, model.predict(&x_of(i)).unwrap());
    }

    // A fresh listings file goes through assignment and encoding.
    let mut fresh: Vec<_> = city.dataset.listings.iter().take(20).cloned().collect();
    for l in &mut fresh {
        l.asked_price = None;
        l.id = format!("N{}", l.id);
    }
    let mut outside = fresh[0].clone();
    outside.id = "N-outside".into();
    outside.location = Some(hoodprice::geo::LonLat::new(0.0, 0.0));
    fresh.push(outside);
    let input = dir.path().join("new.csv");
    write_listings(&input, &fresh).unwrap();
    pipeline::run_nowcast(&cfg, Variant::Full, Some(&input)).unwrap();
    let text = fs::read_to_string(sp.nowcast(Variant::Full)).unwrap();
    assert_eq!(text.lines().count(), 22);
    assert!(text.lines().any(|l| l == "N-outside,,"));
    let index = d.row_index();
    for line in text.lines().skip(1).filter(|l| !l.starts_with("N-outside")) {
        let cells: Vec<&str> = line.split(',').collect();
        let i = index[&cells[0][1..]];
        assert_eq!(cells[2].parse::<f64>().unwrap(), model.predict(&x_of(i)).unwrap(), "{line}");
    }

    let id = d.ids[unpriced[0]].clone();
    let rep = pipeline::run_explain(&cfg, Variant::Full, &id).unwrap();
    let pred = model.predict(&x_of(unpriced[0])).unwrap();
    assert_eq!(rep.prediction, pred);
    assert!((rep.total() - pred).abs() <= 1e-6 * pred.abs().max(1.0));
    let txt = fs::read_to_string(sp.explanation(Variant::Full, &id)).unwrap();
    assert!(txt.contains(&id));
    assert!(sp.explanation_csv(Variant::Full, &id).exists());
    assert!(pipeline::run_explain(&cfg, Variant::Full, "missing").is_err());
}
