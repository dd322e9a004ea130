use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::manifest::Manifest;
use super::synth::{synth_city, SynthCity};
use super::{PipelineError, RunConfig, Variant};
use crate::egohood::{
    assemble_design_matrix, egohood_features, ContiguityMatrix, DesignMatrix, FeatureGroup, PropertyEncoder,
};
use crate::evaluation::{
    contribution_shares, evaluate_run, feature_importance, format_comparison, format_explanation, group_by_prefix,
    path_contributions, read_predictions_csv, write_contributions_csv, write_importance_csv, write_predictions_csv,
    ContributionReport, Prediction, RunReport,
};
use crate::features::compute_features;
use crate::gbt::{load_model, save_model, train, DenseMatrix, TreeEnsemble};
use crate::geo::LonLat;
use crate::geomodel::{
    filter_listings, load_dataset, read_blocks, read_listings, write_amenities, write_blocks, write_landuse,
    write_listings, write_roads, write_security, BlockIndex, Listing,
};
use crate::spatialcv::{assign_folds, enforce_constraints, read_folds_csv, tile_blocks, verify_folds, write_folds_csv, Role};
use crate::table::FeatureTable;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct StagePaths {
    pub out: PathBuf,
}

impl StagePaths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }
    fn at(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
    pub fn ingest_listings(&self) -> PathBuf {
        self.at("ingest/listings.csv")
    }
    pub fn ego_places(&self) -> PathBuf {
        self.at("ingest/ego_places.csv")
    }
    pub fn ingest_excluded(&self) -> PathBuf {
        self.at("ingest/excluded.csv")
    }
    pub fn features(&self) -> PathBuf {
        self.at("features/features.csv")
    }
    pub fn features_schema(&self) -> PathBuf {
        self.at("features/features.schema.csv")
    }
    pub fn egohood(&self) -> PathBuf {
        self.at("egohood/egohood.csv")
    }
    pub fn egohood_schema(&self) -> PathBuf {
        self.at("egohood/egohood.schema.csv")
    }
    pub fn design(&self) -> PathBuf {
        self.at("egohood/design.csv")
    }
    pub fn targets(&self) -> PathBuf {
        self.at("egohood/targets.csv")
    }
    pub fn design_excluded(&self) -> PathBuf {
        self.at("egohood/excluded.csv")
    }
    pub fn folds(&self) -> PathBuf {
        self.at("folds/folds.csv")
    }
    pub fn train_dir(&self, v: Variant) -> PathBuf {
        self.out.join("train").join(v.as_str())
    }
    pub fn rotation_model(&self, v: Variant, r: usize) -> PathBuf {
        self.train_dir(v).join(format!("model_r{r}.json"))
    }
    /// Average of the rotation models, used for nowcasts and explanations.
    pub fn model(&self, v: Variant) -> PathBuf {
        self.train_dir(v).join("model.json")
    }
    pub fn predictions(&self, v: Variant) -> PathBuf {
        self.train_dir(v).join("predictions.csv")
    }
    pub fn importance(&self, v: Variant) -> PathBuf {
        self.train_dir(v).join("importance.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.at("evaluate/report.txt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.at("evaluate/metrics.csv")
    }
    pub fn shares(&self) -> PathBuf {
        self.at("evaluate/shares.csv")
    }
    pub fn contributions(&self, v: Variant) -> PathBuf {
        self.out.join("evaluate").join(format!("contributions_{v}.csv"))
    }
    pub fn nowcast(&self, v: Variant) -> PathBuf {
        self.out.join("nowcast").join(format!("{v}.csv"))
    }
    pub fn explanation(&self, v: Variant, listing: &str) -> PathBuf {
        self.out.join("explain").join(v.as_str()).join(format!("{listing}.txt"))
    }
    pub fn explanation_csv(&self, v: Variant, listing: &str) -> PathBuf {
        self.out.join("explain").join(v.as_str()).join(format!("{listing}.csv"))
    }
}

fn train_stage(v: Variant) -> String {
    format!("train-{v}")
}

fn mkdirs(path: &Path) -> Result<(), PipelineError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(PipelineError::io(p))?;
    }
    Ok(())
}

fn io_at<T>(path: &Path, r: std::io::Result<T>) -> Result<T, PipelineError> {
    r.map_err(PipelineError::io(path))
}

fn write_pairs(path: &Path, header: [&str; 2], rows: &[(String, String)]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (a, b) in rows {
        w.write_record([a, b])?;
    }
    w.flush().map_err(PipelineError::io(path))
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, PipelineError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

/// Generates the synthetic city into the data directory.
pub fn run_synth(cfg: &RunConfig) -> Result<SynthCity, PipelineError> {
    let city = synth_city(&cfg.synth, &cfg.features)?;
    let paths = cfg.layer_paths();
    let data = &city.dataset;
    for p in [&paths.blocks, &paths.listings, &paths.amenities, &paths.landuse, &paths.security, &paths.roads] {
        mkdirs(p)?;
    }
    io_at(&paths.blocks, write_blocks(&paths.blocks, &data.blocks))?;
    io_at(&paths.listings, write_listings(&paths.listings, &data.listings))?;
    io_at(&paths.amenities, write_amenities(&paths.amenities, &data.amenities))?;
    io_at(&paths.landuse, write_landuse(&paths.landuse, &data.landuse))?;
    io_at(&paths.security, write_security(&paths.security, &data.security))?;
    io_at(&paths.roads, write_roads(&paths.roads, &data.roads))?;
    let oracle_path = cfg.data_dir().join("oracle.json");
    let mut text = serde_json::to_string_pretty(&city.oracle)?;
    text.push('\n');
    io_at(&oracle_path, fs::write(&oracle_path, text))?;
    let prices_path = cfg.data_dir().join("oracle_prices.csv");
    let mut w = csv::Writer::from_path(&prices_path)?;
    for o in &city.oracle_listings {
        w.serialize(o)?;
    }
    io_at(&prices_path, w.flush())?;

    let mut m = Manifest::new("synth", cfg.to_pairs());
    for p in [&paths.blocks, &paths.listings, &paths.amenities, &paths.landuse, &paths.security, &paths.roads] {
        m.output(p)?;
    }
    m.output(&oracle_path)?;
    m.output(&prices_path)?;
    m.write(&cfg.out)?;
    log::info!(
        "synth: {} blocks, {} listings, {} amenities; neighborhood variance share {:.3}",
        data.blocks.len(),
        data.listings.len(),
        data.amenities.len(),
        city.oracle.neighborhood_variance_share
    );
    Ok(city)
}

/// Loads the layers, filters listings and assigns ego-places.
pub fn run_ingest(cfg: &RunConfig) -> Result<Manifest, PipelineError> {
    let sp = StagePaths::new(&cfg.out);
    let paths = cfg.layer_paths();
    let data = load_dataset(&paths)?;
    let n_raw = data.listings.len();
    let kept_ids: std::collections::BTreeSet<String> = filter_listings(data.listings.clone(), &cfg.filter)
        .into_iter()
        .map(|l| l.id)
        .collect();
    let mut excluded: Vec<(String, String)> = Vec::new();
    let mut kept = Vec::new();
    for l in data.listings {
        if kept_ids.contains(&l.id) {
            kept.push(l);
        } else {
            excluded.push((l.id, "filtered".into()));
        }
    }
    let index = BlockIndex::new(&data.blocks);
    let (assigned, failed) = index.assign_all(kept);
    excluded.extend(failed.into_iter().map(|(l, e)| (l.id, e.to_string())));
    mkdirs(&sp.ingest_listings())?;
    io_at(&sp.ingest_listings(), write_listings(&sp.ingest_listings(), &assigned))?;
    let places: Vec<(String, String)> = assigned
        .iter()
        .map(|l| (l.id.clone(), l.ego_place_id.clone().unwrap_or_default()))
        .collect();
    write_pairs(&sp.ego_places(), ["listing_id", "block_id"], &places)?;
    write_pairs(&sp.ingest_excluded(), ["listing_id", "reason"], &excluded)?;
    log::info!("ingest: {n_raw} listings read, {} assigned, {} excluded", assigned.len(), excluded.len());

    let mut m = Manifest::new("ingest", cfg.to_pairs());
    for p in [&paths.blocks, &paths.listings, &paths.amenities, &paths.landuse, &paths.security, &paths.roads] {
        m.input(p)?;
    }
    for p in [sp.ingest_listings(), sp.ego_places(), sp.ingest_excluded()] {
        m.output(&p)?;
    }
    m.write(&cfg.out)?;
    Ok(m)
}

/// Computes the place-feature table of every block.
pub fn run_features(cfg: &RunConfig) -> Result<Manifest, PipelineError> {
    let sp = StagePaths::new(&cfg.out);
    let paths = cfg.layer_paths();
    let data = load_dataset(&paths)?;
    let f = compute_features(&data, &cfg.features)?;
    mkdirs(&sp.features())?;
    f.write_csv(&sp.features())?;
    f.write_schema(&sp.features_schema())?;
    log::info!("features: {} blocks x {} columns", f.n_rows(), f.n_cols());
    let mut m = Manifest::new("features", cfg.to_pairs());
    for p in [&paths.blocks, &paths.amenities, &paths.landuse, &paths.security, &paths.roads] {
        m.input(p)?;
    }
    m.output(&sp.features())?;
    m.output(&sp.features_schema())?;
    m.write(&cfg.out)?;
    Ok(m)
}

fn block_centroids(path: &Path) -> Result<BTreeMap<String, LonLat>, PipelineError> {
    Ok(read_blocks(path)?.into_iter().map(|b| (b.id, b.centroid)).collect())
}

fn assigned_listings(sp: &StagePaths) -> Result<Vec<Listing>, PipelineError> {
    let places: BTreeMap<String, String> = read_pairs(&sp.ego_places())?.into_iter().collect();
    let mut listings = read_listings(&sp.ingest_listings())?;
    for l in &mut listings {
        l.ego_place_id = places.get(&l.id).cloned();
    }
    Ok(listings)
}

/// Aggregates features over egohoods and assembles the design matrix.
pub fn run_egohood(cfg: &RunConfig) -> Result<Manifest, PipelineError> {
    let sp = StagePaths::new(&cfg.out);
    Manifest::require(&cfg.out, "features", &sp.features())?;
    Manifest::require(&cfg.out, "features", &sp.features_schema())?;
    Manifest::require(&cfg.out, "ingest", &sp.ingest_listings())?;
    Manifest::require(&cfg.out, "ingest", &sp.ego_places())?;
    let blocks_path = cfg.layer_paths().blocks;
    let centroids = block_centroids(&blocks_path)?;
    let f = FeatureTable::read(&sp.features(), &sp.features_schema())?;
    let pts: Vec<LonLat> = f
        .block_ids()
        .iter()
        .map(|id| {
            centroids
                .get(id)
                .copied()
                .ok_or_else(|| PipelineError::Invalid(format!("feature row {id} is not a block")))
        })
        .collect::<Result<_, _>>()?;
    let wn = ContiguityMatrix::build(&pts, cfg.features.egohood_radius_m).row_normalize();
    if wn.isolated_count() > 0 {
        log::warn!("egohood: {} isolated blocks keep their own features", wn.isolated_count());
    }
    let e = egohood_features(&wn, &f)?;
    mkdirs(&sp.egohood())?;
    e.write_csv(&sp.egohood())?;
    e.write_schema(&sp.egohood_schema())?;

    let listings = assigned_listings(&sp)?;
    let encoder = PropertyEncoder::fit(&listings);
    let (design, excluded) = assemble_design_matrix(&listings, &encoder, &f, &e)?;
    design.write_csv(&sp.design(), &sp.targets())?;
    write_pairs(&sp.design_excluded(), ["listing_id", "reason"], &excluded)?;
    let counts = design.group_counts();
    log::info!(
        "egohood: design matrix {} rows; columns property {}, ego-place {}, egohood {}",
        design.n_rows(),
        counts.get(&FeatureGroup::Property).unwrap_or(&0),
        counts.get(&FeatureGroup::EgoPlace).unwrap_or(&0),
        counts.get(&FeatureGroup::Egohood).unwrap_or(&0)
    );

    let mut m = Manifest::new("egohood", cfg.to_pairs());
    for p in [blocks_path, sp.features(), sp.features_schema(), sp.ingest_listings(), sp.ego_places()] {
        m.input(&p)?;
    }
    for p in [sp.egohood(), sp.egohood_schema(), sp.design(), sp.targets(), sp.design_excluded()] {
        m.output(&p)?;
    }
    m.write(&cfg.out)?;
    Ok(m)
}

fn read_design(cfg: &RunConfig, sp: &StagePaths) -> Result<DesignMatrix, PipelineError> {
    Manifest::require(&cfg.out, "egohood", &sp.design())?;
    Manifest::require(&cfg.out, "egohood", &sp.targets())?;
    Ok(DesignMatrix::read_csv(&sp.design(), &sp.targets())?)
}

/// Spatial folds over the priced listings of the design matrix.
pub fn run_folds(cfg: &RunConfig) -> Result<Manifest, PipelineError> {
    let sp = StagePaths::new(&cfg.out);
    let design = read_design(cfg, &sp)?;
    let blocks_path = cfg.layer_paths().blocks;
    let centroids = block_centroids(&blocks_path)?;
    let listings: Vec<(String, String)> = (0..design.n_rows())
        .filter(|&i| design.targets[i].is_some())
        .map(|i| (design.ids[i].clone(), design.block_ids[i].clone()))
        .collect();
    let tiles = tile_blocks(&centroids, cfg.tile_side_m);
    let fa = assign_folds(&tiles, &listings, cfg.k_folds, cfg.seed)?;
    let fa = enforce_constraints(fa, &centroids, cfg.conflict_radius_m)?;
    let violations = verify_folds(&fa, &centroids, cfg.conflict_radius_m);
    if let Some(v) = violations.first() {
        return Err(PipelineError::Invalid(format!(
            "folds: {} constraint violations remain (first: rotation {}, block {} near {})",
            violations.len(),
            v.rotation,
            v.block,
            v.other
        )));
    }
    for s in &fa.rotations {
        log::info!(
            "folds: rotation {}: train {}, validation {}, holdout {} kept",
            s.rotation,
            s.kept(Role::Train).len(),
            s.kept(Role::Validation).len(),
            s.kept(Role::Holdout).len()
        );
    }
    mkdirs(&sp.folds())?;
    write_folds_csv(&fa, &sp.folds())?;
    let mut m = Manifest::new("folds", cfg.to_pairs());
    for p in [blocks_path, sp.design(), sp.targets()] {
        m.input(&p)?;
    }
    m.output(&sp.folds())?;
    m.write(&cfg.out)?;
    Ok(m)
}

struct Subset {
    ids: Vec<String>,
    x: DenseMatrix,
    y: Vec<f64>,
}

fn subset(design: &DesignMatrix, rows: &[usize], cols: &[usize]) -> Subset {
    let picked: Vec<Vec<Option<f64>>> = rows.iter().map(|&i| design.rows[i].clone()).collect();
    Subset {
        ids: rows.iter().map(|&i| design.ids[i].clone()).collect(),
        x: DenseMatrix::from_options(&picked, cols),
        y: rows.iter().map(|&i| design.targets[i].expect("priced rows only")).collect(),
    }
}

/// Trains one model per rotation and records holdout predictions.
pub fn run_train(cfg: &RunConfig, variant: Variant) -> Result<Manifest, PipelineError> {
    let sp = StagePaths::new(&cfg.out);
    let design = read_design(cfg, &sp)?;
    Manifest::require(&cfg.out, "folds", &sp.folds())?;
    let fa = read_folds_csv(&sp.folds())?;
    let cols = variant.select(&design.columns);
    let names: Vec<String> = cols.iter().map(|&c| design.columns[c].header()).collect();
    let index = design.row_index();
    let design_rows = |listing_idx: Vec<usize>| -> Result<Vec<usize>, PipelineError> {
        listing_idx
            .into_iter()
            .map(|l| {
                let id = &fa.listings[l].0;
                index
                    .get(id.as_str())
                    .copied()
                    .filter(|&i| design.targets[i].is_some())
                    .ok_or_else(|| PipelineError::Invalid(format!("folds list {id}, which has no priced design row")))
            })
            .collect()
    };

    fs::create_dir_all(sp.train_dir(variant)).map_err(PipelineError::io(sp.train_dir(variant)))?;
    let mut models = Vec::new();
    let mut preds = Vec::new();
    for split in &fa.rotations {
        let r = split.rotation;
        let tr = subset(&design, &design_rows(split.kept(Role::Train))?, &cols);
        let va = subset(&design, &design_rows(split.kept(Role::Validation))?, &cols);
        let ho = subset(&design, &design_rows(split.kept(Role::Holdout))?, &cols);
        let model = train(&tr.x, &tr.y, &va.x, &va.y, names.clone(), &cfg.train)?;
        let meta = model.meta.as_ref().expect("trained models carry metadata");
        log::info!(
            "train {variant}: rotation {r}: {} train / {} validation / {} holdout rows, best round {} (validation MAE {:.2})",
            tr.y.len(),
            va.y.len(),
            ho.y.len(),
            meta.best_round,
            meta.best_validation_mae
        );
        let p = model.predict_matrix(&ho.x)?;
        preds.extend(ho.ids.into_iter().zip(ho.y).zip(p).map(|((id, y), prediction)| Prediction {
            id,
            rotation: r,
            y,
            prediction,
        }));
        save_model(&model, &sp.rotation_model(variant, r))?;
        models.push(model);
    }
    let avg = TreeEnsemble::average(&models)?;
    save_model(&avg, &sp.model(variant))?;
    write_predictions_csv(&preds, &sp.predictions(variant))?;
    write_importance_csv(&feature_importance(&avg, &group_by_prefix), &sp.importance(variant))?;

    let mut m = Manifest::new(&train_stage(variant), cfg.to_pairs());
    for p in [sp.design(), sp.targets(), sp.folds()] {
        m.input(&p)?;
    }
    for r in 0..models.len() {
        m.output(&sp.rotation_model(variant, r))?;
    }
    for p in [sp.model(variant), sp.predictions(variant), sp.importance(variant)] {
        m.output(&p)?;
    }
    m.write(&cfg.out)?;
    Ok(m)
}

/// Per-variant grouped shares: (group, gain share, mean |contribution| share).
pub type GroupShares = Vec<(String, f64, f64)>;

/// Holdout metrics of every trained variant, plus contribution files and
/// grouped shares.
pub fn run_evaluate(cfg: &RunConfig) -> Result<Vec<(RunReport, GroupShares)>, PipelineError> {
    let sp = StagePaths::new(&cfg.out);
    let trained: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| Manifest::path(&cfg.out, &train_stage(*v)).exists())
        .collect();
    if trained.is_empty() {
        return Err(PipelineError::Stale {
            stage: "train".into(),
            detail: "no trained variant found".into(),
        });
    }
    let design = read_design(cfg, &sp)?;
    let index = design.row_index();
    mkdirs(&sp.report())?;
    let mut m = Manifest::new("evaluate", cfg.to_pairs());
    m.input(&sp.design())?;
    m.input(&sp.targets())?;
    let mut out = Vec::new();
    for v in &trained {
        let stage = train_stage(*v);
        Manifest::require(&cfg.out, &stage, &sp.predictions(*v))?;
        let preds = read_predictions_csv(&sp.predictions(*v))?;
        let report = evaluate_run(v.as_str(), &preds, cfg.k_folds)?;
        let mut models = Vec::new();
        for r in 0..cfg.k_folds {
            let p = sp.rotation_model(*v, r);
            Manifest::require(&cfg.out, &stage, &p)?;
            models.push(load_model(&p)?);
            m.input(&p)?;
        }
        m.input(&sp.predictions(*v))?;
        let cols: Vec<usize> = models[0]
            .feature_names
            .iter()
            .map(|h| {
                design
                    .column_index(h)
                    .ok_or_else(|| PipelineError::Invalid(format!("model feature {h} is not a design column")))
            })
            .collect::<Result<_, _>>()?;
        let mut reports: Vec<ContributionReport> = Vec::with_capacity(preds.len());
        let mut xs_by_rot: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.k_folds];
        for p in &preds {
            let i = *index
                .get(p.id.as_str())
                .ok_or_else(|| PipelineError::Invalid(format!("prediction for unknown listing {}", p.id)))?;
            let x: Vec<f64> = cols.iter().map(|&c| design.rows[i][c].unwrap_or(f64::NAN)).collect();
            reports.push(path_contributions(&models[p.rotation], &p.id, &x)?);
            xs_by_rot[p.rotation].push(x);
        }
        write_contributions_csv(&reports, &sp.contributions(*v))?;
        // Gain shares from the averaged model; contribution shares pooled
        // over each rotation's own holdout rows.
        let avg = TreeEnsemble::average(&models)?;
        let gain = feature_importance(&avg, &group_by_prefix).group_shares;
        let mut contrib: BTreeMap<String, f64> = BTreeMap::new();
        for (r, xs) in xs_by_rot.iter().enumerate() {
            let s = contribution_shares(&models[r], xs, &group_by_prefix)?;
            for (g, share) in s {
                *contrib.entry(g).or_default() += share * xs.len() as f64;
            }
        }
        let total: f64 = contrib.values().sum();
        let groups: GroupShares = FeatureGroup::ALL
            .iter()
            .map(|g| g.as_str().to_string())
            .filter(|g| gain.contains_key(g) || contrib.contains_key(g))
            .map(|g| {
                let c = contrib.get(&g).map_or(0.0, |c| if total > 0.0 { c / total } else { 0.0 });
                (g.clone(), gain.get(&g).copied().unwrap_or(0.0), c)
            })
            .collect();
        out.push((report, groups));
    }
    let reports: Vec<RunReport> = out.iter().map(|(r, _)| r.clone()).collect();
    let mut text = format_comparison(&reports);
    text.push_str("\ngrouped shares (gain / mean |contribution|):\n");
    for (r, groups) in &out {
        for (g, gs, cs) in groups {
            text.push_str(&format!("  {:<9} {:<10} {:>7.3} {:>7.3}\n", r.variant, g, gs, cs));
        }
    }
    io_at(&sp.report(), fs::write(sp.report(), &text))?;
    let mut w = csv::Writer::from_path(sp.metrics())?;
    w.write_record(["variant", "rotation", "n", "mae", "mdape"])?;
    for r in &reports {
        for (i, row) in r.per_rotation.iter().enumerate() {
            w.write_record([r.variant.clone(), i.to_string(), row.n.to_string(), row.mae.to_string(), row.mdape.to_string()])?;
        }
        let p = &r.pooled;
        w.write_record([r.variant.clone(), "pooled".into(), p.n.to_string(), p.mae.to_string(), p.mdape.to_string()])?;
    }
    io_at(&sp.metrics(), w.flush())?;
    let mut w = csv::Writer::from_path(sp.shares())?;
    w.write_record(["variant", "group", "gain_share", "contribution_share"])?;
    for (r, groups) in &out {
        for (g, gs, cs) in groups {
            w.write_record([r.variant.clone(), g.clone(), gs.to_string(), cs.to_string()])?;
        }
    }
    io_at(&sp.shares(), w.flush())?;
    for p in [sp.report(), sp.metrics(), sp.shares()] {
        m.output(&p)?;
    }
    for v in &trained {
        m.output(&sp.contributions(*v))?;
    }
    m.write(&cfg.out)?;
    Ok(out)
}

fn load_variant_model(cfg: &RunConfig, sp: &StagePaths, v: Variant) -> Result<TreeEnsemble, PipelineError> {
    Manifest::require(&cfg.out, &train_stage(v), &sp.model(v))?;
    Ok(load_model(&sp.model(v))?)
}

fn model_inputs(model: &TreeEnsemble, design: &DesignMatrix, row: usize) -> Result<Vec<f64>, PipelineError> {
    model
        .feature_names
        .iter()
        .map(|h| {
            design
                .column_index(h)
                .map(|c| design.rows[row][c].unwrap_or(f64::NAN))
                .ok_or_else(|| PipelineError::Invalid(format!("model feature {h} is not a design column")))
        })
        .collect()
}

/// Predicts prices for listings without a target: the unpriced rows of the
/// design matrix, or the listings of `input` when given.
pub fn run_nowcast(cfg: &RunConfig, variant: Variant, input: Option<&Path>) -> Result<Manifest, PipelineError> {
    let sp = StagePaths::new(&cfg.out);
    let model = load_variant_model(cfg, &sp, variant)?;
    let mut m = Manifest::new(&format!("nowcast-{variant}"), cfg.to_pairs());
    m.input(&sp.model(variant))?;
    let mut rows: Vec<(String, String, Option<f64>)> = Vec::new();
    match input {
        None => {
            let design = read_design(cfg, &sp)?;
            m.input(&sp.design())?;
            for i in (0..design.n_rows()).filter(|&i| design.targets[i].is_none()) {
                let x = model_inputs(&model, &design, i)?;
                rows.push((design.ids[i].clone(), design.block_ids[i].clone(), Some(model.predict(&x)?)));
            }
        }
        Some(path) => {
            let design = read_design(cfg, &sp)?;
            for p in [sp.features(), sp.features_schema()] {
                Manifest::require(&cfg.out, "features", &p)?;
            }
            for p in [sp.egohood(), sp.egohood_schema()] {
                Manifest::require(&cfg.out, "egohood", &p)?;
            }
            let blocks = read_blocks(&cfg.layer_paths().blocks)?;
            let (assigned, failed) = BlockIndex::new(&blocks).assign_all(read_listings(path)?);
            let prop: Vec<String> = design
                .columns
                .iter()
                .filter(|c| c.group == FeatureGroup::Property)
                .map(|c| c.name.clone())
                .collect();
            let encoder = PropertyEncoder::from_column_names(&prop)?;
            let f = FeatureTable::read(&sp.features(), &sp.features_schema())?;
            let e = FeatureTable::read(&sp.egohood(), &sp.egohood_schema())?;
            let (new, excluded) = assemble_design_matrix(&assigned, &encoder, &f, &e)?;
            for i in 0..new.n_rows() {
                let x = model_inputs(&model, &new, i)?;
                rows.push((new.ids[i].clone(), new.block_ids[i].clone(), Some(model.predict(&x)?)));
            }
            rows.extend(failed.into_iter().map(|(l, _)| (l.id, String::new(), None)));
            rows.extend(excluded.into_iter().map(|(id, _)| (id, String::new(), None)));
            m.input(path)?;
            m.input(&sp.design())?;
        }
    }
    let out = sp.nowcast(variant);
    mkdirs(&out)?;
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(["id", "block_id", "prediction"])?;
    for (id, b, p) in &rows {
        w.write_record([id.as_str(), b.as_str(), &p.map(|x| x.to_string()).unwrap_or_default()])?;
    }
    io_at(&out, w.flush())?;
    log::info!("nowcast {variant}: {} listings", rows.len());
    m.output(&out)?;
    m.write(&cfg.out)?;
    Ok(m)
}

/// Explains the averaged-model prediction of one listing.
pub fn run_explain(cfg: &RunConfig, variant: Variant, listing: &str) -> Result<ContributionReport, PipelineError> {
    let sp = StagePaths::new(&cfg.out);
    let model = load_variant_model(cfg, &sp, variant)?;
    let design = read_design(cfg, &sp)?;
    let i = *design
        .row_index()
        .get(listing)
        .ok_or_else(|| PipelineError::Invalid(format!("listing {listing} is not in the design matrix")))?;
    let x = model_inputs(&model, &design, i)?;
    let report = path_contributions(&model, listing, &x)?;
    let txt = sp.explanation(variant, listing);
    mkdirs(&txt)?;
    io_at(&txt, fs::write(&txt, format_explanation(&report, 8)))?;
    write_contributions_csv(std::slice::from_ref(&report), &sp.explanation_csv(variant, listing))?;
    let mut m = Manifest::new(&format!("explain-{variant}"), cfg.to_pairs());
    m.input(&sp.model(variant))?;
    m.input(&sp.design())?;
    m.output(&txt)?;
    m.output(&sp.explanation_csv(variant, listing))?;
    m.write(&cfg.out)?;
    Ok(report)
}
