//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p hoodprice --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use hoodprice::egohood::{egohood_features, ContiguityMatrix, DesignMatrix, EGOHOOD_RADIUS_M};
use hoodprice::evaluation::{feature_importance, group_by_prefix, mae, mdape, path_contributions};
use hoodprice::features::{decay_score, lum, FeatureParams, WalkParams};
use hoodprice::gbt::{
    leaf_weight, load_model, save_model, split_gain, train, DenseMatrix, NodeKind, TrainConfig, Tree, TreeEnsemble,
};
use hoodprice::geo::{haversine_m, LocalProjection, LonLat};
use hoodprice::geomodel::RoadEdge;
use hoodprice::pipeline::{self, Manifest, RunConfig, SynthSpec, Variant};
use hoodprice::roadnet::RoadGraph;
use hoodprice::spatialcv::{assign_folds, enforce_constraints, tile_blocks, verify_folds, Role};
use hoodprice::table::{ColumnSpec, FeatureTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- 1

fn decay_values() -> Outcome {
    let p = WalkParams::default();
    let m = p.max_distance_m;
    let d = |x: f64| decay_score(x, &p).map_err(|e| e.to_string());
    check!(d(0.0)? == 1.0, "decay(0) = {}", d(0.0)?);
    check!(close(d(500.0)?, 0.9856, 1e-3), "decay(500) = {}", d(500.0)?);
    check!(close(d(m)?, (-5f64).exp(), 1e-6), "decay(M) = {}", d(m)?);
    let above = f64::from_bits(m.to_bits() + 1);
    check!(d(above)? == 0.0 && d(m + 1.0)? == 0.0, "decay beyond M is not 0");
    Ok(format!("decay(500) = {:.5}, decay(M) = {:.3e}", d(500.0)?, d(m)?))
}

// ---------------------------------------------------------------- 2

fn lum_values() -> Outcome {
    let u = lum([1.0, 1.0, 1.0]).ok_or("uniform lum undefined")?;
    check!(close(u, 1.0, 1e-12), "lum(uniform) = {u}");
    check!(lum([3.0, 0.0, 0.0]) == Some(0.0), "lum(degenerate) = {:?}", lum([3.0, 0.0, 0.0]));
    let h = lum([0.5, 0.5, 0.0]).ok_or("lum(0.5,0.5,0) undefined")?;
    check!(close(h, 0.63093, 1e-5), "lum(0.5,0.5,0) = {h}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for t in 0..1000 {
        let s: [f64; 3] = std::array::from_fn(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random::<f64>() });
        let base = lum(s);
        for p in PERMS {
            let q = lum([s[p[0]], s[p[1]], s[p[2]]]);
            check!(q == base, "triple {t} {s:?}: permutation {p:?} gives {q:?}, expected {base:?}");
        }
    }
    Ok(format!("lum(0.5,0.5,0) = {h:.6}; 1000 triples permutation invariant"))
}

// ---------------------------------------------------------------- 3

fn egohood_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let proj = LocalProjection::new(LonLat::new(7.6, 45.0));
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let n = rng.random_range(2..120);
        let extent = rng.random_range(1000.0..8000.0);
        let radius = rng.random_range(200.0..1500.0);
        let pts: Vec<LonLat> = (0..n)
            .map(|_| proj.to_lonlat(rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
            .collect();
        let n_cols = rng.random_range(1..4);
        let values: Vec<Vec<Option<f64>>> = (0..n)
            .map(|_| {
                (0..n_cols)
                    .map(|_| (!rng.random_bool(0.1)).then(|| rng.random_range(-50.0..50.0)))
                    .collect()
            })
            .collect();
        let ids = (0..n).map(|i| format!("B{i:04}")).collect();
        let cols = (0..n_cols).map(|c| ColumnSpec::new(format!("c{c}"), "", "")).collect();
        let f = FeatureTable::new(ids, cols, values.clone()).map_err(|e| e.to_string())?;
        let wn = ContiguityMatrix::build(&pts, radius).row_normalize();
        let e = egohood_features(&wn, &f).map_err(|e| e.to_string())?;
        for i in 0..n {
            let nbrs: Vec<usize> = (0..n)
                .filter(|&j| j != i && haversine_m(pts[i], pts[j]) < radius)
                .collect();
            if nbrs.is_empty() {
                check!(e.row(i) == f.row(i), "instance {inst}: isolated row {i} not copied");
                continue;
            }
            check!(close(wn.row_sum(i), 1.0, 1e-12), "instance {inst}: row {i} sums to {}", wn.row_sum(i));
            for c in 0..n_cols {
                let present: Vec<f64> = nbrs.iter().filter_map(|&j| values[j][c]).collect();
                let want = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
                match (e.row(i)[c], want) {
                    (Some(a), Some(b)) => {
                        worst = worst.max((a - b).abs());
                        check!(close(a, b, 1e-9), "instance {inst}: E[{i}][{c}] = {a}, oracle {b}");
                    }
                    (None, None) => {}
                    (a, b) => return Err(format!("instance {inst}: E[{i}][{c}] = {a:?}, oracle {b:?}")),
                }
            }
        }
    }
    let line = vec![proj.to_lonlat(0.0, 0.0), proj.to_lonlat(800.0, 0.0), proj.to_lonlat(1600.0, 0.0)];
    let wn = ContiguityMatrix::build(&line, EGOHOOD_RADIUS_M).row_normalize();
    let f = FeatureTable::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![ColumnSpec::new("x", "", "")],
        vec![vec![Some(1.0)], vec![Some(2.0)], vec![Some(9.0)]],
    )
    .map_err(|e| e.to_string())?;
    let e = egohood_features(&wn, &f).map_err(|e| e.to_string())?;
    check!(
        e.rows() == [vec![Some(2.0)], vec![Some(5.0)], vec![Some(2.0)]],
        "line fixture gives {:?}",
        e.rows()
    );
    Ok(format!("50 instances, max |E - oracle| = {worst:.1e}; line fixture [[2],[5],[2]]"))
}

// ---------------------------------------------------------------- 4

fn spatial_cv() -> Outcome {
    let spec = SynthSpec {
        seed: 11,
        ..SynthSpec::default()
    };
    let city = pipeline::synth_city(&spec, &FeatureParams::default()).map_err(|e| e.to_string())?;
    check!(city.dataset.blocks.len() == 2000, "city has {} blocks", city.dataset.blocks.len());
    let centroids: BTreeMap<String, LonLat> = city.dataset.blocks.iter().map(|b| (b.id.clone(), b.centroid)).collect();
    let listings: Vec<(String, String)> = city
        .oracle_listings
        .iter()
        .map(|o| (o.id.clone(), o.block_id.clone()))
        .collect();
    let tiles = tile_blocks(&centroids, 3000.0);
    let build = |seed: u64| {
        let fa = assign_folds(&tiles, &listings, 5, seed).map_err(|e| e.to_string())?;
        enforce_constraints(fa, &centroids, 1000.0).map_err(|e| e.to_string())
    };
    let fa = build(42)?;
    check!(fa.rotations.len() == 5, "{} rotations", fa.rotations.len());
    let v = verify_folds(&fa, &centroids, 1000.0);
    check!(v.is_empty(), "{} violations, first {:?}", v.len(), v[0]);
    let kept_holdout: usize = fa.rotations.iter().map(|s| s.kept(Role::Holdout).len()).sum();
    check!(kept_holdout > 0, "no holdout listing survives");

    // Planted fault: move one training block of rotation 0 into its holdout fold.
    let split = &fa.rotations[0];
    let holdout_fold = fa.k - 1;
    let l = split.kept(Role::Train)[0];
    let planted = fa.listings[l].1.clone();
    let mut bad = fa.clone();
    bad.block_fold.insert(planted.clone(), holdout_fold);
    let v = verify_folds(&bad, &centroids, 1000.0);
    check!(
        v.iter().any(|x| x.rotation == 0 && (x.block == planted || x.other == planted)),
        "planted block {planted} not reported ({} violations)",
        v.len()
    );

    check!(build(42)? == fa, "same seed gave a different assignment");
    Ok(format!(
        "0 violations over 5 rotations ({kept_holdout} kept holdout listings); planted {planted} detected; seed-deterministic"
    ))
}

// ---------------------------------------------------------------- 5

fn floyd_warshall(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for &(a, b, w) in edges {
        if a != b && w < d[a][b] {
            d[a][b] = w;
            d[b][a] = w;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

fn random_graph(rng: &mut ChaCha8Rng) -> (usize, Vec<(usize, usize, f64)>, RoadGraph) {
    let n = rng.random_range(2..=200);
    let m = rng.random_range(n - 1..=3 * n);
    let mut edges = Vec::with_capacity(m);
    for i in 1..n {
        // Mostly a random tree, with some components left detached.
        if !rng.random_bool(0.03) {
            edges.push((rng.random_range(0..i), i, rng.random_range(1..=600) as f64));
        }
    }
    while edges.len() < m {
        edges.push((rng.random_range(0..n), rng.random_range(0..n), rng.random_range(1..=600) as f64));
    }
    let coord = |i: usize| LonLat::new(7.0 + i as f64 * 1e-3, 45.0);
    let road: Vec<RoadEdge> = edges
        .iter()
        .map(|&(a, b, w)| RoadEdge {
            node_a: format!("v{a}"),
            node_b: format!("v{b}"),
            a: coord(a),
            b: coord(b),
            length_m: w,
        })
        .collect();
    let g = RoadGraph::build(&road).expect("valid random graph");
    (n, edges, g)
}

fn shortest_paths() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut compared = 0usize;
    for gi in 0..20 {
        let (n, edges, g) = random_graph(&mut rng);
        let fw = floyd_warshall(n, &edges);
        let present: Vec<usize> = (0..n).filter(|&i| g.node_index(&format!("v{i}")).is_some()).collect();
        for _ in 0..10 {
            let s = present[rng.random_range(0..present.len())];
            let cutoff = rng.random_range(1.0..5000.0);
            let got = g
                .network_distances_by_id(&format!("v{s}"), cutoff)
                .map_err(|e| e.to_string())?;
            let want: BTreeMap<String, f64> = present
                .iter()
                .filter(|&&t| fw[s][t] <= cutoff)
                .map(|&t| (format!("v{t}"), fw[s][t]))
                .collect();
            check!(got == want, "graph {gi} ({n} nodes), source v{s}, cutoff {cutoff}: Dijkstra and oracle differ");
            compared += want.len();
        }
    }
    for pi in 0..100 {
        let (_, _, g) = random_graph(&mut rng);
        let s = rng.random_range(0..g.node_count());
        let c1 = rng.random_range(1.0..3000.0);
        let c2 = c1 + rng.random_range(0.0..3000.0);
        let small = g.network_distances(s, c1).map_err(|e| e.to_string())?;
        let large = g.network_distances(s, c2).map_err(|e| e.to_string())?;
        let restricted: BTreeMap<usize, f64> = large.iter().filter(|(_, &d)| d <= c1).map(|(&k, &d)| (k, d)).collect();
        check!(small == restricted, "pair {pi}: cutoff {c1} result is not the {c2} result restricted");
    }
    Ok(format!("20 graphs, {compared} distances equal to Floyd-Warshall; 100 cutoff pairs monotone"))
}

// ---------------------------------------------------------------- 6

/// Minimizer of `½(H+λ)w² + Gw + α|w|` by bisection on the sign of its
/// right derivative, which is nondecreasing in `w`.
fn argmin_leaf(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    let bound = g.abs() / (h + lambda) + 1.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let slope = (h + lambda) * mid + g + if mid >= 0.0 { alpha } else { -alpha };
        if slope < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Minimum of the regularized leaf objective, found numerically.
fn min_objective(g: f64, h: f64, lambda: f64, alpha: f64) -> f64 {
    let w = argmin_leaf(g, h, lambda, alpha);
    0.5 * (h + lambda) * w * w + g * w + alpha * w.abs()
}

fn tree_depth(t: &Tree, i: usize) -> usize {
    match t.nodes[i].kind {
        NodeKind::Leaf { .. } => 0,
        NodeKind::Split { left, right, .. } => 1 + tree_depth(t, left).max(tree_depth(t, right)),
    }
}

fn check_trees(m: &TreeEnsemble, min_cover: f64, max_depth: usize) -> Result<usize, String> {
    for (ti, t) in m.trees.iter().enumerate() {
        let d = tree_depth(t, 0);
        check!(d <= max_depth, "tree {ti} has depth {d}");
        for n in &t.nodes {
            if let NodeKind::Leaf { .. } = n.kind {
                check!(n.cover >= min_cover, "tree {ti} has a leaf with cover {}", n.cover);
            }
        }
    }
    Ok(m.trees.len())
}

fn check_early_stopping(m: &TreeEnsemble, x_val: &DenseMatrix, y_val: &[f64]) -> Result<(), String> {
    let meta = m.meta.as_ref().ok_or("model has no training metadata")?;
    let h = &meta.validation_mae;
    let argmin = (0..h.len()).fold(0, |b, i| if h[i] < h[b] { i } else { b });
    check!(meta.best_round == argmin, "best round {} but argmin is {argmin}", meta.best_round);
    check!(m.trees.len() == argmin, "{} trees kept, argmin round {argmin}", m.trees.len());
    let p = m.predict_matrix(x_val).map_err(|e| e.to_string())?;
    let pairs: Vec<(f64, f64)> = y_val.iter().copied().zip(p).collect();
    let got = mae(&pairs).map_err(|e| e.to_string())?;
    check!(close(got, h[argmin], 1e-9 * h[argmin].max(1.0)), "truncated model MAE {got} vs recorded {}", h[argmin]);
    Ok(())
}

fn gbt_optimizer(trained: &[TreeEnsemble]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let g: f64 = rng.random_range(-100.0..100.0);
        let h = rng.random_range(0.0..100.0);
        let lambda = rng.random_range(0.01..10.0);
        let alpha = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..5.0) };
        let want = argmin_leaf(g, h, lambda, alpha);
        let got = leaf_weight(g, h, lambda, alpha);
        worst = worst.max((got - want).abs());
        check!(close(got, want, 1e-6), "draw {i}: leaf_weight({g}, {h}, {lambda}, {alpha}) = {got}, 1-D minimum at {want}");
    }
    check!(close(leaf_weight(10.0, 5.0, 5.0, 1.0), -0.9, 1e-12), "leaf_weight example");

    check!(
        close(split_gain(-4.0, 2.0, 6.0, 3.0, 5.0, 0.0, 0.0), 3.1929, 1e-4),
        "split_gain example = {}",
        split_gain(-4.0, 2.0, 6.0, 3.0, 5.0, 0.0, 0.0)
    );
    for i in 0..1000 {
        let (gl, gr) = (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let (hl, hr) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
        let lambda = rng.random_range(0.01..10.0);
        let alpha = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..5.0) };
        let gamma = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..10.0) };
        let parent = min_objective(gl + gr, hl + hr, lambda, alpha);
        let children = min_objective(gl, hl, lambda, alpha) + min_objective(gr, hr, lambda, alpha);
        let want = parent - children - gamma;
        let got = split_gain(gl, hl, gr, hr, lambda, alpha, gamma);
        check!(close(got, want, 1e-6 * want.abs().max(1.0)), "draw {i}: split_gain {got}, objective difference {want}");
    }

    // Default regularization with a deep tree budget on noisy data.
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..1500 {
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        y.push(10.0 * row[0].max(0.0) + 5.0 * (row[1] * 3.0).sin() + rng.random_range(-1.0..1.0));
        x.push(row.into_iter().map(|v| if rng.random_bool(0.05) { f64::NAN } else { v }).collect::<Vec<_>>());
    }
    let (xt, yt) = (DenseMatrix::from_rows(&x[..1000], 4).map_err(|e| e.to_string())?, &y[..1000]);
    let (xv, yv) = (DenseMatrix::from_rows(&x[1000..], 4).map_err(|e| e.to_string())?, &y[1000..]);
    let cfg = TrainConfig {
        learning_rate: 0.3,
        n_estimators: 300,
        early_stopping_rounds: 20,
        ..TrainConfig::default()
    };
    let names: Vec<String> = (0..4).map(|i| format!("x{i}")).collect();
    let m = train(&xt, yt, &xv, yv, names, &cfg).map_err(|e| e.to_string())?;
    let mut trees = check_trees(&m, 3.0, 20)?;
    check_early_stopping(&m, &xv, yv)?;
    for t in trained {
        trees += check_trees(t, 3.0, 20)?;
    }
    Ok(format!(
        "10000 leaf weights within {worst:.1e}; 1000 split gains match; {trees} trees with cover >= 3 and depth <= 20; early stop at argmin round {}",
        m.meta.as_ref().map(|x| x.best_round).unwrap_or(0)
    ))
}

// ---------------------------------------------------------------- 7

fn random_inputs(design: &DesignMatrix, cols: &[usize], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges: Vec<(f64, f64)> = cols
        .iter()
        .map(|&c| {
            design.rows.iter().filter_map(|r| r[c]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
        })
        .collect();
    (0..n)
        .map(|_| {
            let row = &design.rows[rng.random_range(0..design.n_rows())];
            cols.iter()
                .zip(&ranges)
                .map(|(&c, &(lo, hi))| {
                    let u: f64 = rng.random();
                    if u < 0.05 || !lo.is_finite() {
                        f64::NAN
                    } else if u < 0.3 {
                        if hi > lo {
                            rng.random_range(lo..=hi)
                        } else {
                            lo
                        }
                    } else {
                        row[c].unwrap_or(f64::NAN)
                    }
                })
                .collect()
        })
        .collect()
}

fn explanation_sum(models: &[&TreeEnsemble], design: &DesignMatrix) -> Outcome {
    let mut worst = 0.0f64;
    let mut n = 0;
    for (mi, m) in models.iter().enumerate() {
        let cols: Vec<usize> = m
            .feature_names
            .iter()
            .map(|f| design.column_index(f).ok_or(format!("model feature {f} not in design")))
            .collect::<Result<_, _>>()?;
        for x in random_inputs(design, &cols, 1000, 70 + mi as u64) {
            let pred = m.predict(&x).map_err(|e| e.to_string())?;
            let r = path_contributions(m, "", &x).map_err(|e| e.to_string())?;
            let sum = r.bias + r.contributions.iter().map(|(_, c)| c).sum::<f64>();
            let rel = (sum - pred).abs() / pred.abs().max(1.0);
            worst = worst.max(rel);
            check!(rel <= 1e-6, "model {mi}: bias + contributions = {sum}, prediction {pred}");
            n += 1;
        }
    }
    Ok(format!("{n} inputs over {} models, max relative gap {worst:.1e}", models.len()))
}

// ---------------------------------------------------------------- 8

fn metrics() -> Outcome {
    let m = |p: &[(f64, f64)]| mae(p).map_err(|e| e.to_string());
    let md = |p: &[(f64, f64)]| mdape(p).map_err(|e| e.to_string());
    check!(m(&[(100.0, 90.0), (200.0, 220.0)])? == 15.0, "MAE example 1");
    check!(m(&[(5.0, 5.0), (7.0, 7.0)])? == 0.0, "MAE of perfect predictions");
    let three = [(100.0, 110.0), (200.0, 150.0), (400.0, 440.0)];
    check!(close(m(&three)?, 100.0 / 3.0, 1e-9), "MAE example 2 = {}", m(&three)?);
    check!(close(md(&three)?, 10.0, 1e-12), "MdAPE example = {}", md(&three)?);
    check!(md(&[(250.0, 250.0)])? == 0.0, "MdAPE of a perfect pair");
    check!(mae(&[]).is_err() && mdape(&[(0.0, 1.0)]).is_err(), "empty or zero-target input accepted");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let n = rng.random_range(1..60);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let y = rng.random_range(1e4..1e6);
                (y, y * rng.random_range(0.5..1.5))
            })
            .collect();
        let s = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<(f64, f64)> = pairs.iter().map(|&(y, x)| (s * y, s * x)).collect();
        let (a, b) = (md(&pairs)?, md(&scaled)?);
        check!(close(a, b, 1e-9 * a.max(1.0)), "scaling {i} by {s}: MdAPE {a} vs {b}");
    }
    Ok("unit examples hold; MdAPE invariant under 1000 scalings".into())
}

// ---------------------------------------------------------------- 9

fn desk_config(out: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out = out.to_path_buf();
    for (k, v) in [
        ("seed", seed.to_string()),
        ("learning_rate", "0.1".into()),
        ("n_estimators", "500".into()),
        ("max_depth", "6".into()),
        ("early_stopping_rounds", "30".into()),
    ] {
        cfg.set(k, &v).expect("valid setting");
    }
    cfg
}

fn run_data_stages(cfg: &RunConfig) -> Result<pipeline::SynthCity, String> {
    let city = pipeline::run_synth(cfg).map_err(|e| e.to_string())?;
    pipeline::run_ingest(cfg).map_err(|e| e.to_string())?;
    pipeline::run_features(cfg).map_err(|e| e.to_string())?;
    pipeline::run_egohood(cfg).map_err(|e| e.to_string())?;
    pipeline::run_folds(cfg).map_err(|e| e.to_string())?;
    Ok(city)
}

fn variant_comparison(cfg: &RunConfig, share: f64) -> Outcome {
    for v in [Variant::Property, Variant::Full] {
        pipeline::run_train(cfg, v).map_err(|e| e.to_string())?;
    }
    let reports = pipeline::run_evaluate(cfg).map_err(|e| e.to_string())?;
    let pooled = |v: Variant| {
        reports
            .iter()
            .find(|(r, _)| r.variant == v.as_str())
            .map(|(r, _)| r.pooled.clone())
            .ok_or(format!("no report for {v}"))
    };
    let (prop, full) = (pooled(Variant::Property)?, pooled(Variant::Full)?);
    check!(prop.n == full.n, "variants scored on {} vs {} holdout rows", prop.n, full.n);
    let drop = 1.0 - full.mdape / prop.mdape;

    let sp = pipeline::StagePaths::new(&cfg.out);
    let avg = load_model(&sp.model(Variant::Full)).map_err(|e| e.to_string())?;
    let shares = feature_importance(&avg, &group_by_prefix).group_shares;
    let get = |g: &str| shares.get(g).copied().unwrap_or(0.0);
    let neighborhood = get("ego-place") + get("egohood");
    let property = get("property");

    check!(share >= 0.5, "oracle neighborhood variance share {share:.3} < 0.5");
    check!(
        drop >= 0.30,
        "MdAPE {:.2}% -> {:.2}%: relative drop {:.1}% < 30%",
        prop.mdape,
        full.mdape,
        100.0 * drop
    );
    check!(
        neighborhood > property,
        "neighborhood gain share {neighborhood:.3} does not exceed property {property:.3}"
    );
    Ok(format!(
        "oracle share {share:.3}; holdout n={}: MdAPE property {:.2}% vs full {:.2}% ({:.1}% lower), MAE {:.0} vs {:.0}; gain share neighborhood {neighborhood:.3} vs property {property:.3}",
        prop.n,
        prop.mdape,
        full.mdape,
        100.0 * drop,
        prop.mae,
        full.mae
    ))
}

// ---------------------------------------------------------------- 10

fn round_trip(models: &[&TreeEnsemble], design: &DesignMatrix, dir: &Path) -> Result<usize, String> {
    let mut rows = 0;
    for (i, m) in models.iter().enumerate() {
        let path = dir.join(format!("roundtrip_{i}.json"));
        save_model(m, &path).map_err(|e| e.to_string())?;
        let back = load_model(&path).map_err(|e| e.to_string())?;
        check!(&back == *m, "model {i} differs after save/load");
        let cols: Vec<usize> = m.feature_names.iter().filter_map(|f| design.column_index(f)).collect();
        for (r, x) in random_inputs(design, &cols, 10_000, 100 + i as u64).iter().enumerate() {
            let (a, b) = (m.predict(x).map_err(|e| e.to_string())?, back.predict(x).map_err(|e| e.to_string())?);
            check!(a.to_bits() == b.to_bits(), "model {i}, row {r}: {a} vs {b} after reload");
        }
        rows = 10_000;
    }
    Ok(rows)
}

/// Output hashes of every stage, keyed by stage and path relative to `out`.
fn stage_outputs(out: &Path) -> Result<BTreeMap<(String, String), String>, String> {
    let mut map = BTreeMap::new();
    let dir = out.join(hoodprice::pipeline::MANIFEST_DIR);
    let mut stages: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stages.sort();
    let prefix = out.display().to_string();
    for s in stages {
        let m = Manifest::load(out, &s).map_err(|e| e.to_string())?;
        for f in m.outputs {
            let rel = f.path.strip_prefix(&prefix).unwrap_or(&f.path).to_string();
            map.insert((s.clone(), rel), f.sha256);
        }
    }
    Ok(map)
}

fn small_pipeline(out: &Path) -> Result<(), String> {
    let mut cfg = desk_config(out, 3);
    for (k, v) in [
        ("synth_blocks", "900"),
        ("synth_listings", "3000"),
        ("synth_unpriced_fraction", "0.05"),
        ("n_estimators", "60"),
    ] {
        cfg.set(k, v).map_err(|e| e.to_string())?;
    }
    run_data_stages(&cfg)?;
    for v in [Variant::Property, Variant::Full] {
        pipeline::run_train(&cfg, v).map_err(|e| e.to_string())?;
    }
    pipeline::run_evaluate(&cfg).map_err(|e| e.to_string())?;
    pipeline::run_nowcast(&cfg, Variant::Full, None).map_err(|e| e.to_string())?;
    let design = DesignMatrix::read_csv(
        &pipeline::StagePaths::new(out).design(),
        &pipeline::StagePaths::new(out).targets(),
    )
    .map_err(|e| e.to_string())?;
    pipeline::run_explain(&cfg, Variant::Full, &design.ids[0]).map_err(|e| e.to_string())?;
    Ok(())
}

fn persistence(models: &[&TreeEnsemble], design: &DesignMatrix, scratch: &Path) -> Outcome {
    let rows = round_trip(models, design, scratch)?;
    let (a, b) = (scratch.join("repro_a"), scratch.join("repro_b"));
    small_pipeline(&a)?;
    let first = stage_outputs(&a)?;
    small_pipeline(&b)?;
    let second = stage_outputs(&b)?;
    check!(first.len() >= 20, "only {} stage outputs recorded", first.len());
    let keys: BTreeSet<_> = first.keys().chain(second.keys()).collect();
    for k in &keys {
        check!(first.get(*k) == second.get(*k), "stage {} output {} differs between runs", k.0, k.1);
    }
    let stages: BTreeSet<&str> = first.keys().map(|(s, _)| s.as_str()).collect();
    Ok(format!(
        "{} models reload bit-identically on {rows} rows each; {} outputs of {} stages byte-identical across runs",
        models.len(),
        first.len(),
        stages.len()
    ))
}

// ----------------------------------------------------------------

fn report(results: &mut Vec<bool>, n: usize, name: &str, start: Instant, r: Outcome) {
    let secs = start.elapsed().as_secs_f64();
    match r {
        Ok(detail) => {
            println!("criterion {n:>2} PASS  {name} [{secs:.1}s]: {detail}");
            results.push(true);
        }
        Err(detail) => {
            println!("criterion {n:>2} FAIL  {name} [{secs:.1}s]: {detail}");
            results.push(false);
        }
    }
}

fn main() {
    let mut results = Vec::new();
    let t = Instant::now();
    report(&mut results, 1, "decay values", t, decay_values());
    let t = Instant::now();
    report(&mut results, 2, "land-use mix", t, lum_values());
    let t = Instant::now();
    report(&mut results, 3, "egohood algebra", t, egohood_algebra());
    let t = Instant::now();
    report(&mut results, 4, "spatial cross-validation", t, spatial_cv());
    let t = Instant::now();
    report(&mut results, 5, "shortest paths", t, shortest_paths());

    let scratch = tempfile::tempdir().expect("temporary directory");
    let cfg = desk_config(&scratch.path().join("city"), 7);
    let t = Instant::now();
    let setup = run_data_stages(&cfg);
    let share = setup.as_ref().map(|c| c.oracle.neighborhood_variance_share).unwrap_or(0.0);
    let c9 = match &setup {
        Ok(_) => variant_comparison(&cfg, share),
        Err(e) => Err(format!("pipeline setup failed: {e}")),
    };
    let c9_time = t;

    let sp = pipeline::StagePaths::new(&cfg.out);
    let mut trained = Vec::new();
    for v in [Variant::Property, Variant::Full] {
        for r in 0..cfg.k_folds {
            if let Ok(m) = load_model(&sp.rotation_model(v, r)) {
                trained.push(m);
            }
        }
    }
    let avg = load_model(&sp.model(Variant::Full)).ok();
    let design = DesignMatrix::read_csv(&sp.design(), &sp.targets()).ok();

    let t = Instant::now();
    report(&mut results, 6, "boosted-tree optimizer", t, gbt_optimizer(&trained));
    let t = Instant::now();
    let c7 = match (&avg, &design, trained.len()) {
        (Some(avg), Some(d), n) if n == 2 * cfg.k_folds => {
            let full_r0 = &trained[cfg.k_folds];
            explanation_sum(&[full_r0, avg], d)
        }
        _ => Err("no trained synthetic-city model available".into()),
    };
    report(&mut results, 7, "explanation sum", t, c7);
    let t = Instant::now();
    report(&mut results, 8, "metrics", t, metrics());
    report(&mut results, 9, "variant comparison", c9_time, c9);
    let t = Instant::now();
    let c10 = match (&avg, &design) {
        (Some(avg), Some(d)) => {
            let mut ms: Vec<&TreeEnsemble> = vec![avg];
            ms.extend(trained.first());
            persistence(&ms, d, scratch.path())
        }
        _ => Err("no trained synthetic-city model available".into()),
    };
    report(&mut results, 10, "persistence", t, c10);

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
