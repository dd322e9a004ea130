//! Spatially independent K-fold splits: tile the city, deal tiles to folds,
//! then discard evaluation listings too close to another role.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{haversine_m, BBox, LocalProjection, LonLat, PointGrid};

pub const K_FOLDS: usize = 5;
pub const TILE_SIDE_M: f64 = 3000.0;
pub const CONFLICT_RADIUS_M: f64 = 1000.0;

pub type Tile = (i64, i64);

#[derive(Debug, Error)]
pub enum CvError {
    #[error("only {tiles} non-empty tiles for {k} folds; use a smaller tile side")]
    TooFewTiles { tiles: usize, k: usize },
    #[error("rotation {i} out of range 0..{k}")]
    BadRotation { i: usize, k: usize },
    #[error("listing `{listing}` references block `{block}` without a centroid")]
    UnknownBlock { listing: String, block: String },
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Train,
    Validation,
    Holdout,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Holdout => "holdout",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = CvError;
    fn from_str(s: &str) -> Result<Self, CvError> {
        [Role::Train, Role::Validation, Role::Holdout]
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| CvError::Parse(format!("unknown role `{s}`")))
    }
}

/// Which independence rule a discard or violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Constraint {
    /// Evaluation listing near a training block.
    NearTraining,
    /// Holdout listing near a kept validation block.
    NearValidation,
}

impl Constraint {
    pub fn as_str(self) -> &'static str {
        match self {
            Constraint::NearTraining => "constraint_i",
            Constraint::NearValidation => "constraint_ii",
        }
    }
}

impl FromStr for Constraint {
    type Err = CvError;
    fn from_str(s: &str) -> Result<Self, CvError> {
        match s {
            "constraint_i" => Ok(Constraint::NearTraining),
            "constraint_ii" => Ok(Constraint::NearValidation),
            _ => Err(CvError::Parse(format!("unknown discard reason `{s}`"))),
        }
    }
}

/// Fold indices playing each role in one rotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub train: Vec<usize>,
    pub validation: usize,
    pub holdout: usize,
}

impl Rotation {
    pub fn role_of(&self, fold: usize) -> Role {
        if fold == self.holdout {
            Role::Holdout
        } else if fold == self.validation {
            Role::Validation
        } else {
            Role::Train
        }
    }
}

/// Rotation `i`: holdout `(k-1+i) mod k`, validation `(k-2+i) mod k`, the
/// rest train.
pub fn rotate(i: usize, k: usize) -> Result<Rotation, CvError> {
    if i >= k || k < 3 {
        return Err(CvError::BadRotation { i, k });
    }
    let holdout = (k - 1 + i) % k;
    let validation = (k - 2 + i) % k;
    let train = (0..k).filter(|&f| f != holdout && f != validation).collect();
    Ok(Rotation {
        train,
        validation,
        holdout,
    })
}

/// Roles and discards of every listing in one rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSplit {
    pub rotation: usize,
    pub roles: Vec<Role>,
    pub discarded: Vec<Option<Constraint>>,
}

impl RotationSplit {
    /// Kept listing indices with the given role, ascending.
    pub fn kept(&self, role: Role) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&i| self.roles[i] == role && self.discarded[i].is_none())
            .collect()
    }

    pub fn discard_count(&self, c: Constraint) -> usize {
        self.discarded.iter().filter(|d| **d == Some(c)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    /// `(listing id, block id)` in input order.
    pub listings: Vec<(String, String)>,
    pub block_fold: BTreeMap<String, usize>,
    /// Filled by [`enforce_constraints`].
    pub rotations: Vec<RotationSplit>,
}

impl FoldAssignment {
    pub fn fold_of_listing(&self, i: usize) -> usize {
        self.block_fold[&self.listings[i].1]
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for (_, b) in &self.listings {
            s[self.block_fold[b]] += 1;
        }
        s
    }
}

/// Square tile of a point given in meters east/north of the tiling origin.
pub fn tile_of(x: f64, y: f64, side_m: f64) -> Tile {
    ((x / side_m).floor() as i64, (y / side_m).floor() as i64)
}

/// Tiles the bounding box of all centroids from its south-west corner.
pub fn tile_blocks(centroids: &BTreeMap<String, LonLat>, side_m: f64) -> BTreeMap<String, Tile> {
    let bb = BBox::of_points(centroids.values());
    if bb.is_empty() {
        return BTreeMap::new();
    }
    let proj = LocalProjection::new(bb.min);
    centroids
        .iter()
        .map(|(id, c)| {
            let (x, y) = proj.to_local(*c);
            (id.clone(), tile_of(x.max(0.0), y.max(0.0), side_m))
        })
        .collect()
}

/// Shuffles tiles with `seed` and deals each to the fold with the fewest
/// listings so far (ties to the lowest fold).
pub fn assign_folds(
    block_tiles: &BTreeMap<String, Tile>,
    listings: &[(String, String)],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, CvError> {
    let mut weight: BTreeMap<Tile, usize> = block_tiles.values().map(|t| (*t, 0)).collect();
    for (id, b) in listings {
        let t = block_tiles.get(b).ok_or_else(|| CvError::UnknownBlock {
            listing: id.clone(),
            block: b.clone(),
        })?;
        *weight.get_mut(t).expect("tile registered") += 1;
    }
    let non_empty = weight.values().filter(|&&w| w > 0).count();
    if non_empty < k {
        return Err(CvError::TooFewTiles { tiles: non_empty, k });
    }
    let mut tiles: Vec<Tile> = weight.keys().copied().collect();
    tiles.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut load = vec![0usize; k];
    let mut tile_fold: BTreeMap<Tile, usize> = BTreeMap::new();
    for t in tiles {
        let f = (0..k).min_by_key(|&f| (load[f], f)).expect("k > 0");
        load[f] += weight[&t];
        tile_fold.insert(t, f);
    }
    let block_fold = block_tiles.iter().map(|(b, t)| (b.clone(), tile_fold[t])).collect();
    Ok(FoldAssignment {
        k,
        listings: listings.to_vec(),
        block_fold,
        rotations: Vec::new(),
    })
}

fn near_any(grid: &PointGrid, p: LonLat, radius_m: f64) -> bool {
    !grid.within(p, radius_m).is_empty()
}

/// Applies both independence constraints for every rotation. Training
/// listings are never discarded.
pub fn enforce_constraints(
    mut fa: FoldAssignment,
    centroids: &BTreeMap<String, LonLat>,
    radius_m: f64,
) -> Result<FoldAssignment, CvError> {
    for (id, b) in &fa.listings {
        if !centroids.contains_key(b) {
            return Err(CvError::UnknownBlock {
                listing: id.clone(),
                block: b.clone(),
            });
        }
    }
    let mut rotations = Vec::with_capacity(fa.k);
    for i in 0..fa.k {
        let rot = rotate(i, fa.k)?;
        let roles: Vec<Role> = (0..fa.listings.len()).map(|l| rot.role_of(fa.fold_of_listing(l))).collect();
        let blocks_with = |role: Role, keep: &dyn Fn(usize) -> bool| -> BTreeSet<&str> {
            (0..fa.listings.len())
                .filter(|&l| roles[l] == role && keep(l))
                .map(|l| fa.listings[l].1.as_str())
                .collect()
        };
        let grid_of = |blocks: &BTreeSet<&str>| PointGrid::new(blocks.iter().map(|b| centroids[*b]).collect(), radius_m.max(1.0));

        let train_grid = grid_of(&blocks_with(Role::Train, &|_| true));
        let mut discarded: Vec<Option<Constraint>> = vec![None; fa.listings.len()];
        let mut verdict: BTreeMap<&str, bool> = BTreeMap::new();
        for l in 0..fa.listings.len() {
            if roles[l] == Role::Train {
                continue;
            }
            let b = fa.listings[l].1.as_str();
            let near = *verdict.entry(b).or_insert_with(|| near_any(&train_grid, centroids[b], radius_m));
            if near {
                discarded[l] = Some(Constraint::NearTraining);
            }
        }
        let val_grid = grid_of(&blocks_with(Role::Validation, &|l| discarded[l].is_none()));
        let mut verdict: BTreeMap<&str, bool> = BTreeMap::new();
        for l in 0..fa.listings.len() {
            if roles[l] != Role::Holdout || discarded[l].is_some() {
                continue;
            }
            let b = fa.listings[l].1.as_str();
            let near = *verdict.entry(b).or_insert_with(|| near_any(&val_grid, centroids[b], radius_m));
            if near {
                discarded[l] = Some(Constraint::NearValidation);
            }
        }
        let split = RotationSplit {
            rotation: i,
            roles,
            discarded,
        };
        log::info!(
            "rotation {i}: train {} validation {} holdout {}; discarded {} (i) and {} (ii)",
            split.kept(Role::Train).len(),
            split.kept(Role::Validation).len(),
            split.kept(Role::Holdout).len(),
            split.discard_count(Constraint::NearTraining),
            split.discard_count(Constraint::NearValidation),
        );
        rotations.push(split);
    }
    fa.rotations = rotations;
    Ok(fa)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub rotation: usize,
    pub constraint: Constraint,
    /// The evaluation-side block.
    pub block: String,
    /// The conflicting training (or validation) block.
    pub other: String,
}

/// Exhaustive pairwise check of both constraints over kept listings.
/// Roles are recomputed from the block folds, not taken from the splits.
pub fn verify_folds(fa: &FoldAssignment, centroids: &BTreeMap<String, LonLat>, radius_m: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for split in &fa.rotations {
        let k = fa.k;
        let r = split.rotation;
        let role = |fold: usize| {
            if fold == (r + k - 1) % k {
                Role::Holdout
            } else if fold == (r + k - 2) % k {
                Role::Validation
            } else {
                Role::Train
            }
        };
        let mut by_role: BTreeMap<Role, BTreeSet<&str>> = BTreeMap::new();
        for (l, (_, b)) in fa.listings.iter().enumerate() {
            if split.discarded[l].is_none() {
                let Some(&fold) = fa.block_fold.get(b) else { continue };
                by_role.entry(role(fold)).or_default().insert(b.as_str());
            }
        }
        let empty = BTreeSet::new();
        let train = by_role.get(&Role::Train).unwrap_or(&empty);
        let val = by_role.get(&Role::Validation).unwrap_or(&empty);
        let hold = by_role.get(&Role::Holdout).unwrap_or(&empty);
        let check = |evals: &BTreeSet<&str>, others: &BTreeSet<&str>, c: Constraint| -> Vec<Violation> {
            let others: Vec<&str> = others.iter().copied().collect();
            evals
                .par_iter()
                .flat_map_iter(|&a| {
                    let others = &others;
                    others
                        .iter()
                        .filter(move |&&b| a == b || haversine_m(centroids[a], centroids[b]) < radius_m)
                        .map(move |&b| Violation {
                            rotation: r,
                            constraint: c,
                            block: a.to_string(),
                            other: b.to_string(),
                        })
                })
                .collect()
        };
        out.extend(check(val, train, Constraint::NearTraining));
        out.extend(check(hold, train, Constraint::NearTraining));
        out.extend(check(hold, val, Constraint::NearValidation));
    }
    out.sort();
    out
}

/// Writes one row per listing and rotation:
/// `listing_id,block_id,fold,rotation,role,kept,reason`.
pub fn write_folds_csv(fa: &FoldAssignment, path: &Path) -> Result<(), CvError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["listing_id", "block_id", "fold", "rotation", "role", "kept", "reason"])?;
    for split in &fa.rotations {
        for (l, (id, b)) in fa.listings.iter().enumerate() {
            let d = split.discarded[l];
            w.write_record([
                id.as_str(),
                b.as_str(),
                &fa.block_fold[b].to_string(),
                &split.rotation.to_string(),
                split.roles[l].as_str(),
                if d.is_none() { "1" } else { "0" },
                d.map(Constraint::as_str).unwrap_or(""),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_folds_csv(path: &Path) -> Result<FoldAssignment, CvError> {
    let bad = |row: usize, m: &str| CvError::Parse(format!("{}: row {row}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path)?;
    let mut listings: Vec<(String, String)> = Vec::new();
    let mut pos: BTreeMap<String, usize> = BTreeMap::new();
    let mut block_fold: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, Vec<(usize, Role, Option<Constraint>)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(bad(i + 1, "expected 7 fields"));
        }
        let fold: usize = rec[2].parse().map_err(|_| bad(i + 1, "bad fold"))?;
        let rot: usize = rec[3].parse().map_err(|_| bad(i + 1, "bad rotation"))?;
        let role: Role = rec[4].parse()?;
        let reason = if &rec[5] == "1" { None } else { Some(rec[6].parse::<Constraint>()?) };
        let l = *pos.entry(rec[0].to_string()).or_insert_with(|| {
            listings.push((rec[0].to_string(), rec[1].to_string()));
            listings.len() - 1
        });
        if *block_fold.entry(rec[1].to_string()).or_insert(fold) != fold {
            return Err(bad(i + 1, "block appears in two folds"));
        }
        rows.entry(rot).or_default().push((l, role, reason));
    }
    let k = block_fold.values().max().map_or(0, |m| m + 1).max(rows.len());
    let mut rotations = Vec::new();
    for (rot, entries) in rows {
        let mut roles = vec![Role::Train; listings.len()];
        let mut discarded = vec![None; listings.len()];
        if entries.len() != listings.len() {
            return Err(CvError::Parse(format!("rotation {rot} does not cover every listing")));
        }
        for (l, role, reason) in entries {
            roles[l] = role;
            discarded[l] = reason;
        }
        rotations.push(RotationSplit {
            rotation: rot,
            roles,
            discarded,
        });
    }
    Ok(FoldAssignment {
        k,
        listings,
        block_fold,
        rotations,
    })
}
