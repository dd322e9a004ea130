//! Undirected road graph with cutoff-bounded Dijkstra queries.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::geo::{LonLat, PointGrid, Polygon};
use crate::geomodel::{Amenity, AmenityCategory, AmenityGeometry, RoadEdge};

/// One mile: the maximum walking distance.
pub const WALK_CUTOFF_M: f64 = 1609.34;

pub type NodeIx = usize;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoadError {
    #[error("road layer has no edges")]
    Empty,
    #[error("edge {node_a}-{node_b} has non-positive length {length_m}")]
    NonPositiveLength {
        node_a: String,
        node_b: String,
        length_m: f64,
    },
    #[error("node `{0}` appears with two different coordinates")]
    InconsistentCoordinates(String),
    #[error("unknown source node {0}")]
    UnknownNode(String),
}

/// Immutable undirected weighted graph in compressed adjacency form.
///
/// Node indices follow ascending node id, so the layout does not depend on
/// input edge order.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    ids: Vec<String>,
    coords: Vec<LonLat>,
    index: HashMap<String, NodeIx>,
    offsets: Vec<usize>,
    targets: Vec<NodeIx>,
    weights: Vec<f64>,
}

impl RoadGraph {
    /// Builds the graph; parallel edges collapse to the shortest one and
    /// self-loops are dropped.
    pub fn build(edges: &[RoadEdge]) -> Result<Self, RoadError> {
        if edges.is_empty() {
            return Err(RoadError::Empty);
        }
        let mut nodes: BTreeMap<&str, LonLat> = BTreeMap::new();
        for e in edges {
            if !(e.length_m > 0.0) || !e.length_m.is_finite() {
                return Err(RoadError::NonPositiveLength {
                    node_a: e.node_a.clone(),
                    node_b: e.node_b.clone(),
                    length_m: e.length_m,
                });
            }
            for (id, p) in [(&e.node_a, e.a), (&e.node_b, e.b)] {
                match nodes.get(id.as_str()) {
                    Some(q) if *q != p => return Err(RoadError::InconsistentCoordinates(id.clone())),
                    Some(_) => {}
                    None => {
                        nodes.insert(id, p);
                    }
                }
            }
        }
        let ids: Vec<String> = nodes.keys().map(|s| s.to_string()).collect();
        let coords: Vec<LonLat> = nodes.values().copied().collect();
        let index: HashMap<String, NodeIx> = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();

        let mut best: BTreeMap<(NodeIx, NodeIx), f64> = BTreeMap::new();
        for e in edges {
            let (a, b) = (index[&e.node_a], index[&e.node_b]);
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            best.entry(key)
                .and_modify(|w| *w = w.min(e.length_m))
                .or_insert(e.length_m);
        }
        let mut adj: Vec<Vec<(NodeIx, f64)>> = vec![Vec::new(); ids.len()];
        for (&(a, b), &w) in &best {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        let mut offsets = Vec::with_capacity(ids.len() + 1);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for list in &mut adj {
            list.sort_by(|x, y| x.0.cmp(&y.0));
            for &(t, w) in list.iter() {
                targets.push(t);
                weights.push(w);
            }
            offsets.push(targets.len());
        }
        Ok(Self {
            ids,
            coords,
            index,
            offsets,
            targets,
            weights,
        })
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn node_index(&self, id: &str) -> Option<NodeIx> {
        self.index.get(id).copied()
    }

    pub fn node_id(&self, ix: NodeIx) -> &str {
        &self.ids[ix]
    }

    pub fn coords(&self) -> &[LonLat] {
        &self.coords
    }

    pub fn neighbors(&self, ix: NodeIx) -> impl Iterator<Item = (NodeIx, f64)> + '_ {
        let r = self.offsets[ix]..self.offsets[ix + 1];
        self.targets[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    /// Exact shortest-path distances from `source` to every node within
    /// `cutoff_m` (inclusive).
    pub fn network_distances(&self, source: NodeIx, cutoff_m: f64) -> Result<BTreeMap<NodeIx, f64>, RoadError> {
        if source >= self.node_count() {
            return Err(RoadError::UnknownNode(source.to_string()));
        }
        let mut scratch = Dijkstra::new(self.node_count());
        let mut out = BTreeMap::new();
        scratch.run(self, &[source], cutoff_m, |n, d| {
            out.insert(n, d);
        });
        Ok(out)
    }

    pub fn network_distances_by_id(&self, source: &str, cutoff_m: f64) -> Result<BTreeMap<String, f64>, RoadError> {
        let ix = self
            .node_index(source)
            .ok_or_else(|| RoadError::UnknownNode(source.to_string()))?;
        Ok(self
            .network_distances(ix, cutoff_m)?
            .into_iter()
            .map(|(n, d)| (self.ids[n].clone(), d))
            .collect())
    }

    /// Runs [`Self::network_distances`] for many sources in parallel.
    /// Output order follows `sources`.
    pub fn batch_distances(&self, sources: &[NodeIx], cutoff_m: f64) -> Result<Vec<BTreeMap<NodeIx, f64>>, RoadError> {
        sources
            .par_iter()
            .map_init(
                || Dijkstra::new(self.node_count()),
                |scratch, &s| {
                    if s >= self.node_count() {
                        return Err(RoadError::UnknownNode(s.to_string()));
                    }
                    let mut out = BTreeMap::new();
                    scratch.run(self, &[s], cutoff_m, |n, d| {
                        out.insert(n, d);
                    });
                    Ok(out)
                },
            )
            .collect()
    }

    /// Distance from every node to the nearest of `sources`; `None` when
    /// unreachable.
    pub fn nearest_source_distances(&self, sources: &[NodeIx]) -> Vec<Option<f64>> {
        let mut out = vec![None; self.node_count()];
        let mut scratch = Dijkstra::new(self.node_count());
        scratch.run(self, sources, f64::INFINITY, |n, d| out[n] = Some(d));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    node: NodeIx,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then node index
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Reusable Dijkstra buffers; only touched entries are reset between runs.
#[derive(Debug, Clone)]
pub struct Dijkstra {
    dist: Vec<f64>,
    settled: Vec<bool>,
    touched: Vec<NodeIx>,
    heap: BinaryHeap<HeapItem>,
}

impl Dijkstra {
    pub fn new(n: usize) -> Self {
        Self {
            dist: vec![f64::INFINITY; n],
            settled: vec![false; n],
            touched: Vec::new(),
            heap: BinaryHeap::new(),
        }
    }

    /// Settles nodes in ascending distance (ties by index) and calls
    /// `visit` once per node with distance `<= cutoff_m`.
    pub fn run(&mut self, g: &RoadGraph, sources: &[NodeIx], cutoff_m: f64, mut visit: impl FnMut(NodeIx, f64)) {
        for &n in &self.touched {
            self.dist[n] = f64::INFINITY;
            self.settled[n] = false;
        }
        self.touched.clear();
        self.heap.clear();
        for &s in sources {
            if self.dist[s] > 0.0 {
                self.dist[s] = 0.0;
                self.touched.push(s);
                self.heap.push(HeapItem { dist: 0.0, node: s });
            }
        }
        while let Some(HeapItem { dist, node }) = self.heap.pop() {
            if self.settled[node] || dist > self.dist[node] {
                continue;
            }
            self.settled[node] = true;
            visit(node, dist);
            for (t, w) in g.neighbors(node) {
                let nd = dist + w;
                if nd <= cutoff_m && nd < self.dist[t] {
                    if self.dist[t] == f64::INFINITY {
                        self.touched.push(t);
                    }
                    self.dist[t] = nd;
                    self.heap.push(HeapItem { dist: nd, node: t });
                }
            }
        }
    }
}

/// Nearest-node lookup by great-circle distance, ties to the smallest id.
#[derive(Debug, Clone)]
pub struct SnapIndex<'g> {
    graph: &'g RoadGraph,
    grid: PointGrid,
}

impl<'g> SnapIndex<'g> {
    pub fn new(graph: &'g RoadGraph) -> Self {
        Self {
            graph,
            grid: PointGrid::new(graph.coords.clone(), 200.0),
        }
    }

    pub fn snap(&self, p: LonLat) -> NodeIx {
        self.grid
            .nearest_by(p, |i| self.graph.node_id(i))
            .map(|(i, _)| i)
            .expect("graph has at least one node")
    }

    /// Node nearest to the polygon boundary, standing in for an entrance.
    pub fn snap_polygon(&self, poly: &Polygon) -> NodeIx {
        let centroid = poly.centroid();
        let start = self.snap(centroid);
        let mut best = (start, poly.boundary_distance_m(self.graph.coords[start]));
        // any better node lies within reach of the centroid
        let reach = poly
            .exterior
            .iter()
            .map(|v| crate::geo::haversine_m(centroid, *v))
            .fold(0.0, f64::max)
            + best.1
            + 1.0;
        for n in self.grid.within(centroid, reach) {
            let d = poly.boundary_distance_m(self.graph.coords[n]);
            if d < best.1 || (d == best.1 && self.graph.node_id(n) < self.graph.node_id(best.0)) {
                best = (n, d);
            }
        }
        best.0
    }
}

/// Amenities snapped onto graph nodes.
#[derive(Debug, Clone, Default)]
pub struct AmenityNodes {
    by_category: BTreeMap<AmenityCategory, Vec<NodeIx>>,
    at_node: HashMap<NodeIx, Vec<AmenityCategory>>,
}

impl AmenityNodes {
    pub fn snap(snap: &SnapIndex<'_>, amenities: &[Amenity]) -> Self {
        let snapped: Vec<(AmenityCategory, NodeIx)> = amenities
            .par_iter()
            .map(|a| {
                let n = match &a.geometry {
                    AmenityGeometry::Point(p) => snap.snap(*p),
                    AmenityGeometry::Area(poly) => snap.snap_polygon(poly),
                };
                (a.category, n)
            })
            .collect();
        let mut out = Self::default();
        for (c, n) in snapped {
            out.by_category.entry(c).or_default().push(n);
            out.at_node.entry(n).or_default().push(c);
        }
        out
    }

    pub fn nodes(&self, category: AmenityCategory) -> &[NodeIx] {
        self.by_category.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn at(&self, node: NodeIx) -> &[AmenityCategory] {
        self.at_node.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// The `k` smallest network distances from `source` to amenities of
/// `category`, each within `cutoff_m`, ascending.
pub fn k_nearest_amenities(
    graph: &RoadGraph,
    amenities: &AmenityNodes,
    source: NodeIx,
    category: AmenityCategory,
    k: usize,
    cutoff_m: f64,
) -> Vec<f64> {
    let mut found = Vec::new();
    let mut scratch = Dijkstra::new(graph.node_count());
    scratch.run(graph, &[source], cutoff_m, |n, d| {
        for c in amenities.at(n) {
            if *c == category {
                found.push(d);
            }
        }
    });
    found.truncate(k);
    found
}

/// One Dijkstra per source, collecting the `k` nearest distances for every
/// category in `ks`.
pub fn k_nearest_by_category(
    graph: &RoadGraph,
    amenities: &AmenityNodes,
    scratch: &mut Dijkstra,
    source: NodeIx,
    ks: &BTreeMap<AmenityCategory, usize>,
    cutoff_m: f64,
) -> BTreeMap<AmenityCategory, Vec<f64>> {
    let mut out: BTreeMap<AmenityCategory, Vec<f64>> = ks.keys().map(|c| (*c, Vec::new())).collect();
    scratch.run(graph, &[source], cutoff_m, |n, d| {
        for c in amenities.at(n) {
            if let (Some(list), Some(&k)) = (out.get_mut(c), ks.get(c)) {
                if list.len() < k {
                    list.push(d);
                }
            }
        }
    });
    out
}
