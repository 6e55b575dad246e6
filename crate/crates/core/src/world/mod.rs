//! Procedural ground-truth navigation worlds.
//!
//! A [`WorldGraph`] is a connected planar graph: Poisson-disk node placement,
//! k-nearest-neighbour edges, then spanning-tree repair joining any leftover
//! components through their shortest cross edges. Every node carries a
//! landmark id and `K` synthetic view vectors; the view sector facing a
//! neighbour encodes that neighbour's landmark.

mod dataset;
mod episode;
mod speaker;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use numcore::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::geom::{bearing, distance, sector_of, Point};
use crate::seeding::{label, rng_for};

pub use dataset::{
    annotate_dataset, read_episodes, read_worlds, split_dataset, write_episodes, write_worlds, ANNOTATION_SCHEMES,
    EPISODE_FORMAT, VARIANTS_PER_TRAJECTORY, WORLD_FORMAT,
};
pub use episode::{sample_episode, Episode, EpisodeParams, PathStyle, TaskId};
pub use speaker::{first_hop_heading, render_instruction, synthesize_instruction, Instruction, Register};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    pub node_count: usize,
    /// Side length of the square arena in meters.
    pub area: f64,
    /// Each node links to its `degree` nearest neighbours (edges are symmetric).
    pub degree: usize,
    /// Number of view sectors evenly partitioning 360°.
    pub view_count: usize,
    pub view_dim: usize,
    pub landmark_count: usize,
    /// Poisson-disk minimum spacing between nodes, meters.
    pub min_spacing: f64,
    pub feature_noise: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            node_count: 36,
            area: 40.0,
            degree: 3,
            view_count: 12,
            view_dim: 48,
            landmark_count: 40,
            min_spacing: 4.0,
            feature_noise: 0.1,
        }
    }
}

impl WorldParams {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NavError::Generation(m));
        if self.node_count < 2 {
            return bad(format!("node_count {} < 2", self.node_count));
        }
        if self.degree < 2 {
            return bad(format!("degree {} < 2", self.degree));
        }
        if self.view_count < 1 || self.landmark_count < 1 {
            return bad("view_count and landmark_count must be positive".into());
        }
        if self.view_dim < self.landmark_count {
            return bad(format!(
                "view_dim {} cannot hold {} landmark channels",
                self.view_dim, self.landmark_count
            ));
        }
        if !(self.area > 0.0) || !(self.min_spacing >= 0.0) || !(self.feature_noise >= 0.0) {
            return bad("area, spacing and noise must be non-negative and finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub length: f64,
}

#[derive(Debug, Clone)]
pub struct WorldGraph {
    seed: u64,
    params: WorldParams,
    positions: Vec<Point>,
    edges: Vec<Edge>,
    landmarks: Vec<usize>,
    adjacency: Vec<Vec<(NodeId, f64)>>,
    view_features: Vec<Tensor>,
    dist: Vec<f64>,
    prev: Vec<Option<NodeId>>,
}

/// Serialized form of a world: the layout plus the seed that regenerates its view features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldRecord {
    pub seed: u64,
    pub params: WorldParams,
    pub positions: Vec<Point>,
    pub edges: Vec<[NodeId; 2]>,
    pub landmarks: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, NodeId);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over an adjacency list restricted to nodes where `allowed` holds.
/// Returns distances (`f64::INFINITY` when unreachable) and predecessors.
pub fn dijkstra_filtered(
    adjacency: &[Vec<(NodeId, f64)>],
    src: NodeId,
    allowed: impl Fn(NodeId) -> bool,
) -> (Vec<f64>, Vec<Option<NodeId>>) {
    let n = adjacency.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(HeapItem(0.0, src));
    while let Some(HeapItem(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adjacency[u] {
            if !allowed(v) {
                continue;
            }
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = Some(u);
                heap.push(HeapItem(nd, v));
            }
        }
    }
    (dist, prev)
}

fn trace_back(prev: &[Option<NodeId>], src: NodeId, dst: NodeId) -> Option<Vec<NodeId>> {
    let mut path = vec![dst];
    let mut cur = dst;
    while cur != src {
        cur = prev[cur]?;
        path.push(cur);
    }
    path.reverse();
    Some(path)
}

/// Reconstructs `src -> dst` from a predecessor array produced by a search from `src`.
pub fn reconstruct_path(prev: &[Option<NodeId>], src: NodeId, dst: NodeId) -> Option<Vec<NodeId>> {
    trace_back(prev, src, dst)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

fn place_nodes(params: &WorldParams, rng: &mut impl Rng) -> Result<Vec<Point>> {
    let mut pts: Vec<Point> = Vec::with_capacity(params.node_count);
    let max_attempts = 20_000 * params.node_count;
    let mut attempts = 0;
    while pts.len() < params.node_count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(NavError::Generation(format!(
                "could only place {} of {} nodes with spacing {} in a {}m arena",
                pts.len(),
                params.node_count,
                params.min_spacing,
                params.area
            )));
        }
        let p = [rng.random::<f64>() * params.area, rng.random::<f64>() * params.area];
        if pts.iter().all(|q| distance(p, *q) >= params.min_spacing) {
            pts.push(p);
        }
    }
    Ok(pts)
}

fn build_edges(positions: &[Point], degree: usize) -> Vec<[NodeId; 2]> {
    let n = positions.len();
    let mut set = std::collections::BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<(f64, NodeId)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (distance(positions[i], positions[j]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(degree) {
            set.insert([i.min(j), i.max(j)]);
        }
    }
    let mut uf = UnionFind((0..n).collect());
    for e in &set {
        uf.union(e[0], e[1]);
    }
    let mut pairs: Vec<(f64, NodeId, NodeId)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((distance(positions[i], positions[j]), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, i, j) in pairs {
        if uf.union(i, j) {
            set.insert([i, j]);
        }
    }
    set.into_iter().collect()
}

impl WorldGraph {
    /// Generates a world; identical `(seed, params)` give bit-identical worlds.
    pub fn generate(seed: u64, params: &WorldParams) -> Result<Self> {
        params.validate()?;
        let mut layout_rng = rng_for(seed, &[label("world-layout")]);
        let positions = place_nodes(params, &mut layout_rng)?;
        let edges = build_edges(&positions, params.degree);
        let mut lm_rng = rng_for(seed, &[label("world-landmarks")]);
        let landmarks = (0..params.node_count)
            .map(|_| lm_rng.random_range(0..params.landmark_count))
            .collect();
        Self::from_record(WorldRecord {
            seed,
            params: params.clone(),
            positions,
            edges,
            landmarks,
        })
    }

    /// Rebuilds a world from its serialized layout, recomputing lengths,
    /// shortest paths and view features.
    pub fn from_record(rec: WorldRecord) -> Result<Self> {
        rec.params.validate()?;
        let n = rec.positions.len();
        if n != rec.params.node_count || rec.landmarks.len() != n {
            return Err(NavError::Load(format!(
                "world {}: {} positions / {} landmarks for node_count {}",
                rec.seed,
                n,
                rec.landmarks.len(),
                rec.params.node_count
            )));
        }
        if rec.landmarks.iter().any(|&l| l >= rec.params.landmark_count) {
            return Err(NavError::Load(format!("world {}: landmark id out of range", rec.seed)));
        }
        let mut adjacency = vec![Vec::new(); n];
        let mut edges = Vec::with_capacity(rec.edges.len());
        for &[a, b] in &rec.edges {
            if a >= n || b >= n || a == b {
                return Err(NavError::Load(format!("world {}: bad edge ({a}, {b})", rec.seed)));
            }
            let length = distance(rec.positions[a], rec.positions[b]);
            adjacency[a].push((b, length));
            adjacency[b].push((a, length));
            edges.push(Edge { a, b, length });
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|&(v, _)| v);
            adj.dedup_by_key(|&mut (v, _)| v);
        }
        let mut dist = vec![f64::INFINITY; n * n];
        let mut prev = vec![None; n * n];
        for s in 0..n {
            let (d, p) = dijkstra_filtered(&adjacency, s, |_| true);
            dist[s * n..(s + 1) * n].copy_from_slice(&d);
            prev[s * n..(s + 1) * n].copy_from_slice(&p);
        }
        if dist[..n].iter().any(|d| d.is_infinite()) {
            return Err(NavError::Generation(format!("world {} is not connected", rec.seed)));
        }
        let mut world = WorldGraph {
            seed: rec.seed,
            params: rec.params,
            positions: rec.positions,
            edges,
            landmarks: rec.landmarks,
            adjacency,
            view_features: Vec::new(),
            dist,
            prev,
        };
        world.view_features = world.compute_view_features()?;
        Ok(world)
    }

    pub fn to_record(&self) -> WorldRecord {
        WorldRecord {
            seed: self.seed,
            params: self.params.clone(),
            positions: self.positions.clone(),
            edges: self.edges.iter().map(|e| [e.a, e.b]).collect(),
            landmarks: self.landmarks.clone(),
        }
    }

    fn compute_view_features(&self) -> Result<Vec<Tensor>> {
        let k = self.params.view_count;
        let dim = self.params.view_dim;
        let noise = Normal::new(0.0, self.params.feature_noise.max(f64::MIN_POSITIVE))
            .map_err(|e| NavError::Generation(e.to_string()))?;
        let mut rng = rng_for(self.seed, &[label("world-views")]);
        let mut out = Vec::with_capacity(self.node_count());
        for v in 0..self.node_count() {
            let mut t = Tensor::zeros(&[k, dim]);
            {
                let data = t.data_mut();
                for s in 0..k {
                    data[s * dim + self.landmarks[v]] += 0.3;
                }
                for &(u, _) in &self.adjacency[v] {
                    let s = sector_of(bearing(self.positions[v], self.positions[u]), k);
                    data[s * dim + self.landmarks[u]] += 1.0;
                }
                if self.params.feature_noise > 0.0 {
                    for x in data.iter_mut() {
                        *x += noise.sample(&mut rng);
                    }
                }
            }
            out.push(t);
        }
        Ok(out)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn contains(&self, v: NodeId) -> bool {
        v < self.node_count()
    }

    pub fn position(&self, v: NodeId) -> Point {
        self.positions[v]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn adjacency(&self) -> &[Vec<(NodeId, f64)>] {
        &self.adjacency
    }

    /// Neighbours of `v` with edge lengths, sorted by node id.
    pub fn neighbors(&self, v: NodeId) -> &[(NodeId, f64)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency[v].len()
    }

    pub fn edge_length(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|&&(v, _)| v == b)
            .map(|&(_, w)| w)
    }

    pub fn landmark(&self, v: NodeId) -> usize {
        self.landmarks[v]
    }

    /// `K × view_dim` view features of node `v`.
    pub fn view_features(&self, v: NodeId) -> &Tensor {
        &self.view_features[v]
    }

    /// View sector of `v` facing its neighbour `u`.
    pub fn sector_towards(&self, v: NodeId, u: NodeId) -> usize {
        sector_of(bearing(self.positions[v], self.positions[u]), self.params.view_count)
    }

    /// Shortest-path length; `f64::INFINITY` for a disconnected or unknown pair.
    pub fn geodesic(&self, a: NodeId, b: NodeId) -> f64 {
        let n = self.node_count();
        if a >= n || b >= n {
            return f64::INFINITY;
        }
        self.dist[a * n + b]
    }

    pub fn shortest_path(&self, a: NodeId, b: NodeId) -> Option<Vec<NodeId>> {
        let n = self.node_count();
        if a >= n || b >= n {
            return None;
        }
        trace_back(&self.prev[a * n..(a + 1) * n], a, b)
    }

    /// Sum of edge lengths along `path`; errors if consecutive nodes are not adjacent.
    pub fn path_length(&self, path: &[NodeId]) -> Result<f64> {
        let mut total = 0.0;
        for w in path.windows(2) {
            total += self.edge_length(w[0], w[1]).ok_or_else(|| {
                NavError::Contract(format!("nodes {} and {} are not adjacent", w[0], w[1]))
            })?;
        }
        Ok(total)
    }

    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        self.dist[..n].iter().all(|d| d.is_finite())
    }
}

/// Worlds indexed by seed.
#[derive(Debug, Clone, Default)]
pub struct WorldSet {
    worlds: BTreeMap<u64, WorldGraph>,
}

impl WorldSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, w: WorldGraph) {
        self.worlds.insert(w.seed(), w);
    }

    pub fn get(&self, seed: u64) -> Result<&WorldGraph> {
        self.worlds
            .get(&seed)
            .ok_or_else(|| NavError::Load(format!("world {seed} is not loaded")))
    }

    pub fn len(&self) -> usize {
        self.worlds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.worlds.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &WorldGraph> {
        self.worlds.values()
    }
}

impl FromIterator<WorldGraph> for WorldSet {
    fn from_iter<I: IntoIterator<Item = WorldGraph>>(iter: I) -> Self {
        let mut s = WorldSet::new();
        for w in iter {
            s.insert(w);
        }
        s
    }
}
