//! Per-class k-nearest-neighbor proximity graphs with inverse-distance edge
//! weights, weak-edge filtering, and an on-disk cache.

use std::collections::BinaryHeap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Weight assigned to coincident points (inverse distance is capped here).
pub const W_MAX: f64 = 1e6;

/// Undirected weighted graph over data points of one class.
///
/// Adjacency lists are kept sorted by neighbor index and always symmetric:
/// edge (i, j) implies edge (j, i) with the same weight. Node volumes are all
/// 1.0 at the finest level and accumulate mass during coarsening.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityGraph {
    adjacency: Vec<Vec<(u32, f64)>>,
    pub volumes: Vec<f64>,
}

impl ProximityGraph {
    /// Builds a graph from undirected edge triples, deduplicating and
    /// symmetrizing. Self-loops and non-positive weights are rejected.
    pub fn from_edges(
        node_count: usize,
        edges: impl IntoIterator<Item = (u32, u32, f64)>,
        volumes: Vec<f64>,
    ) -> Result<Self> {
        if volumes.len() != node_count {
            return Err(Error::Graph(format!(
                "{} volumes for {} nodes",
                volumes.len(),
                node_count
            )));
        }
        if let Some(v) = volumes.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Graph(format!("non-positive volume {v}")));
        }
        let mut canonical: Vec<(u32, u32, f64)> = Vec::new();
        for (i, j, w) in edges {
            if i as usize >= node_count || j as usize >= node_count {
                return Err(Error::Graph(format!(
                    "edge ({i}, {j}) out of range for {node_count} nodes"
                )));
            }
            if i == j {
                return Err(Error::Graph(format!("self-loop at node {i}")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Graph(format!("edge ({i}, {j}) has weight {w}")));
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            canonical.push((a, b, w));
        }
        canonical.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        canonical.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        let mut adjacency = vec![Vec::new(); node_count];
        for (i, j, w) in canonical {
            adjacency[i as usize].push((j, w));
            adjacency[j as usize].push((i, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|e| e.0);
        }
        Ok(ProximityGraph { adjacency, volumes })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(u32, f64)] {
        &self.adjacency[i]
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Sum of edge weights incident to node `i`.
    pub fn weighted_degree(&self, i: usize) -> f64 {
        self.adjacency[i].iter().map(|&(_, w)| w).sum()
    }

    /// Undirected edge list with i < j, in canonical order.
    pub fn edges(&self) -> Vec<(u32, u32, f64)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (i, list) in self.adjacency.iter().enumerate() {
            for &(j, w) in list {
                if (i as u32) < j {
                    out.push((i as u32, j, w));
                }
            }
        }
        out
    }

    /// Subgraph induced on `keep` (ascending node indices). Node `t` of the
    /// result corresponds to `keep[t]`; edges with a dropped endpoint vanish.
    pub fn induced_subgraph(&self, keep: &[usize]) -> ProximityGraph {
        let mut remap = vec![u32::MAX; self.node_count()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new as u32;
        }
        let mut edges = Vec::new();
        for &old in keep {
            for &(j, w) in &self.adjacency[old] {
                let a = remap[old];
                let b = remap[j as usize];
                if b != u32::MAX && a < b {
                    edges.push((a, b, w));
                }
            }
        }
        let volumes = keep.iter().map(|&i| self.volumes[i]).collect();
        ProximityGraph::from_edges(keep.len(), edges, volumes)
            .expect("induced subgraph preserves validity")
    }

    /// Checks symmetry, positivity and sortedness. Used by tests.
    pub fn validate(&self) -> Result<()> {
        for (i, list) in self.adjacency.iter().enumerate() {
            let mut prev: Option<u32> = None;
            for &(j, w) in list {
                if let Some(p) = prev {
                    if j <= p {
                        return Err(Error::Graph(format!("node {i} adjacency not sorted")));
                    }
                }
                prev = Some(j);
                if !(w > 0.0) {
                    return Err(Error::Graph(format!("edge ({i}, {j}) weight {w}")));
                }
                let back = &self.adjacency[j as usize];
                match back.binary_search_by_key(&(i as u32), |e| e.0) {
                    Ok(pos) if back[pos].1 == w => {}
                    _ => return Err(Error::Graph(format!("edge ({i}, {j}) not symmetric"))),
                }
            }
        }
        if self.volumes.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Graph("non-positive volume".into()));
        }
        Ok(())
    }
}

/// Neighbor search flavor for graph construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KnnMode {
    /// Brute-force scan; the reference result.
    Exact,
    /// Randomized k-means tree with bounded backtracking.
    Approximate,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Builds the k-NN proximity graph: nodes i and j are adjacent when either is
/// among the k nearest (Euclidean) neighbors of the other; the weight is the
/// inverse distance, capped at [`W_MAX`] for coincident points. All volumes
/// start at 1.0.
pub fn build_knn_graph(points: &[Vec<f64>], k: usize, mode: KnnMode) -> Result<ProximityGraph> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Graph(format!("need at least 2 points, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::Graph(format!("k = {k} out of range for n = {n}")));
    }
    let neighbor_lists: Vec<Vec<(u32, f64)>> = match mode {
        KnnMode::Exact => (0..n)
            .into_par_iter()
            .map(|i| exact_knn(points, i, k))
            .collect(),
        KnnMode::Approximate => {
            let tree = KMeansTree::build(points);
            (0..n)
                .into_par_iter()
                .map(|i| tree.knn_of_point(points, i, k))
                .collect()
        }
    };
    let mut edges = Vec::with_capacity(n * k);
    for (i, list) in neighbor_lists.iter().enumerate() {
        for &(j, d2) in list {
            let w = (1.0 / d2.sqrt()).min(W_MAX);
            edges.push((i as u32, j, w));
        }
    }
    ProximityGraph::from_edges(n, edges, vec![1.0; n])
}

/// k nearest neighbors of point `i` by full scan; returns (index, squared
/// distance) pairs. Ties are broken by ascending index.
fn exact_knn(points: &[Vec<f64>], i: usize, k: usize) -> Vec<(u32, f64)> {
    let mut heap: BinaryHeap<(OrdF64, u32)> = BinaryHeap::with_capacity(k + 1);
    for (j, p) in points.iter().enumerate() {
        if j == i {
            continue;
        }
        let d2 = sq_dist(&points[i], p);
        heap.push((OrdF64(d2), j as u32));
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut out: Vec<(u32, f64)> = heap.into_iter().map(|(d, j)| (j, d.0)).collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

/// Total-ordered f64 key for heaps (all our distances are finite).
#[derive(Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

const TREE_BRANCHING: usize = 32;
const TREE_LEAF_SIZE: usize = 64;
const TREE_KMEANS_ITERS: usize = 5;
/// Candidate points examined per query during backtracking.
const TREE_CHECKS: usize = 512;
const TREE_SEED: u64 = 0x6d6c_7376_6d5f_6b6e;

enum TreeNode {
    Leaf(Vec<u32>),
    Internal {
        centers: Vec<Vec<f64>>,
        children: Vec<TreeNode>,
    },
}

/// Frontier entry for best-bin-first search, ordered by distance with an
/// insertion tick as a deterministic tie-break.
struct FrontierItem<'a> {
    dist: OrdF64,
    tick: u64,
    node: &'a TreeNode,
}

impl PartialEq for FrontierItem<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.tick == other.tick
    }
}
impl Eq for FrontierItem<'_> {}
impl PartialOrd for FrontierItem<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for FrontierItem<'_> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed so the BinaryHeap pops the nearest branch first.
        other
            .dist
            .cmp(&self.dist)
            .then(other.tick.cmp(&self.tick))
    }
}

/// Single randomized k-means tree standing in for a full ANN library:
/// branching 32, leaf size 64, best-bin-first search over a bounded number
/// of candidates.
struct KMeansTree {
    root: TreeNode,
}

impl KMeansTree {
    fn build(points: &[Vec<f64>]) -> Self {
        let indices: Vec<u32> = (0..points.len() as u32).collect();
        KMeansTree {
            root: build_node(points, indices, TREE_SEED),
        }
    }

    /// k nearest neighbors of `points[i]` (excluding i), as (index, squared
    /// distance) pairs sorted by distance.
    fn knn_of_point(&self, points: &[Vec<f64>], i: usize, k: usize) -> Vec<(u32, f64)> {
        let query = &points[i];
        // Max-heap of the best k candidates seen so far.
        let mut best: BinaryHeap<(OrdF64, u32)> = BinaryHeap::with_capacity(k + 1);
        // Unexplored branches, nearest center first.
        let mut frontier: BinaryHeap<FrontierItem> = BinaryHeap::new();
        let mut tick = 0u64;
        frontier.push(FrontierItem {
            dist: OrdF64(0.0),
            tick,
            node: &self.root,
        });
        let mut checked = 0usize;
        while let Some(FrontierItem { node, .. }) = frontier.pop() {
            match node {
                TreeNode::Leaf(members) => {
                    for &j in members {
                        if j as usize == i {
                            continue;
                        }
                        let d2 = sq_dist(query, &points[j as usize]);
                        best.push((OrdF64(d2), j));
                        if best.len() > k {
                            best.pop();
                        }
                        checked += 1;
                    }
                    if checked >= TREE_CHECKS && best.len() == k.min(points.len() - 1) {
                        break;
                    }
                }
                TreeNode::Internal { centers, children } => {
                    for (c, child) in centers.iter().zip(children) {
                        tick += 1;
                        frontier.push(FrontierItem {
                            dist: OrdF64(sq_dist(query, c)),
                            tick,
                            node: child,
                        });
                    }
                }
            }
        }
        let mut out: Vec<(u32, f64)> = best.into_iter().map(|(d, j)| (j, d.0)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }
}

fn build_node(points: &[Vec<f64>], indices: Vec<u32>, seed: u64) -> TreeNode {
    if indices.len() <= TREE_LEAF_SIZE {
        return TreeNode::Leaf(indices);
    }
    let b = TREE_BRANCHING.min(indices.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = indices
        .choose_multiple(&mut rng, b)
        .map(|&i| points[i as usize].clone())
        .collect();
    let mut assignment = vec![0usize; indices.len()];
    for _ in 0..TREE_KMEANS_ITERS {
        for (slot, &idx) in indices.iter().enumerate() {
            assignment[slot] = nearest_center(&points[idx as usize], &centers);
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (slot, &idx) in indices.iter().enumerate() {
            let c = assignment[slot];
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(&points[idx as usize]) {
                *s += v;
            }
        }
        for (c, count) in counts.iter().enumerate() {
            if *count > 0 {
                for s in &mut sums[c] {
                    *s /= *count as f64;
                }
                centers[c] = std::mem::take(&mut sums[c]);
            }
        }
    }
    for (slot, &idx) in indices.iter().enumerate() {
        assignment[slot] = nearest_center(&points[idx as usize], &centers);
    }
    let mut clusters: Vec<Vec<u32>> = vec![Vec::new(); centers.len()];
    for (slot, &idx) in indices.iter().enumerate() {
        clusters[assignment[slot]].push(idx);
    }
    let mut kept_centers = Vec::new();
    let mut kept_clusters = Vec::new();
    for (c, cluster) in clusters.into_iter().enumerate() {
        if !cluster.is_empty() {
            kept_centers.push(centers[c].clone());
            kept_clusters.push(cluster);
        }
    }
    if kept_clusters.len() < 2 {
        // Degenerate split (e.g. many coincident points): stop here.
        return TreeNode::Leaf(indices);
    }
    let children: Vec<TreeNode> = kept_clusters
        .into_par_iter()
        .enumerate()
        .map(|(c, cluster)| {
            let child_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(c as u64 + 1);
            build_node(points, cluster, child_seed)
        })
        .collect();
    TreeNode::Internal {
        centers: kept_centers,
        children,
    }
}

fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Removes edges that are weak at both endpoints: (i, j) goes away iff
/// w_ij < theta * avg(i's weights) and w_ij < theta * avg(j's weights).
/// Averages come from the pre-filter graph, so removal is simultaneous.
/// Node set and volumes are unchanged; isolated nodes may remain.
pub fn filter_weak_edges(g: &ProximityGraph, theta: f64) -> Result<ProximityGraph> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::Graph(format!("theta = {theta} outside [0, 1)")));
    }
    let avg: Vec<f64> = (0..g.node_count())
        .map(|i| {
            let deg = g.neighbors(i).len();
            if deg == 0 {
                0.0
            } else {
                g.weighted_degree(i) / deg as f64
            }
        })
        .collect();
    let edges = g.edges().into_iter().filter(|&(i, j, w)| {
        !(w < theta * avg[i as usize] && w < theta * avg[j as usize])
    });
    ProximityGraph::from_edges(g.node_count(), edges, g.volumes.clone())
}

const CACHE_MAGIC: &str = "MLSVMKNN1";

/// Content hash binding a cache file to the exact input matrix and search
/// parameters.
pub fn knn_content_hash(points: &[Vec<f64>], k: usize, mode: KnnMode) -> String {
    let mut hasher = Sha256::new();
    hasher.update((points.len() as u64).to_le_bytes());
    hasher.update((points.first().map_or(0, Vec::len) as u64).to_le_bytes());
    hasher.update((k as u64).to_le_bytes());
    hasher.update([match mode {
        KnnMode::Exact => 0u8,
        KnnMode::Approximate => 1u8,
    }]);
    for p in points {
        for v in p {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a graph plus its content hash as versioned text.
pub fn write_knn_cache(g: &ProximityGraph, content_hash: &str) -> String {
    let mut out = String::new();
    out.push_str(CACHE_MAGIC);
    out.push('\n');
    out.push_str(&format!("hash {content_hash}\n"));
    out.push_str(&format!("nodes {}\n", g.node_count()));
    let edges = g.edges();
    out.push_str(&format!("edges {}\n", edges.len()));
    for (i, j, w) in edges {
        out.push_str(&format!("{i} {j} {w}\n"));
    }
    out
}

/// Parses cache text, rejecting unknown versions and malformed bodies.
/// Returns the stored content hash and the graph (unit volumes).
pub fn parse_knn_cache(text: &str) -> Result<(String, ProximityGraph)> {
    let mut lines = text.lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::CacheFormat("empty file".into()))?;
    if magic != CACHE_MAGIC {
        return Err(Error::CacheFormat(format!(
            "unknown version {magic:?}, expected {CACHE_MAGIC}"
        )));
    }
    let hash = expect_field(lines.next(), "hash")?;
    let nodes: usize = expect_field(lines.next(), "nodes")?
        .parse()
        .map_err(|_| Error::CacheFormat("bad node count".into()))?;
    if nodes > 100_000_000 {
        return Err(Error::CacheFormat(format!("implausible node count {nodes}")));
    }
    let edge_count: usize = expect_field(lines.next(), "edges")?
        .parse()
        .map_err(|_| Error::CacheFormat("bad edge count".into()))?;
    if edge_count > 1_000_000_000 {
        return Err(Error::CacheFormat(format!(
            "implausible edge count {edge_count}"
        )));
    }
    let mut edges = Vec::with_capacity(edge_count.min(1 << 20));
    for _ in 0..edge_count {
        let line = lines
            .next()
            .ok_or_else(|| Error::CacheFormat("truncated edge list".into()))?;
        let bad = || Error::CacheFormat(format!("bad edge line {line:?}"));
        let mut parts = line.split_ascii_whitespace();
        let i: u32 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let j: u32 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let w: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        edges.push((i, j, w));
    }
    let graph = ProximityGraph::from_edges(nodes, edges, vec![1.0; nodes])
        .map_err(|e| Error::CacheFormat(e.to_string()))?;
    Ok((hash.to_string(), graph))
}

fn expect_field<'a>(line: Option<&'a str>, name: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| Error::CacheFormat(format!("missing {name} line")))?;
    line.strip_prefix(name)
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::CacheFormat(format!("missing {name} line")))
}

/// Loads a cache file if it exists and its stored hash matches.
pub fn load_knn_cache(path: &Path, expected_hash: &str) -> Result<Option<ProximityGraph>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (hash, graph) = parse_knn_cache(&text)?;
    if hash != expected_hash {
        return Ok(None);
    }
    Ok(Some(graph))
}

/// Writes a cache file for later [`load_knn_cache`].
pub fn save_knn_cache(path: &Path, g: &ProximityGraph, content_hash: &str) -> Result<()> {
    std::fs::write(path, write_knn_cache(g, content_hash)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pts_1d(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn one_dimensional_1nn_edges() {
        let g = build_knn_graph(&pts_1d(&[0.0, 1.0, 3.0]), 1, KnnMode::Exact).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.neighbors(0), &[(1, 1.0)]);
        assert_eq!(g.neighbors(2), &[(1, 0.5)]);
        assert_eq!(g.neighbors(1), &[(0, 1.0), (2, 0.5)]);
        assert!(g.volumes.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn duplicate_points_capped_weight() {
        let g = build_knn_graph(&pts_1d(&[2.0, 2.0]), 1, KnnMode::Exact).unwrap();
        assert_eq!(g.neighbors(0), &[(1, W_MAX)]);
    }

    #[test]
    fn k_at_least_n_is_error() {
        assert!(build_knn_graph(&pts_1d(&[0.0, 1.0]), 2, KnnMode::Exact).is_err());
    }

    fn brute_force_knn(points: &[Vec<f64>], i: usize, k: usize) -> Vec<u32> {
        let mut d: Vec<(f64, u32)> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, p)| (sq_dist(&points[i], p), j as u32))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
        d.into_iter().map(|(_, j)| j).collect()
    }

    #[test]
    fn exact_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &n in &[20usize, 137, 500] {
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let k = 4;
            let g = build_knn_graph(&points, k, KnnMode::Exact).unwrap();
            let mut expected = std::collections::BTreeSet::new();
            for i in 0..n {
                for j in brute_force_knn(&points, i, k) {
                    let (a, b) = if (i as u32) < j { (i as u32, j) } else { (j, i as u32) };
                    expected.insert((a, b));
                }
            }
            let got: std::collections::BTreeSet<(u32, u32)> =
                g.edges().into_iter().map(|(i, j, _)| (i, j)).collect();
            assert_eq!(got, expected, "n = {n}");
        }
    }

    #[test]
    fn approximate_recovers_most_exact_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let points: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let exact = build_knn_graph(&points, 10, KnnMode::Exact).unwrap();
        let approx = build_knn_graph(&points, 10, KnnMode::Approximate).unwrap();
        let exact_edges: std::collections::BTreeSet<(u32, u32)> =
            exact.edges().into_iter().map(|(i, j, _)| (i, j)).collect();
        let approx_edges: std::collections::BTreeSet<(u32, u32)> =
            approx.edges().into_iter().map(|(i, j, _)| (i, j)).collect();
        let hit = exact_edges.intersection(&approx_edges).count();
        let recall = hit as f64 / exact_edges.len() as f64;
        assert!(recall >= 0.95, "recall {recall}");
    }

    #[test]
    fn weak_edge_removed_only_when_weak_at_both_ends() {
        // Two hubs with weights {1, 0.001, 1} each, joined by the 0.001
        // edge; it is weak relative to both endpoint averages (0.667).
        let g = ProximityGraph::from_edges(
            6,
            vec![
                (0, 1, 1.0),
                (0, 2, 1.0),
                (0, 3, 0.001),
                (3, 4, 1.0),
                (3, 5, 1.0),
            ],
            vec![1.0; 6],
        )
        .unwrap();
        let f = filter_weak_edges(&g, 0.05).unwrap();
        assert_eq!(f.edge_count(), 4);
        assert!(!f.neighbors(0).iter().any(|&(j, _)| j == 3));
        assert_eq!(f.node_count(), 6);
    }

    #[test]
    fn theta_zero_keeps_graph() {
        let g = build_knn_graph(&pts_1d(&[0.0, 1.0, 3.0, 7.0]), 2, KnnMode::Exact).unwrap();
        let f = filter_weak_edges(&g, 0.0).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn edge_weak_on_one_endpoint_survives() {
        // (0,1) has weight 0.01: weak relative to node 0's average (~0.67)
        // but node 1's average is 0.01, so the conjunction fails.
        let g = ProximityGraph::from_edges(
            4,
            vec![(0, 1, 0.01), (0, 2, 1.0), (0, 3, 1.0)],
            vec![1.0; 4],
        )
        .unwrap();
        let f = filter_weak_edges(&g, 0.5).unwrap();
        assert!(f.neighbors(1).iter().any(|&(j, _)| j == 0));
    }

    #[test]
    fn repeated_filtering_shrinks_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut g = build_knn_graph(&points, 6, KnnMode::Exact).unwrap();
        let mut removed_prev = usize::MAX;
        let mut passes = 0;
        loop {
            let next = filter_weak_edges(&g, 0.3).unwrap();
            let removed = g.edge_count() - next.edge_count();
            assert!(removed <= removed_prev, "pass {passes} removed {removed}");
            removed_prev = removed;
            passes += 1;
            if removed == 0 || passes > 50 {
                break;
            }
            g = next;
        }
        println!("weak-edge filter reached a fixed point after {passes} passes");
        assert!(passes <= 50);
    }

    #[test]
    fn induced_subgraph_drops_outside_edges() {
        let g = build_knn_graph(&pts_1d(&[0.0, 1.0, 2.0, 3.0]), 1, KnnMode::Exact).unwrap();
        let sub = g.induced_subgraph(&[0, 1, 3]);
        assert_eq!(sub.node_count(), 3);
        // Old edge (0,1) survives as (0,1); edges through dropped node 2 vanish.
        assert_eq!(sub.neighbors(0), &[(1, 1.0)]);
        assert!(sub.neighbors(2).is_empty());
        sub.validate().unwrap();
    }

    #[test]
    fn cache_round_trip_and_version_check() {
        let points = pts_1d(&[0.0, 1.0, 3.0]);
        let g = build_knn_graph(&points, 1, KnnMode::Exact).unwrap();
        let hash = knn_content_hash(&points, 1, KnnMode::Exact);
        let text = write_knn_cache(&g, &hash);
        let (h2, g2) = parse_knn_cache(&text).unwrap();
        assert_eq!(h2, hash);
        assert_eq!(g2, g);
        assert!(matches!(
            parse_knn_cache("MLSVMKNN9\nhash x\nnodes 0\nedges 0\n"),
            Err(Error::CacheFormat(_))
        ));
        assert!(parse_knn_cache("").is_err());
        assert!(parse_knn_cache("MLSVMKNN1\nhash h\nnodes 2\nedges 1\n0 0 1.0\n").is_err());
    }

    #[test]
    fn cache_file_reuse_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.knn");
        let points = pts_1d(&[0.0, 1.0, 3.0]);
        let g = build_knn_graph(&points, 1, KnnMode::Exact).unwrap();
        let hash = knn_content_hash(&points, 1, KnnMode::Exact);
        save_knn_cache(&path, &g, &hash).unwrap();
        assert_eq!(load_knn_cache(&path, &hash).unwrap().unwrap(), g);
        assert!(load_knn_cache(&path, "different").unwrap().is_none());
        assert!(load_knn_cache(&dir.path().join("missing"), &hash)
            .unwrap()
            .is_none());
    }

    proptest! {
        #[test]
        fn knn_graph_always_symmetric_positive(seed in 0u64..50, n in 5usize..40, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let g = build_knn_graph(&points, k.min(n - 1), KnnMode::Exact).unwrap();
            prop_assert!(g.validate().is_ok());
            let f = filter_weak_edges(&g, 0.4).unwrap();
            prop_assert!(f.validate().is_ok());
            prop_assert!(f.edge_count() <= g.edge_count());
        }
    }
}
