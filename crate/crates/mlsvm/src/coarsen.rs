//! Per-class coarsening hierarchies: AMG-style weighted aggregation (default)
//! or iterative independent sets, with imbalance handling (small classes are
//! copied unchanged while the large class keeps shrinking).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graph::{build_knn_graph, filter_weak_edges, KnnMode, ProximityGraph};
use crate::{Error, Result};

/// Sparse interpolation operator P mapping fine rows to coarse columns.
///
/// Every row sums to exactly 1 (within 1e-12); seed rows carry a single unit
/// entry in their own column. Row nonzeros are bounded by the caliber used to
/// build the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationMatrix {
    rows: Vec<Vec<(u32, f64)>>,
    n_cols: usize,
    /// Fine index of the seed owning each coarse column.
    pub seed_fine_index: Vec<u32>,
}

impl InterpolationMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Nonzero (column, value) entries of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    /// Column-major view: for each coarse column, its (row, value) support.
    pub fn columns(&self) -> Vec<Vec<(u32, f64)>> {
        let mut cols = vec![Vec::new(); self.n_cols];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                cols[c as usize].push((r as u32, v));
            }
        }
        cols
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|row| (row.iter().map(|&(_, v)| v).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Future volumes: for every node, its own volume plus the volume shares its
/// neighbors would send to it, theta_i = v_i + sum_j v_j * w_ji / deg_w(j).
/// Isolated nodes keep their own volume.
pub fn future_volumes(g: &ProximityGraph) -> Vec<f64> {
    let deg: Vec<f64> = (0..g.node_count()).map(|i| g.weighted_degree(i)).collect();
    (0..g.node_count())
        .map(|i| {
            let mut t = g.volumes[i];
            for &(j, w) in g.neighbors(i) {
                t += g.volumes[j as usize] * w / deg[j as usize];
            }
            t
        })
        .collect()
}

/// Seed selection for AMG aggregation. Nodes with future volume above
/// `eta * mean` become seeds immediately; the rest are visited in decreasing
/// recomputed future volume (ties by ascending index) and promoted whenever
/// their weight fraction towards the current seed set is at most `q`.
///
/// Returns (seeds, non-seeds), both ascending.
pub fn select_seeds(
    g: &ProximityGraph,
    future_vols: &[f64],
    q: f64,
    eta: f64,
) -> (Vec<usize>, Vec<usize>) {
    let n = g.node_count();
    let mean = future_vols.iter().sum::<f64>() / n as f64;
    let mut is_seed = vec![false; n];
    for i in 0..n {
        if future_vols[i] > eta * mean {
            is_seed[i] = true;
        }
    }
    // Recompute future volumes once over the non-seed remainder: only
    // non-seed neighbors still have volume to offer.
    let deg: Vec<f64> = (0..n).map(|i| g.weighted_degree(i)).collect();
    let mut remaining: Vec<usize> = (0..n).filter(|&i| !is_seed[i]).collect();
    let recomputed: Vec<f64> = remaining
        .iter()
        .map(|&i| {
            let mut t = g.volumes[i];
            for &(j, w) in g.neighbors(i) {
                if !is_seed[j as usize] {
                    t += g.volumes[j as usize] * w / deg[j as usize];
                }
            }
            t
        })
        .collect();
    let mut order: Vec<usize> = (0..remaining.len()).collect();
    order.sort_by(|&a, &b| {
        recomputed[b]
            .total_cmp(&recomputed[a])
            .then(remaining[a].cmp(&remaining[b]))
    });
    for &slot in &order {
        let i = remaining[slot];
        let seed_weight: f64 = g
            .neighbors(i)
            .iter()
            .filter(|&&(j, _)| is_seed[j as usize])
            .map(|&(_, w)| w)
            .sum();
        let total = deg[i];
        let ratio = if total > 0.0 { seed_weight / total } else { 0.0 };
        if ratio <= q {
            is_seed[i] = true;
        }
    }
    if !is_seed.iter().any(|&s| s) {
        // Unreachable with q >= 0, but a nonempty seed set is a contract.
        let max_i = (0..n)
            .max_by(|&a, &b| future_vols[a].total_cmp(&future_vols[b]))
            .unwrap();
        is_seed[max_i] = true;
    }
    remaining = (0..n).filter(|&i| !is_seed[i]).collect();
    let seeds = (0..n).filter(|&i| is_seed[i]).collect();
    (seeds, remaining)
}

/// Builds the interpolation matrix for a seed set: seeds get a unit entry in
/// their own column; non-seeds distribute over their seed neighbors with
/// weights w_ij / sum, truncated to the `caliber` largest weights and then
/// renormalized. A non-seed with no seed neighbor is promoted to a fresh
/// column (and can then absorb later rows).
pub fn build_interpolation(
    g: &ProximityGraph,
    seeds: &[usize],
    caliber: usize,
) -> InterpolationMatrix {
    let n = g.node_count();
    let mut col_of = vec![u32::MAX; n];
    let mut seed_fine_index: Vec<u32> = Vec::with_capacity(seeds.len());
    for &s in seeds {
        col_of[s] = seed_fine_index.len() as u32;
        seed_fine_index.push(s as u32);
    }
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        if col_of[i] != u32::MAX {
            rows[i].push((col_of[i], 1.0));
            continue;
        }
        let mut seed_neighbors: Vec<(u32, f64)> = g
            .neighbors(i)
            .iter()
            .filter(|&&(j, _)| col_of[j as usize] != u32::MAX)
            .map(|&(j, w)| (col_of[j as usize], w))
            .collect();
        if seed_neighbors.is_empty() {
            // No seed to attach to: promote this node.
            col_of[i] = seed_fine_index.len() as u32;
            seed_fine_index.push(i as u32);
            rows[i].push((col_of[i], 1.0));
            continue;
        }
        seed_neighbors.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        seed_neighbors.truncate(caliber.max(1));
        let total: f64 = seed_neighbors.iter().map(|&(_, w)| w).sum();
        let mut row: Vec<(u32, f64)> = seed_neighbors
            .into_iter()
            .map(|(c, w)| (c, w / total))
            .collect();
        row.sort_by_key(|e| e.0);
        rows[i] = row;
    }
    InterpolationMatrix {
        rows,
        n_cols: seed_fine_index.len(),
        seed_fine_index,
    }
}

/// AMG coarsening knobs.
#[derive(Debug, Clone)]
pub struct AmgParams {
    /// Seed coupling threshold (Q).
    pub q: f64,
    /// Future-volume outlier factor (eta).
    pub eta: f64,
    /// Caliber: max nonzeros per interpolation row (r).
    pub caliber: usize,
    /// Weak-edge filter threshold applied to the coarse graph.
    pub theta: f64,
    /// Keep the seed's original feature vector instead of the aggregate
    /// centroid (sparsity-preserving variant).
    pub sparse_points: bool,
}

impl Default for AmgParams {
    fn default() -> Self {
        AmgParams {
            q: 0.5,
            eta: 2.0,
            caliber: 1,
            theta: 0.05,
            sparse_points: false,
        }
    }
}

/// One AMG coarsening step: seeds, interpolation, aggregated points, volumes
/// and Galerkin coarse edges (self-loops dropped), then weak-edge filtering.
///
/// Coarse volumes are v_q = sum_j v_j P_jq, conserving total volume; coarse
/// points are the volume-weighted aggregate centroids (or the seed's own
/// features in sparse mode).
pub fn coarsen_amg(
    points: &[Vec<f64>],
    g: &ProximityGraph,
    params: &AmgParams,
) -> Result<(Vec<Vec<f64>>, ProximityGraph, InterpolationMatrix)> {
    let n = g.node_count();
    let theta_vec = future_volumes(g);
    let (seeds, _) = select_seeds(g, &theta_vec, params.q, params.eta);
    let p = build_interpolation(g, &seeds, params.caliber);
    let nc = p.n_cols();
    if nc >= n {
        return Err(Error::CoarseningStagnation { coarse: nc, fine: n });
    }
    let dim = points.first().map_or(0, Vec::len);

    let mut coarse_volumes = vec![0.0f64; nc];
    let mut weighted_points = vec![vec![0.0f64; dim]; nc];
    for (j, row) in (0..n).map(|j| (j, p.row(j))) {
        let vj = g.volumes[j];
        for &(c, val) in row {
            let m = vj * val;
            coarse_volumes[c as usize] += m;
            for (acc, x) in weighted_points[c as usize].iter_mut().zip(&points[j]) {
                *acc += m * x;
            }
        }
    }
    let coarse_points: Vec<Vec<f64>> = if params.sparse_points {
        p.seed_fine_index
            .iter()
            .map(|&s| points[s as usize].clone())
            .collect()
    } else {
        weighted_points
            .into_iter()
            .zip(&coarse_volumes)
            .map(|(acc, &v)| acc.into_iter().map(|x| x / v).collect())
            .collect()
    };

    // Coarse edge weights w_pq = sum_{k != l} P_kp w_kl P_lq; visiting each
    // undirected fine edge once picks up both ordered contributions.
    let mut acc: std::collections::BTreeMap<(u32, u32), f64> = std::collections::BTreeMap::new();
    for (k, l, w) in g.edges() {
        for &(ck, pk) in p.row(k as usize) {
            for &(cl, pl) in p.row(l as usize) {
                if ck == cl {
                    continue;
                }
                let key = if ck < cl { (ck, cl) } else { (cl, ck) };
                *acc.entry(key).or_insert(0.0) += pk * w * pl;
            }
        }
    }
    let coarse_graph = ProximityGraph::from_edges(
        nc,
        acc.into_iter().map(|((a, b), w)| (a, b, w)),
        coarse_volumes,
    )?;
    let coarse_graph = filter_weak_edges(&coarse_graph, params.theta)?;
    Ok((coarse_points, coarse_graph, p))
}

/// Iterative-independent-set coarsening: repeated random maximal independent
/// set passes accumulate surviving points until the budget q * n is reached
/// (selection stops as soon as the accumulated count would pass it).
/// Surviving points keep their features and volumes; the coarse graph is a
/// k-NN graph rebuilt on them.
///
/// Returns the ascending fine indices of the coarse points and their graph.
pub fn coarsen_iis(
    points: &[Vec<f64>],
    g: &ProximityGraph,
    q: f64,
    k_nn: usize,
    seed: u64,
) -> Result<(Vec<usize>, ProximityGraph)> {
    let n = g.node_count();
    let budget = q * n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = vec![false; n];
    let mut selected_count = 0usize;
    let mut remaining: Vec<usize> = (0..n).collect();
    'passes: while !remaining.is_empty() {
        let mut order = remaining.clone();
        order.shuffle(&mut rng);
        let mut blocked = vec![false; n];
        let mut picked_this_pass = false;
        for &i in &order {
            if blocked[i] {
                continue;
            }
            if (selected_count as f64) >= budget {
                break 'passes;
            }
            selected[i] = true;
            selected_count += 1;
            picked_this_pass = true;
            blocked[i] = true;
            for &(j, _) in g.neighbors(i) {
                blocked[j as usize] = true;
            }
        }
        if !picked_this_pass {
            break;
        }
        remaining.retain(|&i| !selected[i]);
    }
    let coarse: Vec<usize> = (0..n).filter(|&i| selected[i]).collect();
    let coarse_graph = if coarse.len() < 2 {
        ProximityGraph::from_edges(
            coarse.len(),
            Vec::new(),
            coarse.iter().map(|&i| g.volumes[i]).collect(),
        )?
    } else {
        let sub_points: Vec<Vec<f64>> = coarse.iter().map(|&i| points[i].clone()).collect();
        let k = k_nn.min(coarse.len() - 1);
        let mut rebuilt = build_knn_graph(&sub_points, k, KnnMode::Exact)?;
        rebuilt.volumes = coarse.iter().map(|&i| g.volumes[i]).collect();
        rebuilt
    };
    Ok((coarse, coarse_graph))
}

/// Coarsening flavor for the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum CoarseningMode {
    Amg,
    SparseAmg,
    Iis,
}

/// How a class level was derived from the next-finer one.
#[derive(Debug, Clone)]
pub enum LevelLink {
    /// The finest level has no parent.
    Finest,
    /// AMG aggregation with this interpolation matrix.
    Amg(InterpolationMatrix),
    /// IIS selection: fine indices of the surviving points.
    Iis(Vec<usize>),
    /// Small class copied unchanged (imbalance handling).
    Copied,
}

/// One class at one level of the hierarchy.
#[derive(Debug, Clone)]
pub struct ClassLevel {
    pub points: Vec<Vec<f64>>,
    pub graph: ProximityGraph,
    pub link: LevelLink,
    pub copied_from_finer: bool,
}

impl ClassLevel {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_volume(&self) -> f64 {
        self.graph.volumes.iter().sum()
    }
}

/// Both classes at one level.
#[derive(Debug, Clone)]
pub struct Level {
    pub plus: ClassLevel,
    pub minus: ClassLevel,
}

impl Level {
    pub fn class(&self, positive: bool) -> &ClassLevel {
        if positive {
            &self.plus
        } else {
            &self.minus
        }
    }

    pub fn size(&self) -> usize {
        self.plus.len() + self.minus.len()
    }
}

/// Chain of levels ordered finest (index 0) to coarsest.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
}

impl Hierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn coarsest(&self) -> &Level {
        self.levels.last().expect("hierarchy has at least one level")
    }
}

/// Hierarchy construction knobs.
#[derive(Debug, Clone)]
pub struct HierarchyConfig {
    pub mode: CoarseningMode,
    pub q: f64,
    pub eta: f64,
    pub caliber: usize,
    pub theta: f64,
    pub k_nn: usize,
    /// Per-class floors: a class at or below its floor is copied, not
    /// coarsened.
    pub m_plus: usize,
    pub m_minus: usize,
    /// Stop once the combined level size is at most this.
    pub coarsest_size: usize,
    pub seed: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            mode: CoarseningMode::Amg,
            q: 0.5,
            eta: 2.0,
            caliber: 1,
            theta: 0.05,
            k_nn: 10,
            m_plus: 300,
            m_minus: 300,
            coarsest_size: 500,
            seed: 0,
        }
    }
}

const MAX_DEPTH: usize = 64;

/// Coarsens both classes independently until each is at or below its floor
/// or the combined size reaches the coarsest threshold. A class at or below
/// its floor is copied unchanged (flagged) while the other keeps shrinking.
pub fn build_hierarchy(
    plus_points: Vec<Vec<f64>>,
    minus_points: Vec<Vec<f64>>,
    g_plus: ProximityGraph,
    g_minus: ProximityGraph,
    cfg: &HierarchyConfig,
) -> Result<Hierarchy> {
    let finest = Level {
        plus: ClassLevel {
            points: plus_points,
            graph: g_plus,
            link: LevelLink::Finest,
            copied_from_finer: false,
        },
        minus: ClassLevel {
            points: minus_points,
            graph: g_minus,
            link: LevelLink::Finest,
            copied_from_finer: false,
        },
    };
    let mut levels = vec![finest];
    loop {
        let current = levels.last().unwrap();
        let (np, nm) = (current.plus.len(), current.minus.len());
        let both_small = np <= cfg.m_plus && nm <= cfg.m_minus;
        if both_small || np + nm <= cfg.coarsest_size || levels.len() >= MAX_DEPTH {
            break;
        }
        let level_index = levels.len();
        let plus = coarsen_class(&current.plus, cfg.m_plus, cfg, level_index, 0)?;
        let minus = coarsen_class(&current.minus, cfg.m_minus, cfg, level_index, 1)?;
        levels.push(Level { plus, minus });
    }
    Ok(Hierarchy { levels })
}

fn coarsen_class(
    fine: &ClassLevel,
    floor: usize,
    cfg: &HierarchyConfig,
    level_index: usize,
    class_tag: u64,
) -> Result<ClassLevel> {
    if fine.len() <= floor {
        return Ok(ClassLevel {
            points: fine.points.clone(),
            graph: fine.graph.clone(),
            link: LevelLink::Copied,
            copied_from_finer: true,
        });
    }
    match cfg.mode {
        CoarseningMode::Amg | CoarseningMode::SparseAmg => {
            let params = AmgParams {
                q: cfg.q,
                eta: cfg.eta,
                caliber: cfg.caliber,
                theta: cfg.theta,
                sparse_points: cfg.mode == CoarseningMode::SparseAmg,
            };
            let (points, graph, p) = coarsen_amg(&fine.points, &fine.graph, &params)?;
            Ok(ClassLevel {
                points,
                graph,
                link: LevelLink::Amg(p),
                copied_from_finer: false,
            })
        }
        CoarseningMode::Iis => {
            let seed = cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(level_index as u64 * 2 + class_tag);
            let (kept, graph) = coarsen_iis(&fine.points, &fine.graph, cfg.q, cfg.k_nn, seed)?;
            if kept.len() >= fine.len() {
                return Err(Error::CoarseningStagnation {
                    coarse: kept.len(),
                    fine: fine.len(),
                });
            }
            let points = kept.iter().map(|&i| fine.points[i].clone()).collect();
            Ok(ClassLevel {
                points,
                graph,
                link: LevelLink::Iis(kept),
                copied_from_finer: false,
            })
        }
    }
}

/// Per-level accounting for the debug dump.
#[derive(Debug, Serialize)]
pub struct LevelSummary {
    pub level: usize,
    pub plus_size: usize,
    pub minus_size: usize,
    pub plus_volume: f64,
    pub minus_volume: f64,
    pub plus_edges: usize,
    pub minus_edges: usize,
    pub plus_copied: bool,
    pub minus_copied: bool,
}

/// JSON-friendly hierarchy summary (sizes, volume sums, edge counts, depth).
pub fn hierarchy_summary(h: &Hierarchy) -> serde_json::Value {
    let levels: Vec<LevelSummary> = h
        .levels
        .iter()
        .enumerate()
        .map(|(i, l)| LevelSummary {
            level: i,
            plus_size: l.plus.len(),
            minus_size: l.minus.len(),
            plus_volume: l.plus.total_volume(),
            minus_volume: l.minus.total_volume(),
            plus_edges: l.plus.graph.edge_count(),
            minus_edges: l.minus.graph.edge_count(),
            plus_copied: l.plus.copied_from_finer,
            minus_copied: l.minus.copied_from_finer,
        })
        .collect();
    serde_json::json!({
        "depth": h.depth(),
        "levels": levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Path graph a - b - c with unit weights and volumes.
    fn path3() -> ProximityGraph {
        ProximityGraph::from_edges(3, vec![(0, 1, 1.0), (1, 2, 1.0)], vec![1.0; 3]).unwrap()
    }

    #[test]
    fn future_volumes_path() {
        let t = future_volumes(&path3());
        assert!((t[0] - 1.5).abs() < 1e-12);
        assert!((t[1] - 3.0).abs() < 1e-12);
        assert!((t[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn future_volume_isolated_node() {
        let g = ProximityGraph::from_edges(3, vec![(0, 1, 2.0)], vec![1.0, 1.0, 1.0]).unwrap();
        let t = future_volumes(&g);
        assert_eq!(t[2], 1.0);
    }

    #[test]
    fn future_volumes_linear_in_volume() {
        let mut g = path3();
        let t1 = future_volumes(&g);
        g.volumes = vec![2.0; 3];
        let t2 = future_volumes(&g);
        for (a, b) in t1.iter().zip(&t2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn seed_selection_on_path() {
        let g = path3();
        let t = future_volumes(&g);
        let (seeds, rest) = select_seeds(&g, &t, 0.5, 2.0);
        assert_eq!(seeds, vec![1]);
        assert_eq!(rest, vec![0, 2]);
    }

    #[test]
    fn seed_selection_tie_breaks_by_index() {
        let g = ProximityGraph::from_edges(2, vec![(0, 1, 1.0)], vec![1.0, 1.0]).unwrap();
        let t = future_volumes(&g);
        assert_eq!(t[0], t[1]);
        let (seeds, rest) = select_seeds(&g, &t, 0.5, 2.0);
        assert_eq!(seeds, vec![0]);
        assert_eq!(rest, vec![1]);
    }

    #[test]
    fn eta_zero_selects_everything() {
        let g = path3();
        let t = future_volumes(&g);
        let (seeds, rest) = select_seeds(&g, &t, 0.5, 0.0);
        assert_eq!(seeds, vec![0, 1, 2]);
        assert!(rest.is_empty());
    }

    #[test]
    fn interpolation_path_single_seed() {
        let g = path3();
        let p = build_interpolation(&g, &[1], 1);
        assert_eq!(p.n_cols(), 1);
        for i in 0..3 {
            assert_eq!(p.row(i), &[(0, 1.0)]);
        }
        assert!(p.max_row_sum_error() < 1e-15);
    }

    #[test]
    fn interpolation_caliber_truncates_then_renormalizes() {
        // Node 2 sees seeds 0 (w=3) and 1 (w=1); caliber 1 keeps the w=3 seed.
        let g =
            ProximityGraph::from_edges(3, vec![(0, 2, 3.0), (1, 2, 1.0)], vec![1.0; 3]).unwrap();
        let p1 = build_interpolation(&g, &[0, 1], 1);
        assert_eq!(p1.row(2), &[(0, 1.0)]);
        // Large caliber: raw shares 3/4 and 1/4.
        let p2 = build_interpolation(&g, &[0, 1], 5);
        let row = p2.row(2);
        assert_eq!(row.len(), 2);
        assert!((row[0].1 - 0.75).abs() < 1e-12);
        assert!((row[1].1 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn interpolation_promotes_orphan_components() {
        // Component {2, 3} has no seed: 2 gets promoted, 3 attaches to it.
        let g =
            ProximityGraph::from_edges(4, vec![(0, 1, 1.0), (2, 3, 1.0)], vec![1.0; 4]).unwrap();
        let p = build_interpolation(&g, &[0], 2);
        assert_eq!(p.n_cols(), 2);
        assert_eq!(p.seed_fine_index, vec![0, 2]);
        assert_eq!(p.row(2), &[(1, 1.0)]);
        assert_eq!(p.row(3), &[(1, 1.0)]);
        assert!(p.max_row_sum_error() < 1e-15);
    }

    #[test]
    fn amg_collapses_path_to_centroid() {
        let points = vec![vec![0.0], vec![1.0], vec![2.0]];
        let (cp, cg, p) = coarsen_amg(&points, &path3(), &AmgParams::default()).unwrap();
        assert_eq!(cp.len(), 1);
        assert!((cp[0][0] - 1.0).abs() < 1e-12);
        assert!((cg.volumes[0] - 3.0).abs() < 1e-12);
        assert_eq!(cg.edge_count(), 0);
        assert_eq!(p.n_cols(), 1);
    }

    #[test]
    fn amg_sparse_mode_keeps_seed_features() {
        let points = vec![vec![0.0], vec![1.0], vec![2.0]];
        let params = AmgParams {
            sparse_points: true,
            ..Default::default()
        };
        let (cp, cg, p) = coarsen_amg(&points, &path3(), &params).unwrap();
        assert_eq!(cp.len(), 1);
        assert_eq!(cp[0][0], 1.0); // seed b sits at 1.0
        assert!((cg.volumes[0] - 3.0).abs() < 1e-12);
        assert_eq!(p.seed_fine_index, vec![1]);
    }

    #[test]
    fn amg_disconnected_pairs_have_no_coarse_edges() {
        let points = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let g =
            ProximityGraph::from_edges(4, vec![(0, 1, 1.0), (2, 3, 1.0)], vec![1.0; 4]).unwrap();
        let (cp, cg, p) = coarsen_amg(&points, &g, &AmgParams::default()).unwrap();
        assert_eq!(cp.len(), 2);
        assert_eq!(cg.edge_count(), 0);
        assert_eq!(p.n_cols(), 2);
        let total: f64 = cg.volumes.iter().sum();
        assert!((total - 4.0).abs() < 1e-12);
    }

    fn random_graph(n: usize, k: usize, seed: u64) -> (Vec<Vec<f64>>, ProximityGraph) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let g = build_knn_graph(&points, k, KnnMode::Exact).unwrap();
        (points, g)
    }

    #[test]
    fn amg_conserves_volume_and_row_sums() {
        for seed in 0..5 {
            let (points, mut g) = random_graph(150, 5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            g.volumes = (0..150).map(|_| rng.gen_range(0.2..3.0)).collect();
            let fine_total: f64 = g.volumes.iter().sum();
            let (_, cg, p) = coarsen_amg(&points, &g, &AmgParams::default()).unwrap();
            let coarse_total: f64 = cg.volumes.iter().sum();
            assert!((coarse_total - fine_total).abs() <= 1e-9 * fine_total);
            assert!(p.max_row_sum_error() < 1e-12);
        }
    }

    #[test]
    fn coarse_edges_match_dense_triple_product() {
        let (points, g) = random_graph(120, 4, 7);
        let params = AmgParams {
            theta: 0.0, // keep every Galerkin edge for the dense comparison
            caliber: 3,
            ..Default::default()
        };
        let (_, cg, p) = coarsen_amg(&points, &g, &params).unwrap();
        let n = g.node_count();
        let nc = p.n_cols();
        let mut w = vec![vec![0.0f64; n]; n];
        for (i, j, wt) in g.edges() {
            w[i as usize][j as usize] = wt;
            w[j as usize][i as usize] = wt;
        }
        let mut dense_p = vec![vec![0.0f64; nc]; n];
        for i in 0..n {
            for &(c, v) in p.row(i) {
                dense_p[i][c as usize] = v;
            }
        }
        // P' W P with the diagonal removed.
        let mut expected = vec![vec![0.0f64; nc]; nc];
        for a in 0..nc {
            for b in 0..nc {
                let mut s = 0.0;
                for k in 0..n {
                    if dense_p[k][a] == 0.0 {
                        continue;
                    }
                    for l in 0..n {
                        s += dense_p[k][a] * w[k][l] * dense_p[l][b];
                    }
                }
                expected[a][b] = s;
            }
        }
        for a in 0..nc {
            for b in 0..nc {
                if a == b {
                    continue;
                }
                let got = cg
                    .neighbors(a)
                    .iter()
                    .find(|&&(j, _)| j as usize == b)
                    .map_or(0.0, |&(_, w)| w);
                assert!(
                    (got - expected[a][b]).abs() < 1e-9,
                    "entry ({a}, {b}): {got} vs {}",
                    expected[a][b]
                );
            }
        }
    }

    #[test]
    fn iis_path_keeps_independent_budgeted_set() {
        let points = vec![vec![0.0], vec![1.0], vec![2.0]];
        let (kept, cg) = coarsen_iis(&points, &path3(), 0.5, 1, 42).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(cg.node_count(), 2);
    }

    #[test]
    fn iis_edgeless_graph_respects_budget() {
        let n = 40;
        let points: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let g = ProximityGraph::from_edges(n, Vec::new(), vec![1.0; n]).unwrap();
        let (kept, _) = coarsen_iis(&points, &g, 0.5, 2, 1).unwrap();
        assert_eq!(kept.len(), 20);
    }

    #[test]
    fn iis_random_graph_within_budget_bound() {
        let (points, g) = random_graph(1000, 6, 3);
        let (kept, cg) = coarsen_iis(&points, &g, 0.5, 6, 9).unwrap();
        assert!(!kept.is_empty() && kept.len() <= 500, "{}", kept.len());
        cg.validate().unwrap();
        // Volumes carried over from the fine level.
        assert!(cg.volumes.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn iis_deterministic_per_seed() {
        let (points, g) = random_graph(300, 5, 11);
        let (a, _) = coarsen_iis(&points, &g, 0.5, 5, 7).unwrap();
        let (b, _) = coarsen_iis(&points, &g, 0.5, 5, 7).unwrap();
        assert_eq!(a, b);
    }

    fn two_class_points(
        n_plus: usize,
        n_minus: usize,
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plus = (0..n_plus)
            .map(|_| (0..3).map(|_| 1.0 + rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let minus = (0..n_minus)
            .map(|_| (0..3).map(|_| -1.0 + rng.gen_range(-1.0..1.0)).collect())
            .collect();
        (plus, minus)
    }

    #[test]
    fn hierarchy_base_case_is_single_level() {
        let (plus, minus) = two_class_points(40, 40, 0);
        let gp = build_knn_graph(&plus, 4, KnnMode::Exact).unwrap();
        let gm = build_knn_graph(&minus, 4, KnnMode::Exact).unwrap();
        let h = build_hierarchy(plus, minus, gp, gm, &HierarchyConfig::default()).unwrap();
        assert_eq!(h.depth(), 1);
    }

    #[test]
    fn hierarchy_shrinks_monotonically_and_conserves_volume() {
        let (plus, minus) = two_class_points(800, 700, 5);
        let gp = build_knn_graph(&plus, 6, KnnMode::Exact).unwrap();
        let gm = build_knn_graph(&minus, 6, KnnMode::Exact).unwrap();
        let cfg = HierarchyConfig {
            m_plus: 60,
            m_minus: 60,
            coarsest_size: 100,
            ..Default::default()
        };
        let h = build_hierarchy(plus, minus, gp, gm, &cfg).unwrap();
        assert!(h.depth() >= 2);
        for w in h.levels.windows(2) {
            for (fine, coarse) in [(&w[0].plus, &w[1].plus), (&w[0].minus, &w[1].minus)] {
                if coarse.copied_from_finer {
                    assert_eq!(coarse.len(), fine.len());
                } else {
                    assert!(coarse.len() < fine.len());
                    let fv = fine.total_volume();
                    let cv = coarse.total_volume();
                    assert!((fv - cv).abs() <= 1e-9 * fv);
                }
                if let LevelLink::Amg(p) = &coarse.link {
                    assert!(p.max_row_sum_error() < 1e-12);
                }
            }
        }
        let coarsest = h.coarsest();
        assert!(
            coarsest.size() <= cfg.coarsest_size
                || (coarsest.plus.len() <= cfg.m_plus && coarsest.minus.len() <= cfg.m_minus)
        );
    }

    #[test]
    fn hierarchy_copies_small_class() {
        let (plus, minus) = two_class_points(30, 900, 2);
        let gp = build_knn_graph(&plus, 4, KnnMode::Exact).unwrap();
        let gm = build_knn_graph(&minus, 6, KnnMode::Exact).unwrap();
        let cfg = HierarchyConfig {
            m_plus: 50,
            m_minus: 50,
            coarsest_size: 80,
            ..Default::default()
        };
        let h = build_hierarchy(plus, minus, gp, gm, &cfg).unwrap();
        assert!(h.depth() >= 2);
        for level in &h.levels[1..] {
            assert!(level.plus.copied_from_finer);
            assert_eq!(level.plus.len(), 30);
        }
        let summary = hierarchy_summary(&h);
        assert_eq!(summary["depth"], serde_json::json!(h.depth()));
        assert!(summary["levels"][1]["plus_copied"].as_bool().unwrap());
    }

    #[test]
    fn hierarchy_iis_mode_runs() {
        let (plus, minus) = two_class_points(400, 400, 9);
        let gp = build_knn_graph(&plus, 5, KnnMode::Exact).unwrap();
        let gm = build_knn_graph(&minus, 5, KnnMode::Exact).unwrap();
        let cfg = HierarchyConfig {
            mode: CoarseningMode::Iis,
            m_plus: 50,
            m_minus: 50,
            coarsest_size: 100,
            seed: 3,
            ..Default::default()
        };
        let h = build_hierarchy(plus, minus, gp, gm, &cfg).unwrap();
        assert!(h.depth() >= 2);
        for w in h.levels.windows(2) {
            assert!(w[1].plus.len() < w[0].plus.len());
            assert!(matches!(w[1].plus.link, LevelLink::Iis(_)));
        }
    }
}
