//! Balanced k-way partitioning of a weighted proximity graph: BFS region
//! growing from farthest-point seeds plus boundary-swap refinement. A simple
//! stand-in for a full multilevel partitioner, behind the same contract.

use crate::graph::ProximityGraph;
use crate::{Error, Result};

/// Allowed imbalance over the ideal part size ceil(n / k).
pub const BALANCE_EPSILON: f64 = 0.05;

/// A k-way node partition with per-part bookkeeping.
#[derive(Debug, Clone)]
pub struct Partitioning {
    /// Part id per node, in [0, k).
    pub assignment: Vec<usize>,
    pub k: usize,
    pub sizes: Vec<usize>,
    /// Volume-weighted mean feature vector of each part.
    pub centroids: Vec<Vec<f64>>,
    /// Sum of node volumes per part.
    pub volume_sums: Vec<f64>,
}

impl Partitioning {
    /// Node indices of one part, ascending.
    pub fn members(&self, part: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == part)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Total weight of edges crossing parts.
pub fn edge_cut(g: &ProximityGraph, assignment: &[usize]) -> f64 {
    g.edges()
        .into_iter()
        .filter(|&(i, j, _)| assignment[i as usize] != assignment[j as usize])
        .map(|(_, _, w)| w)
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Partitions the graph nodes into `k` parts of near-equal size
/// (max part size <= (1 + 0.05) * ceil(n / k)), greedily minimizing the edge
/// cut. Fully deterministic for a given input.
pub fn partition_graph(
    g: &ProximityGraph,
    points: &[Vec<f64>],
    k: usize,
) -> Result<Partitioning> {
    let n = g.node_count();
    if k == 0 || k > n {
        return Err(Error::Partition(format!("k = {k} out of range for n = {n}")));
    }
    if points.len() != n {
        return Err(Error::Partition(format!(
            "{} points for {} nodes",
            points.len(),
            n
        )));
    }
    let cap = (((n + k - 1) / k) as f64 * (1.0 + BALANCE_EPSILON)).floor() as usize;
    let cap = cap.max(1);

    let mut assignment = vec![usize::MAX; n];
    if k == 1 {
        assignment = vec![0; n];
    } else {
        let seeds = spread_seeds(g, points, k);
        // Multi-source BFS: parts claim one node per turn, nearest frontier
        // first, so region sizes stay balanced as they grow.
        let mut frontiers: Vec<std::collections::VecDeque<usize>> =
            vec![std::collections::VecDeque::new(); k];
        let mut sizes = vec![0usize; k];
        for (p, &s) in seeds.iter().enumerate() {
            assignment[s] = p;
            sizes[p] += 1;
            frontiers[p].push_back(s);
        }
        let mut assigned = k;
        let mut progress = true;
        while assigned < n && progress {
            progress = false;
            for p in 0..k {
                if sizes[p] >= cap {
                    continue;
                }
                // Claim the first unassigned neighbor on this part's frontier.
                'claim: while let Some(&u) = frontiers[p].front() {
                    for &(v, _) in g.neighbors(u) {
                        let v = v as usize;
                        if assignment[v] == usize::MAX {
                            assignment[v] = p;
                            sizes[p] += 1;
                            frontiers[p].push_back(v);
                            assigned += 1;
                            progress = true;
                            break 'claim;
                        }
                    }
                    frontiers[p].pop_front();
                }
            }
        }
        // Leftovers (disconnected nodes or capped regions) go to the nearest
        // seed with spare capacity.
        for v in 0..n {
            if assignment[v] != usize::MAX {
                continue;
            }
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (p, &s) in seeds.iter().enumerate() {
                if sizes[p] >= cap {
                    continue;
                }
                let d = sq_dist(&points[v], &points[s]);
                if d < best_d {
                    best_d = d;
                    best = p;
                }
            }
            if best == usize::MAX {
                // Every part at cap; k * cap >= n makes this impossible, but
                // fall back to the smallest part rather than panic.
                best = (0..k).min_by_key(|&p| sizes[p]).unwrap();
            }
            assignment[v] = best;
            sizes[best] += 1;
        }
        refine_boundaries(g, &mut assignment, &mut sizes, cap);
    }

    let mut sizes = vec![0usize; k];
    for &p in &assignment {
        sizes[p] += 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Partition("empty part after refinement".into()));
    }
    if *sizes.iter().max().unwrap() > cap {
        return Err(Error::Partition(format!(
            "balance bound violated: max {} > cap {}",
            sizes.iter().max().unwrap(),
            cap
        )));
    }

    let dim = points.first().map_or(0, Vec::len);
    let mut centroids = vec![vec![0.0f64; dim]; k];
    let mut volume_sums = vec![0.0f64; k];
    for (i, &p) in assignment.iter().enumerate() {
        let v = g.volumes[i];
        volume_sums[p] += v;
        for (acc, x) in centroids[p].iter_mut().zip(&points[i]) {
            *acc += v * x;
        }
    }
    for (c, &vs) in centroids.iter_mut().zip(&volume_sums) {
        for x in c.iter_mut() {
            *x /= vs;
        }
    }
    Ok(Partitioning {
        assignment,
        k,
        sizes,
        centroids,
        volume_sums,
    })
}

/// Farthest-point seeding: start from the node nearest the volume-weighted
/// centroid, then repeatedly take the node maximizing the distance to its
/// closest chosen seed. Ties break on the lower index.
fn spread_seeds(g: &ProximityGraph, points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = points.len();
    let dim = points.first().map_or(0, Vec::len);
    let total_vol: f64 = g.volumes.iter().sum();
    let mut center = vec![0.0f64; dim];
    for (p, &v) in points.iter().zip(&g.volumes) {
        for (c, x) in center.iter_mut().zip(p) {
            *c += v * x;
        }
    }
    for c in center.iter_mut() {
        *c /= total_vol;
    }
    let first = (0..n)
        .min_by(|&a, &b| {
            sq_dist(&points[a], &center)
                .total_cmp(&sq_dist(&points[b], &center))
                .then(a.cmp(&b))
        })
        .unwrap();
    let mut seeds = vec![first];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while seeds.len() < k {
        let next = (0..n)
            .max_by(|&a, &b| min_d[a].total_cmp(&min_d[b]).then(b.cmp(&a)))
            .unwrap();
        seeds.push(next);
        for (m, p) in min_d.iter_mut().zip(points) {
            *m = m.min(sq_dist(p, &points[next]));
        }
    }
    seeds
}

/// Greedy boundary-vertex swaps: move a node to an adjacent part whenever it
/// strictly reduces the cut and keeps the balance bound. The cut never
/// increases.
fn refine_boundaries(
    g: &ProximityGraph,
    assignment: &mut [usize],
    sizes: &mut [usize],
    cap: usize,
) {
    let k = sizes.len();
    for _pass in 0..10 {
        let mut moved = false;
        for v in 0..g.node_count() {
            let from = assignment[v];
            if sizes[from] <= 1 {
                continue;
            }
            // Weight of v's edges into each adjacent part.
            let mut towards = vec![0.0f64; k];
            for &(u, w) in g.neighbors(v) {
                towards[assignment[u as usize]] += w;
            }
            let mut best_part = from;
            let mut best_gain = 0.0;
            for p in 0..k {
                if p == from || sizes[p] >= cap {
                    continue;
                }
                let gain = towards[p] - towards[from];
                if gain > best_gain + 1e-12 {
                    best_gain = gain;
                    best_part = p;
                }
            }
            if best_part != from {
                sizes[from] -= 1;
                sizes[best_part] += 1;
                assignment[v] = best_part;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_knn_graph, KnnMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path_graph(n: usize) -> (Vec<Vec<f64>>, ProximityGraph) {
        let points: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let edges = (0..n - 1)
            .map(|i| (i as u32, i as u32 + 1, 1.0))
            .collect::<Vec<_>>();
        let g = ProximityGraph::from_edges(n, edges, vec![1.0; n]).unwrap();
        (points, g)
    }

    #[test]
    fn ten_nodes_two_parts_balance_exactly() {
        let (points, g) = path_graph(10);
        let p = partition_graph(&g, &points, 2).unwrap();
        let mut sizes = p.sizes.clone();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![5, 5]);
    }

    #[test]
    fn single_part_centroid_is_weighted_mean() {
        let points = vec![vec![0.0, 0.0], vec![4.0, 0.0]];
        let mut g = ProximityGraph::from_edges(2, vec![(0, 1, 1.0)], vec![1.0, 3.0]).unwrap();
        g.volumes = vec![1.0, 3.0];
        let p = partition_graph(&g, &points, 1).unwrap();
        assert_eq!(p.k, 1);
        assert_eq!(p.sizes, vec![2]);
        assert!((p.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!((p.volume_sums[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn well_separated_clusters_cut_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut points: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        points.extend((0..50).map(|_| {
            vec![
                100.0 + rng.gen_range(-1.0..1.0),
                100.0 + rng.gen_range(-1.0..1.0),
            ]
        }));
        let g = build_knn_graph(&points, 5, KnnMode::Exact).unwrap();
        let p = partition_graph(&g, &points, 2).unwrap();
        assert_eq!(edge_cut(&g, &p.assignment), 0.0);
        // Each cluster landed in one part.
        for i in 1..50 {
            assert_eq!(p.assignment[i], p.assignment[0]);
            assert_eq!(p.assignment[50 + i], p.assignment[50]);
        }
    }

    #[test]
    fn k_larger_than_n_errors() {
        let (points, g) = path_graph(4);
        assert!(partition_graph(&g, &points, 5).is_err());
        assert!(partition_graph(&g, &points, 0).is_err());
    }

    #[test]
    fn balance_bound_holds_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..10 {
            let n = rng.gen_range(20..200);
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let g = build_knn_graph(&points, 4, KnnMode::Exact).unwrap();
            let k = rng.gen_range(2..=6.min(n));
            let p = partition_graph(&g, &points, k).unwrap();
            let cap = (((n + k - 1) / k) as f64 * 1.05).floor() as usize;
            assert!(
                *p.sizes.iter().max().unwrap() <= cap.max(1),
                "trial {trial}: sizes {:?} cap {cap}",
                p.sizes
            );
            assert!(p.sizes.iter().all(|&s| s > 0));
        }
    }

    #[test]
    fn refinement_never_increases_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 120;
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let g = build_knn_graph(&points, 5, KnnMode::Exact).unwrap();
        // Random assignment, then one refinement call.
        let k = 4;
        let cap = (((n + k - 1) / k) as f64 * 1.05).floor() as usize;
        let mut assignment: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            sizes[a] += 1;
        }
        let before = edge_cut(&g, &assignment);
        refine_boundaries(&g, &mut assignment, &mut sizes, cap);
        let after = edge_cut(&g, &assignment);
        assert!(after <= before + 1e-9, "{after} > {before}");
    }

    #[test]
    fn deterministic_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let points: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let g = build_knn_graph(&points, 4, KnnMode::Exact).unwrap();
        let a = partition_graph(&g, &points, 3).unwrap();
        let b = partition_graph(&g, &points, 3).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }
}
