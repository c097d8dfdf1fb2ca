//! Uncoarsening of support vectors, training-set expansion, partition-based
//! multi-model refinement, and ensemble prediction by distance-weighted or
//! majority voting.

use rayon::prelude::*;

use crate::coarsen::InterpolationMatrix;
use crate::graph::ProximityGraph;
use crate::modelsel::{NudOutcome, ParamPoint};
use crate::partition::{partition_graph, Partitioning};
use crate::qp::SvmModel;
use crate::{Error, Result};

/// IIS uncoarsening: the coarse support vectors (given as fine-level indices)
/// plus their `h` nearest graph neighbors (largest edge weight = smallest
/// distance). Deduplicated, ascending.
pub fn uncoarsen_iis(sv_fine: &[usize], fine_graph: &ProximityGraph, h: usize) -> Vec<usize> {
    let mut out: std::collections::BTreeSet<usize> = sv_fine.iter().copied().collect();
    for &s in sv_fine {
        let mut neighbors: Vec<(u32, f64)> = fine_graph.neighbors(s).to_vec();
        neighbors.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, _) in neighbors.iter().take(h) {
            out.insert(j as usize);
        }
    }
    out.into_iter().collect()
}

/// How AMG aggregates are expanded back into fine training points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DisaggregationMode {
    /// Every fine point of every support-vector aggregate.
    Full,
    /// Full, plus graph neighbors within this hop distance (1 or 2).
    KDistant(usize),
    /// Per aggregate: the seed, then members in ascending interpolation
    /// weight, up to this many points in total.
    Sampled(usize),
}

/// AMG uncoarsening: expands coarse support vectors (columns of P) into the
/// fine-level training set per the chosen mode. Returns ascending indices.
pub fn uncoarsen_amg(
    sv_cols: &[usize],
    p: &InterpolationMatrix,
    mode: DisaggregationMode,
    fine_graph: &ProximityGraph,
) -> Result<Vec<usize>> {
    let cols = p.columns();
    for &c in sv_cols {
        if c >= cols.len() {
            return Err(Error::Solver(format!(
                "support vector column {c} out of range for {} aggregates",
                cols.len()
            )));
        }
    }
    let mut out: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    match mode {
        DisaggregationMode::Full | DisaggregationMode::KDistant(_) => {
            for &c in sv_cols {
                for &(row, _) in &cols[c] {
                    out.insert(row as usize);
                }
            }
            if let DisaggregationMode::KDistant(hops) = mode {
                let hops = hops.clamp(1, 2);
                let mut frontier: Vec<usize> = out.iter().copied().collect();
                for _ in 0..hops {
                    let mut next = Vec::new();
                    for &i in &frontier {
                        for &(j, _) in fine_graph.neighbors(i) {
                            if out.insert(j as usize) {
                                next.push(j as usize);
                            }
                        }
                    }
                    frontier = next;
                }
            }
        }
        DisaggregationMode::Sampled(budget) => {
            let budget = budget.max(1);
            for &c in sv_cols {
                let seed_row = p.seed_fine_index[c] as usize;
                out.insert(seed_row);
                // Remaining members by ascending interpolation weight: points
                // split across aggregates first, dedicated members last.
                let mut members: Vec<(u32, f64)> = cols[c]
                    .iter()
                    .filter(|&&(row, _)| row as usize != seed_row)
                    .copied()
                    .collect();
                members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                for &(row, _) in members.iter().take(budget.saturating_sub(1)) {
                    out.insert(row as usize);
                }
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Weighted center of the segment between two part centroids:
/// x = (c_i * V_i + c_j * V_j) / (V_i + V_j).
pub fn weighted_midpoint(c_i: &[f64], c_j: &[f64], vol_i: f64, vol_j: f64) -> Vec<f64> {
    let total = vol_i + vol_j;
    c_i.iter()
        .zip(c_j)
        .map(|(a, b)| (a * vol_i + b * vol_j) / total)
        .collect()
}

/// One pair model with the voting metadata of its two parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PairModel {
    pub model: SvmModel,
    pub centroid_plus: Vec<f64>,
    pub centroid_minus: Vec<f64>,
    pub volume_plus: f64,
    pub volume_minus: f64,
    /// Volume-weighted midpoint between the part centroids.
    pub midpoint: Vec<f64>,
}

/// Voting rule over an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum VoteRule {
    /// Labels weighted by inverse Euclidean distance to each pair midpoint.
    DistanceWeighted,
    /// Simple plurality of model labels.
    Majority,
}

/// Models produced by partition refinement, voting together at prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEnsemble {
    pub models: Vec<PairModel>,
}

impl ModelEnsemble {
    /// (vote value, label). Distance-weighted voting follows
    /// sign(sum l_m / d_m / sum 1 / d_m); an exact midpoint hit returns that
    /// model's label outright; sign(0) resolves to +1.
    pub fn predict(&self, x: &[f64], rule: VoteRule) -> Result<(f64, i8)> {
        if self.models.is_empty() {
            return Err(Error::Solver("empty ensemble".into()));
        }
        match rule {
            VoteRule::DistanceWeighted => {
                let mut num = 0.0;
                let mut den = 0.0;
                for pm in &self.models {
                    let d2: f64 = pm
                        .midpoint
                        .iter()
                        .zip(x)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let d = d2.sqrt();
                    let (_, label) = pm.model.predict(x)?;
                    if d == 0.0 {
                        return Ok((f64::from(label), label));
                    }
                    num += f64::from(label) / d;
                    den += 1.0 / d;
                }
                let vote = num / den;
                Ok((vote, if vote >= 0.0 { 1 } else { -1 }))
            }
            VoteRule::Majority => {
                let mut balance = 0i64;
                for pm in &self.models {
                    let (_, label) = pm.model.predict(x)?;
                    balance += i64::from(label);
                }
                let label = if balance >= 0 { 1 } else { -1 };
                Ok((balance as f64, label))
            }
        }
    }
}

/// A refined level: either one retrained model or a voting ensemble.
#[derive(Debug, Clone)]
pub enum Refined {
    Single { model: SvmModel, params: ParamPoint },
    Ensemble { ensemble: ModelEnsemble, params: ParamPoint },
}

impl Refined {
    /// All support-vector indices (into the refinement training set),
    /// deduplicated ascending; the union of all pair models for ensembles.
    pub fn support_indices(&self) -> Vec<usize> {
        match self {
            Refined::Single { model, .. } => model.sv_indices.clone(),
            Refined::Ensemble { ensemble, .. } => {
                let mut set = std::collections::BTreeSet::new();
                for pm in &ensemble.models {
                    set.extend(pm.model.sv_indices.iter().copied());
                }
                set.into_iter().collect()
            }
        }
    }

    pub fn params(&self) -> ParamPoint {
        match self {
            Refined::Single { params, .. } | Refined::Ensemble { params, .. } => *params,
        }
    }
}

/// The refinement training set at one level: per-class features and induced
/// proximity graphs (volumes travel inside the graphs).
pub struct RefineInputs<'a> {
    pub points_plus: &'a [Vec<f64>],
    pub points_minus: &'a [Vec<f64>],
    pub graph_plus: &'a ProximityGraph,
    pub graph_minus: &'a ProximityGraph,
}

/// Target part size used to pick the part count K = round(n / 1000).
pub const PART_TARGET_SIZE: usize = 1000;

fn part_count(n: usize) -> usize {
    let k = ((n as f64) / PART_TARGET_SIZE as f64).round() as usize;
    k.clamp(2, n.max(2))
}

/// Refinement at one level. Small training sets (< `q_t`) re-run the
/// refinement stage of the parameter search around the inherited center and
/// return a single model. Larger ones inherit the parameters unchanged,
/// partition each class, pair every part with its nearest opposite-class
/// part (deduplicated, so at most |parts+| + |parts-| models), and train the
/// pairs independently with exactly one training each.
///
/// `run_nud` executes the centered search; `train_pair` trains one model on
/// (plus part member indices, minus part member indices) with the given
/// parameters. Indices refer to the per-class inputs.
pub fn refine_level<N, T>(
    inputs: &RefineInputs<'_>,
    inherited: ParamPoint,
    q_t: usize,
    run_nud: N,
    train_pair: T,
) -> Result<Refined>
where
    N: FnOnce(ParamPoint) -> Result<NudOutcome>,
    T: Fn(&[usize], &[usize], ParamPoint) -> Result<SvmModel> + Sync,
{
    let n_plus = inputs.points_plus.len();
    let n_minus = inputs.points_minus.len();
    if n_plus == 0 || n_minus == 0 {
        return Err(Error::Solver(
            "refinement training set must contain both classes".into(),
        ));
    }
    let total = n_plus + n_minus;
    if total < q_t {
        let out = run_nud(inherited)?;
        return Ok(Refined::Single {
            model: out.model,
            params: out.params,
        });
    }

    let parts_plus = partition_graph(inputs.graph_plus, inputs.points_plus, part_count(n_plus))?;
    let parts_minus =
        partition_graph(inputs.graph_minus, inputs.points_minus, part_count(n_minus))?;
    let pairs = nearest_opposite_pairs(&parts_plus, &parts_minus);

    let models: Vec<PairModel> = pairs
        .par_iter()
        .map(|&(pi, mi)| {
            let plus_members = parts_plus.members(pi);
            let minus_members = parts_minus.members(mi);
            let model = train_pair(&plus_members, &minus_members, inherited)?;
            let midpoint = weighted_midpoint(
                &parts_plus.centroids[pi],
                &parts_minus.centroids[mi],
                parts_plus.volume_sums[pi],
                parts_minus.volume_sums[mi],
            );
            Ok(PairModel {
                model,
                centroid_plus: parts_plus.centroids[pi].clone(),
                centroid_minus: parts_minus.centroids[mi].clone(),
                volume_plus: parts_plus.volume_sums[pi],
                volume_minus: parts_minus.volume_sums[mi],
                midpoint,
            })
        })
        .collect::<Result<_>>()?;
    debug_assert!(models.len() <= parts_plus.k + parts_minus.k);
    Ok(Refined::Ensemble {
        ensemble: ModelEnsemble { models },
        params: inherited,
    })
}

/// For every part of either class, its nearest opposite-class part by
/// centroid distance; pairs deduplicated and canonically ordered.
fn nearest_opposite_pairs(plus: &Partitioning, minus: &Partitioning) -> Vec<(usize, usize)> {
    let nearest = |from: &Vec<Vec<f64>>, to: &Vec<Vec<f64>>, i: usize| -> usize {
        (0..to.len())
            .min_by(|&a, &b| {
                let da: f64 = from[i]
                    .iter()
                    .zip(&to[a])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let db: f64 = from[i]
                    .iter()
                    .zip(&to[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap()
    };
    let mut pairs = std::collections::BTreeSet::new();
    for pi in 0..plus.k {
        pairs.insert((pi, nearest(&plus.centroids, &minus.centroids, pi)));
    }
    for mi in 0..minus.k {
        pairs.insert((nearest(&minus.centroids, &plus.centroids, mi), mi));
    }
    pairs.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarsen::build_interpolation;
    use crate::graph::{build_knn_graph, KnnMode};
    use crate::modelsel::PerformanceReport;
    use crate::qp::{smo_train, SmoParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path3() -> ProximityGraph {
        ProximityGraph::from_edges(3, vec![(0, 1, 1.0), (1, 2, 0.5)], vec![1.0; 3]).unwrap()
    }

    #[test]
    fn iis_uncoarsening_neighbor_expansion() {
        let g = path3();
        assert_eq!(uncoarsen_iis(&[1], &g, 0), vec![1]);
        // h=1: node 1's nearest neighbor by weight is node 0 (w=1 > 0.5).
        assert_eq!(uncoarsen_iis(&[1], &g, 1), vec![0, 1]);
        // h exceeding the neighborhood takes everything once.
        assert_eq!(uncoarsen_iis(&[1], &g, 5), vec![0, 1, 2]);
    }

    #[test]
    fn amg_uncoarsening_modes() {
        let g = path3();
        let p = build_interpolation(&g, &[1], 2);
        let full = uncoarsen_amg(&[0], &p, DisaggregationMode::Full, &g).unwrap();
        assert_eq!(full, vec![0, 1, 2]);

        let sampled1 = uncoarsen_amg(&[0], &p, DisaggregationMode::Sampled(1), &g).unwrap();
        assert_eq!(sampled1, vec![1]); // just the seed

        // Aggregate with members at P = {1.0 (seed 0), 0.3 (row 1), 0.7 (row 2)}:
        // budget 2 keeps the seed plus the lowest interpolation weight.
        let star = ProximityGraph::from_edges(
            4,
            vec![(0, 1, 3.0), (1, 3, 7.0), (0, 2, 7.0), (2, 3, 3.0)],
            vec![1.0; 4],
        )
        .unwrap();
        let p2 = build_interpolation(&star, &[0, 3], 2);
        assert_eq!(p2.row(1), &[(0, 0.3), (1, 0.7)]);
        let sampled2 = uncoarsen_amg(&[0], &p2, DisaggregationMode::Sampled(2), &g).unwrap();
        // Column 0 support: rows {0 (seed, 1.0), 1 (0.3), 2 (0.7)}; ascending
        // P keeps row 1.
        assert_eq!(sampled2, vec![0, 1]);
    }

    #[test]
    fn amg_full_equals_column_support_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let g = build_knn_graph(&points, 4, KnnMode::Exact).unwrap();
        let t = crate::coarsen::future_volumes(&g);
        let (seeds, _) = crate::coarsen::select_seeds(&g, &t, 0.5, 2.0);
        let p = build_interpolation(&g, &seeds, 2);
        let sv_cols: Vec<usize> = (0..p.n_cols()).step_by(3).collect();
        let got = uncoarsen_amg(&sv_cols, &p, DisaggregationMode::Full, &g).unwrap();
        // Brute force: scan every row of P for a nonzero in a chosen column.
        let chosen: std::collections::BTreeSet<usize> = sv_cols.iter().copied().collect();
        let mut expected = Vec::new();
        for r in 0..p.n_rows() {
            if p.row(r)
                .iter()
                .any(|&(c, v)| chosen.contains(&(c as usize)) && v > 0.0)
            {
                expected.push(r);
            }
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn amg_k_distant_adds_hop_neighbors() {
        // Line 0-1-2-3-4 with seeds {0, 3}: column 0 owns {0, 1}.
        let g = ProximityGraph::from_edges(
            5,
            vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0)],
            vec![1.0; 5],
        )
        .unwrap();
        let p = build_interpolation(&g, &[0, 3], 1);
        let full = uncoarsen_amg(&[0], &p, DisaggregationMode::Full, &g).unwrap();
        assert_eq!(full, vec![0, 1]);
        let k1 = uncoarsen_amg(&[0], &p, DisaggregationMode::KDistant(1), &g).unwrap();
        assert_eq!(k1, vec![0, 1, 2]);
        let k2 = uncoarsen_amg(&[0], &p, DisaggregationMode::KDistant(2), &g).unwrap();
        assert_eq!(k2, vec![0, 1, 2, 3]);
    }

    #[test]
    fn midpoint_arithmetic() {
        let x = weighted_midpoint(&[0.0, 0.0], &[2.0, 0.0], 1.0, 3.0);
        assert_eq!(x, vec![1.5, 0.0]);
        let even = weighted_midpoint(&[1.0], &[3.0], 2.0, 2.0);
        assert_eq!(even, vec![2.0]);
        let skewed = weighted_midpoint(&[1.0], &[3.0], 1e9, 1.0);
        assert!((skewed[0] - 1.0).abs() < 1e-8);
    }

    /// Model that always answers with a fixed label (empty SV list, bias).
    fn constant_model(label: i8) -> SvmModel {
        SvmModel {
            support_vectors: vec![],
            coefficients: vec![],
            bias: f64::from(label),
            gamma: 1.0,
            c: 1.0,
            w_pos: 1.0,
            w_neg: 1.0,
            sv_indices: vec![],
            level: 0,
            iterations: 0,
            converged: true,
            objective: 0.0,
            kkt_violation: 0.0,
        }
    }

    fn pair(label: i8, midpoint: Vec<f64>) -> PairModel {
        PairModel {
            model: constant_model(label),
            centroid_plus: midpoint.clone(),
            centroid_minus: midpoint.clone(),
            volume_plus: 1.0,
            volume_minus: 1.0,
            midpoint,
        }
    }

    #[test]
    fn ensemble_voting_arithmetic() {
        // Two models, labels (+1, -1), distances (1, 3) from the query:
        // vote = (1 - 1/3) / (1 + 1/3) = 0.5 -> +1.
        let e = ModelEnsemble {
            models: vec![pair(1, vec![1.0, 0.0]), pair(-1, vec![3.0, 0.0])],
        };
        let (vote, label) = e.predict(&[0.0, 0.0], VoteRule::DistanceWeighted).unwrap();
        assert!((vote - 0.5).abs() < 1e-12);
        assert_eq!(label, 1);
    }

    #[test]
    fn ensemble_single_model_reduces_to_its_sign() {
        let e = ModelEnsemble {
            models: vec![pair(-1, vec![5.0])],
        };
        let (_, label) = e.predict(&[0.0], VoteRule::DistanceWeighted).unwrap();
        assert_eq!(label, -1);
        let (_, label) = e.predict(&[0.0], VoteRule::Majority).unwrap();
        assert_eq!(label, -1);
    }

    #[test]
    fn ensemble_unanimity_and_tie_rules() {
        let e = ModelEnsemble {
            models: vec![
                pair(-1, vec![1.0]),
                pair(-1, vec![2.0]),
                pair(-1, vec![3.0]),
            ],
        };
        assert_eq!(e.predict(&[0.0], VoteRule::DistanceWeighted).unwrap().1, -1);
        assert_eq!(e.predict(&[0.0], VoteRule::Majority).unwrap().1, -1);

        // Equal distances, opposite labels: vote is exactly 0 -> +1.
        let tie = ModelEnsemble {
            models: vec![pair(1, vec![1.0]), pair(-1, vec![-1.0])],
        };
        assert_eq!(tie.predict(&[0.0], VoteRule::DistanceWeighted).unwrap().1, 1);
        assert_eq!(tie.predict(&[0.0], VoteRule::Majority).unwrap().1, 1);
    }

    #[test]
    fn ensemble_exact_hit_wins_outright() {
        let e = ModelEnsemble {
            models: vec![pair(1, vec![5.0]), pair(-1, vec![0.0])],
        };
        let (_, label) = e.predict(&[0.0], VoteRule::DistanceWeighted).unwrap();
        assert_eq!(label, -1);
    }

    #[test]
    fn ensemble_invariant_under_model_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let models: Vec<PairModel> = (0..4)
                .map(|_| {
                    pair(
                        if rng.gen_bool(0.5) { 1 } else { -1 },
                        vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
                    )
                })
                .collect();
            let q = vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let e1 = ModelEnsemble {
                models: models.clone(),
            };
            let mut rev = models;
            rev.reverse();
            let e2 = ModelEnsemble { models: rev };
            let r1 = e1.predict(&q, VoteRule::DistanceWeighted).unwrap();
            let r2 = e2.predict(&q, VoteRule::DistanceWeighted).unwrap();
            assert!((r1.0 - r2.0).abs() < 1e-12);
            assert_eq!(r1.1, r2.1);
        }
    }

    #[test]
    fn empty_ensemble_errors() {
        let e = ModelEnsemble { models: vec![] };
        assert!(e.predict(&[0.0], VoteRule::Majority).is_err());
    }

    fn cluster(center: (f64, f64), n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                vec![
                    center.0 + rng.gen_range(-0.5..0.5),
                    center.1 + rng.gen_range(-0.5..0.5),
                ]
            })
            .collect()
    }

    #[test]
    fn refine_small_branch_runs_nud_once() {
        let plus = cluster((0.0, 0.0), 20, 1);
        let minus = cluster((5.0, 5.0), 20, 2);
        let gp = build_knn_graph(&plus, 3, KnnMode::Exact).unwrap();
        let gm = build_knn_graph(&minus, 3, KnnMode::Exact).unwrap();
        let inputs = RefineInputs {
            points_plus: &plus,
            points_minus: &minus,
            graph_plus: &gp,
            graph_minus: &gm,
        };
        let inherited = ParamPoint {
            log2_c: 1.0,
            log2_gamma: 0.0,
        };
        let nud_calls = std::sync::atomic::AtomicUsize::new(0);
        let refined = refine_level(
            &inputs,
            inherited,
            5000,
            |center| {
                nud_calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                assert_eq!(center.log2_c, 1.0);
                let pts: Vec<Vec<f64>> = plus.iter().chain(&minus).cloned().collect();
                let labels: Vec<i8> = std::iter::repeat(1)
                    .take(20)
                    .chain(std::iter::repeat(-1).take(20))
                    .collect();
                let model = smo_train(
                    &pts,
                    &labels,
                    &vec![1.0; 40],
                    &SmoParams {
                        c: center.c(),
                        gamma: center.gamma(),
                        ..Default::default()
                    },
                )?;
                Ok(NudOutcome {
                    params: center,
                    model,
                    report: PerformanceReport {
                        tp: 0,
                        tn: 0,
                        fp: 0,
                        fn_: 0,
                        sn: 0.0,
                        sp: 0.0,
                        gmean: 0.0,
                        acc: 0.0,
                        ppv: 0.0,
                        f1: 0.0,
                        undefined_ratio: false,
                        wall_seconds: 0.0,
                        level: 0,
                    },
                    trainings: 13,
                })
            },
            |_, _, _| unreachable!("small branch must not partition"),
        )
        .unwrap();
        assert_eq!(nud_calls.load(std::sync::atomic::Ordering::SeqCst), 1);
        assert!(matches!(refined, Refined::Single { .. }));
    }

    #[test]
    fn refine_large_branch_partitions_and_trains_each_pair_once() {
        // Four spread plus-clusters and four minus-clusters; q_t below the
        // total size forces the partition branch.
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for (i, &cx) in [0.0, 10.0, 20.0, 30.0].iter().enumerate() {
            plus.extend(cluster((cx, 0.0), 25, i as u64));
            minus.extend(cluster((cx, 8.0), 25, 100 + i as u64));
        }
        let gp = build_knn_graph(&plus, 4, KnnMode::Exact).unwrap();
        let gm = build_knn_graph(&minus, 4, KnnMode::Exact).unwrap();
        let inputs = RefineInputs {
            points_plus: &plus,
            points_minus: &minus,
            graph_plus: &gp,
            graph_minus: &gm,
        };
        let inherited = ParamPoint {
            log2_c: 2.0,
            log2_gamma: -2.0,
        };
        let trainings = std::sync::atomic::AtomicUsize::new(0);
        let refined = refine_level(
            &inputs,
            inherited,
            10, // force the partition branch
            |_| unreachable!("large branch must not run the search"),
            |plus_idx, minus_idx, params| {
                trainings.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                assert_eq!(params.log2_c, 2.0);
                let pts: Vec<Vec<f64>> = plus_idx
                    .iter()
                    .map(|&i| plus[i].clone())
                    .chain(minus_idx.iter().map(|&i| minus[i].clone()))
                    .collect();
                let labels: Vec<i8> = std::iter::repeat(1)
                    .take(plus_idx.len())
                    .chain(std::iter::repeat(-1).take(minus_idx.len()))
                    .collect();
                smo_train(
                    &pts,
                    &labels,
                    &vec![1.0; pts.len()],
                    &SmoParams {
                        c: params.c(),
                        gamma: params.gamma(),
                        ..Default::default()
                    },
                )
            },
        )
        .unwrap();
        match refined {
            Refined::Ensemble { ensemble, params } => {
                assert_eq!(params, inherited);
                // One training per deduplicated pair, at most |P+| + |P-|.
                assert_eq!(
                    trainings.load(std::sync::atomic::Ordering::SeqCst),
                    ensemble.models.len()
                );
                assert!(ensemble.models.len() <= 4);
                assert!(!ensemble.models.is_empty());
                // Midpoints sit on the segment between the pair centroids.
                for pm in &ensemble.models {
                    let expect = weighted_midpoint(
                        &pm.centroid_plus,
                        &pm.centroid_minus,
                        pm.volume_plus,
                        pm.volume_minus,
                    );
                    assert_eq!(pm.midpoint, expect);
                }
            }
            other => panic!("expected ensemble, got {other:?}"),
        }
    }
}
