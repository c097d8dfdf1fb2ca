//! End-to-end orchestration: hierarchy construction, exact coarsest solve
//! with full model selection, the uncoarsening/refinement loop, cross-level
//! best-model selection, model file serialization, and cross-validation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coarsen::{
    build_hierarchy, hierarchy_summary, CoarseningMode, HierarchyConfig, Level, LevelLink,
};
use crate::data::{apply_stats_row, kfold_split, zscore_normalize, Dataset};
use crate::graph::{
    build_knn_graph, knn_content_hash, load_knn_cache, save_knn_cache, KnnMode, ProximityGraph,
};
use crate::modelsel::{
    compute_metrics, make_validation_set, nud_search, Candidate, ParamPoint, PerformanceReport,
    SelectionRule, ValidationPlan, ValidationStrategy,
};
use crate::qp::{class_level_weights, class_weights, smo_train, SmoParams, SvmModel, WeightScheme};
use crate::refine::{
    refine_level, uncoarsen_amg, uncoarsen_iis, DisaggregationMode, ModelEnsemble, Refined,
    RefineInputs, VoteRule,
};
use crate::{Error, Result};

/// Exact-search threshold: classes of at most this many points use the
/// brute-force neighbor scan when the mode is left on auto.
pub const EXACT_KNN_LIMIT: usize = 20_000;
/// Dataset size above which the default validation strategy switches from
/// finest-full to fine sampling.
pub const FF_SIZE_LIMIT: usize = 50_000;

/// Pipeline configuration. Defaults follow the recommended parameter table:
/// Q = 0.5, eta = 2, caliber r = 1, theta = 0.05, k = 10 neighbors,
/// M+ = M- = 300, coarsest size 500, partition trigger Q_t = 5000, parameter
/// search over [2^-10, 2^10]^2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    /// Seed coupling threshold Q for both coarsening schemes.
    pub q: f64,
    /// Future-volume outlier factor.
    pub eta: f64,
    /// Interpolation caliber r.
    pub caliber: usize,
    /// Weak-edge filter threshold.
    pub theta: f64,
    /// Neighbor count for proximity graphs.
    pub k_nn: usize,
    /// Minority-class coarsening floor M+.
    pub m_plus: usize,
    /// Majority-class coarsening floor M-.
    pub m_minus: usize,
    /// Combined-size stop for the hierarchy.
    pub coarsest_size: usize,
    /// Partition refinement triggers at training sets of this size.
    pub q_t: usize,
    /// Validation strategy; None picks finest-full up to 50k points and
    /// fine sampling above.
    pub validation: Option<ValidationStrategy>,
    /// Sample fraction for the CS/FS strategies.
    pub val_fraction: f64,
    /// Fold count for the CCkF strategy.
    pub cckf_folds: usize,
    /// How AMG aggregates expand during uncoarsening.
    pub disaggregation: DisaggregationMode,
    /// Neighbor count h for IIS uncoarsening.
    pub iis_neighbors: usize,
    pub coarsening: CoarseningMode,
    /// Objective at coarse levels and for the cross-level choice. When this
    /// is the default G-mean+SN rule, the finest level uses plain G-mean.
    pub rule: SelectionRule,
    /// Penalty distribution; per-point volume weighting is the default.
    /// Per-point weights are rescaled by the size of the training set they
    /// are computed on, so the C search range keeps its usual meaning.
    pub weight_scheme: WeightScheme,
    /// Ensemble voting rule.
    pub vote_rule: VoteRule,
    /// Neighbor search flavor; None = exact up to 20k points per class.
    pub knn_mode: Option<KnnMode>,
    pub seed: u64,
    /// Worker threads; 0 uses the process default.
    pub threads: usize,
    /// z-score input features (skipped if the dataset is already normalized).
    pub normalize: bool,
    pub smo_tol: f64,
    pub smo_max_iter: usize,
    pub cache_bytes: usize,
    /// Accept parameters outside the recommended ranges.
    pub force: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            q: 0.5,
            eta: 2.0,
            caliber: 1,
            theta: 0.05,
            k_nn: 10,
            m_plus: 300,
            m_minus: 300,
            coarsest_size: 500,
            q_t: 5000,
            validation: None,
            val_fraction: 0.1,
            cckf_folds: 5,
            disaggregation: DisaggregationMode::Full,
            iis_neighbors: 5,
            coarsening: CoarseningMode::Amg,
            rule: SelectionRule::GmeanThenSn,
            weight_scheme: WeightScheme::PerPoint,
            vote_rule: VoteRule::DistanceWeighted,
            knn_mode: None,
            seed: 0,
            threads: 1,
            normalize: true,
            smo_tol: 1e-3,
            smo_max_iter: 10_000_000,
            cache_bytes: 512 << 20,
            force: true,
        }
    }
}

impl Config {
    /// Rejects parameters outside the recommended ranges unless `force`.
    pub fn validate(&self) -> Result<()> {
        if self.k_nn == 0 || self.m_plus == 0 || self.m_minus == 0 || self.coarsest_size == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) || self.val_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 0.5]",
                self.val_fraction
            )));
        }
        if self.force {
            return Ok(());
        }
        let checks: [(&str, bool); 4] = [
            ("q outside [0.4, 0.6]", (0.4..=0.6).contains(&self.q)),
            ("caliber outside [1, 4]", (1..=4).contains(&self.caliber)),
            (
                "theta outside [0.001, 0.05]",
                (0.001..=0.05).contains(&self.theta),
            ),
            ("q_t outside [3000, 5000]", (3000..=5000).contains(&self.q_t)),
        ];
        for (msg, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("{msg} (pass force to override)")));
            }
        }
        Ok(())
    }

    fn hierarchy_config(&self) -> HierarchyConfig {
        HierarchyConfig {
            mode: self.coarsening,
            q: self.q,
            eta: self.eta,
            caliber: self.caliber,
            theta: self.theta,
            k_nn: self.k_nn,
            m_plus: self.m_plus,
            m_minus: self.m_minus,
            coarsest_size: self.coarsest_size,
            seed: self.seed,
        }
    }

    fn smo_params(&self, p: ParamPoint) -> SmoParams {
        SmoParams {
            c: p.c(),
            gamma: p.gamma(),
            tol: self.smo_tol,
            max_iter: self.smo_max_iter,
            cache_bytes: self.cache_bytes,
        }
    }

    fn strategy_for(&self, n: usize) -> ValidationStrategy {
        self.validation.unwrap_or(if n <= FF_SIZE_LIMIT {
            ValidationStrategy::Ff
        } else {
            ValidationStrategy::Fs
        })
    }

    fn finest_rule(&self) -> SelectionRule {
        // The two-level default: G-mean with an SN tie-break where the
        // coarse tie-breaker matters, plain G-mean at the finest level.
        if self.rule == SelectionRule::GmeanThenSn {
            SelectionRule::Gmean
        } else {
            self.rule
        }
    }
}

/// Wall-clock phase breakdown, in seconds.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub graph_build: f64,
    pub coarsening: f64,
    pub coarsest_solve: f64,
    pub refinement: f64,
    pub total: f64,
}

/// One hierarchy level's training outcome.
#[derive(Debug, Clone, Serialize)]
pub struct LevelRecord {
    pub level: usize,
    pub plus_size: usize,
    pub minus_size: usize,
    /// Size of the refinement training set at this level.
    pub training_size: usize,
    pub models: usize,
    pub params: ParamPoint,
    pub report: PerformanceReport,
    pub seconds: f64,
}

/// Final model of a training run.
#[derive(Debug, Clone)]
pub enum FinalModel {
    Single(SvmModel),
    Ensemble(ModelEnsemble),
}

impl FinalModel {
    pub fn model_count(&self) -> usize {
        match self {
            FinalModel::Single(_) => 1,
            FinalModel::Ensemble(e) => e.models.len(),
        }
    }

    pub fn support_vector_count(&self) -> usize {
        match self {
            FinalModel::Single(m) => m.support_vectors.len(),
            FinalModel::Ensemble(e) => e.models.iter().map(|p| p.model.support_vectors.len()).sum(),
        }
    }
}

/// A trained multilevel classifier with its per-level history.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub outcome: FinalModel,
    pub chosen_level: usize,
    pub depth: usize,
    pub params: ParamPoint,
    pub level_records: Vec<LevelRecord>,
    /// Per-feature (mean, stddev) to apply to incoming raw points.
    pub normalization: Option<Vec<(f64, f64)>>,
    pub config: Config,
    pub timings: PhaseTimings,
    /// Debug dump of the hierarchy shape, when one was built.
    pub hierarchy_info: Option<serde_json::Value>,
}

impl TrainedClassifier {
    /// Predicts points that are already in the classifier's feature space.
    pub fn predict_normalized(&self, points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<i8>)> {
        mlsvm_predict_outcome(&self.outcome, self.config.vote_rule, points)
    }
}

/// Predicts already-normalized points with an explicit outcome and rule.
pub fn mlsvm_predict_outcome(
    outcome: &FinalModel,
    rule: VoteRule,
    points: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<i8>)> {
    let mut decisions = Vec::with_capacity(points.len());
    let mut labels = Vec::with_capacity(points.len());
    match outcome {
        FinalModel::Single(m) => {
            let values = m.decision_values(points)?;
            for d in values {
                decisions.push(d);
                labels.push(if d >= 0.0 { 1 } else { -1 });
            }
        }
        FinalModel::Ensemble(e) => {
            for p in points {
                let (v, l) = e.predict(p, rule)?;
                decisions.push(v);
                labels.push(l);
            }
        }
    }
    Ok((decisions, labels))
}

/// Predicts raw points: stored normalization is applied first.
pub fn mlsvm_predict(c: &TrainedClassifier, points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<i8>)> {
    let prepared: Vec<Vec<f64>> = match &c.normalization {
        Some(stats) => points.iter().map(|p| apply_stats_row(p, stats)).collect(),
        None => points.to_vec(),
    };
    c.predict_normalized(&prepared)
}

/// Trains the multilevel classifier on a training set (the caller holds back
/// any test data). Small inputs are solved exactly with the full two-stage
/// parameter search; larger ones get the full coarsen/solve/refine cycle,
/// and the best level under the selection rule wins.
pub fn mlsvm_train(data: &Dataset, cfg: &Config) -> Result<TrainedClassifier> {
    cfg.validate()?;
    let pool = thread_pool(cfg.threads)?;
    pool.install(|| {
        let prepared = prepare(data, cfg)?;
        let (gp, gm, graph_secs) = build_class_graphs(&prepared, cfg)?;
        train_prepared(&prepared, gp, gm, graph_secs, cfg)
    })
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Normalized dataset split by class, keeping the original row positions.
struct Prepared {
    data: Dataset,
    plus_idx: Vec<usize>,
    minus_idx: Vec<usize>,
}

impl Prepared {
    fn class_points(&self, positive: bool) -> Vec<Vec<f64>> {
        let idx = if positive { &self.plus_idx } else { &self.minus_idx };
        idx.iter().map(|&i| self.data.points[i].clone()).collect()
    }
}

fn prepare(data: &Dataset, cfg: &Config) -> Result<Prepared> {
    if data.len() < 2 {
        return Err(Error::Dataset("need at least 2 samples".into()));
    }
    let (plus_idx, minus_idx) = data.class_indices();
    if plus_idx.is_empty() || minus_idx.is_empty() {
        return Err(Error::Dataset("both classes must be present".into()));
    }
    let data = if cfg.normalize && data.normalization.is_none() {
        zscore_normalize(data)
    } else {
        data.clone()
    };
    Ok(Prepared {
        data,
        plus_idx,
        minus_idx,
    })
}

/// Builds (or loads from `MLSVM_CACHE_DIR`) the per-class proximity graphs.
fn build_class_graphs(
    prepared: &Prepared,
    cfg: &Config,
) -> Result<(ProximityGraph, ProximityGraph, f64)> {
    let start = Instant::now();
    let base_case = prepared.data.len() <= cfg.m_plus + cfg.m_minus;
    if base_case {
        // No hierarchy needed; tiny placeholder graphs are never used.
        let g = ProximityGraph::from_edges(0, Vec::new(), Vec::new())?;
        return Ok((g.clone(), g, 0.0));
    }
    let mut graphs = Vec::with_capacity(2);
    for positive in [true, false] {
        let points = prepared.class_points(positive);
        let mode = cfg.knn_mode.unwrap_or(if points.len() <= EXACT_KNN_LIMIT {
            KnnMode::Exact
        } else {
            KnnMode::Approximate
        });
        let k = cfg.k_nn.min(points.len().saturating_sub(1)).max(1);
        let cached = match std::env::var_os("MLSVM_CACHE_DIR") {
            Some(dir) => {
                let hash = knn_content_hash(&points, k, mode);
                let path = std::path::Path::new(&dir).join(format!("mlsvm-{hash}.knn"));
                match load_knn_cache(&path, &hash)? {
                    Some(g) => Some(g),
                    None => {
                        let g = build_knn_graph(&points, k, mode)?;
                        save_knn_cache(&path, &g, &hash)?;
                        Some(g)
                    }
                }
            }
            None => None,
        };
        let g = match cached {
            Some(g) => g,
            None => build_knn_graph(&points, k, mode)?,
        };
        graphs.push(g);
    }
    let gm = graphs.pop().unwrap();
    let gp = graphs.pop().unwrap();
    Ok((gp, gm, start.elapsed().as_secs_f64()))
}

/// Training-set handle at one level: per-class indices into the level's
/// class arrays.
#[derive(Debug, Clone)]
struct Subset {
    plus: Vec<usize>,
    minus: Vec<usize>,
}

impl Subset {
    fn len(&self) -> usize {
        self.plus.len() + self.minus.len()
    }
}

/// Materialized training data for the solver.
struct Assembled {
    points: Vec<Vec<f64>>,
    labels: Vec<i8>,
    volumes: Vec<f64>,
    /// Size of the plus prefix; rows beyond it are the minus class.
    n_plus: usize,
}

fn assemble(level: &Level, subset: &Subset) -> Assembled {
    let mut points = Vec::with_capacity(subset.len());
    let mut labels = Vec::with_capacity(subset.len());
    let mut volumes = Vec::with_capacity(subset.len());
    for &i in &subset.plus {
        points.push(level.plus.points[i].clone());
        labels.push(1);
        volumes.push(level.plus.graph.volumes[i]);
    }
    for &i in &subset.minus {
        points.push(level.minus.points[i].clone());
        labels.push(-1);
        volumes.push(level.minus.graph.volumes[i]);
    }
    Assembled {
        points,
        labels,
        volumes,
        n_plus: subset.plus.len(),
    }
}

/// Weighted solver call: per-point weights from the configured scheme,
/// rescaled by the training-set size so the searched C keeps its usual scale.
fn weighted_train(
    points: &[Vec<f64>],
    labels: &[i8],
    volumes: &[f64],
    params: ParamPoint,
    level: usize,
    cfg: &Config,
) -> Result<SvmModel> {
    let n = points.len() as f64;
    let w: Vec<f64> = class_weights(labels, volumes, cfg.weight_scheme)
        .into_iter()
        .map(|wi| wi * n)
        .collect();
    let mut model = smo_train(points, labels, &w, &cfg.smo_params(params))?;
    let (wp, wn) = class_level_weights(labels, volumes);
    model.w_pos = wp;
    model.w_neg = wn;
    model.level = level;
    Ok(model)
}

fn eval_model(model: &SvmModel, points: &[Vec<f64>], truth: &[i8]) -> Result<PerformanceReport> {
    let values = model.decision_values(points)?;
    let pred: Vec<i8> = values.iter().map(|&d| if d >= 0.0 { 1 } else { -1 }).collect();
    compute_metrics(&pred, truth)
}

fn eval_refined(
    refined: &Refined,
    rule: VoteRule,
    points: &[Vec<f64>],
    truth: &[i8],
) -> Result<PerformanceReport> {
    match refined {
        Refined::Single { model, .. } => eval_model(model, points, truth),
        Refined::Ensemble { ensemble, .. } => {
            let mut pred = Vec::with_capacity(points.len());
            for p in points {
                pred.push(ensemble.predict(p, rule)?.1);
            }
            compute_metrics(&pred, truth)
        }
    }
}

/// Builds the per-candidate assessment closure implementing the validation
/// strategy at one level. The returned closure trains with the given
/// parameters and scores on the plan's validation data.
fn make_assess<'a>(
    assembled: &'a Assembled,
    plan: &'a ValidationPlan,
    finest_points: &'a [Vec<f64>],
    finest_labels: &'a [i8],
    level: usize,
    cfg: &'a Config,
) -> impl Fn(ParamPoint) -> Result<(SvmModel, PerformanceReport)> + Sync + 'a {
    move |p: ParamPoint| {
        let full = || {
            weighted_train(
                &assembled.points,
                &assembled.labels,
                &assembled.volumes,
                p,
                level,
                cfg,
            )
        };
        match plan {
            ValidationPlan::Finest => {
                let model = full()?;
                let mut report = eval_model(&model, finest_points, finest_labels)?;
                report.level = level;
                Ok((model, report))
            }
            ValidationPlan::FinestSample(idx) => {
                let model = full()?;
                let pts: Vec<Vec<f64>> = idx.iter().map(|&i| finest_points[i].clone()).collect();
                let lbl: Vec<i8> = idx.iter().map(|&i| finest_labels[i]).collect();
                let mut report = eval_model(&model, &pts, &lbl)?;
                report.level = level;
                Ok((model, report))
            }
            ValidationPlan::Holdout { train, val } => {
                let tr = gather(assembled, train);
                let mut model = weighted_train(&tr.0, &tr.1, &tr.2, p, level, cfg)?;
                // Map holdout-local support indices back to the full set.
                model.sv_indices = model.sv_indices.iter().map(|&i| train[i]).collect();
                let va = gather(assembled, val);
                let mut report = eval_model(&model, &va.0, &va.1)?;
                report.level = level;
                Ok((model, report))
            }
            ValidationPlan::LevelFolds(folds) => {
                let mut pred = Vec::new();
                let mut truth = Vec::new();
                for (train, val) in folds {
                    let tr = gather(assembled, train);
                    let model = weighted_train(&tr.0, &tr.1, &tr.2, p, level, cfg)?;
                    let va = gather(assembled, val);
                    let values = model.decision_values(&va.0)?;
                    pred.extend(values.iter().map(|&d| if d >= 0.0 { 1i8 } else { -1 }));
                    truth.extend(va.1);
                }
                let mut report = compute_metrics(&pred, &truth)?;
                report.level = level;
                // Final model retrained on the whole level data.
                Ok((full()?, report))
            }
        }
    }
}

fn gather(a: &Assembled, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<i8>, Vec<f64>) {
    (
        idx.iter().map(|&i| a.points[i].clone()).collect(),
        idx.iter().map(|&i| a.labels[i]).collect(),
        idx.iter().map(|&i| a.volumes[i]).collect(),
    )
}

/// Maps solver support-vector indices (rows of the assembled set) back to
/// per-class subset indices.
fn split_sv_indices(assembled_n_plus: usize, subset: &Subset, sv: &[usize]) -> Subset {
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for &i in sv {
        if i < assembled_n_plus {
            plus.push(subset.plus[i]);
        } else {
            minus.push(subset.minus[i - assembled_n_plus]);
        }
    }
    plus.sort_unstable();
    minus.sort_unstable();
    Subset { plus, minus }
}

/// One class's uncoarsening: support-vector indices at the coarse level
/// become a training subset at the next finer level.
fn uncoarsen_class(
    coarse: &crate::coarsen::ClassLevel,
    fine_graph: &ProximityGraph,
    sv: &[usize],
    cfg: &Config,
) -> Result<Vec<usize>> {
    match &coarse.link {
        LevelLink::Amg(p) => uncoarsen_amg(sv, p, cfg.disaggregation, fine_graph),
        LevelLink::Iis(kept) => {
            let fine_svs: Vec<usize> = sv.iter().map(|&i| kept[i]).collect();
            Ok(uncoarsen_iis(&fine_svs, fine_graph, cfg.iis_neighbors))
        }
        LevelLink::Copied => Ok(sv.to_vec()),
        LevelLink::Finest => Err(Error::Solver("finest level has no parent link".into())),
    }
}

fn train_prepared(
    prepared: &Prepared,
    g_plus: ProximityGraph,
    g_minus: ProximityGraph,
    graph_secs: f64,
    cfg: &Config,
) -> Result<TrainedClassifier> {
    let total_start = Instant::now();
    let n = prepared.data.len();
    let finest_points = &prepared.data.points;
    let finest_labels = &prepared.data.labels;
    let strategy = cfg.strategy_for(n);
    let mut timings = PhaseTimings {
        graph_build: graph_secs,
        ..Default::default()
    };

    // Small problem: train exactly, full two-stage search.
    if n <= cfg.m_plus + cfg.m_minus {
        let start = Instant::now();
        let assembled = Assembled {
            points: finest_points.clone(),
            labels: finest_labels.clone(),
            volumes: vec![1.0; n],
            n_plus: 0,
        };
        let plan = make_validation_set(
            strategy,
            &assembled.labels,
            finest_labels,
            cfg.val_fraction,
            cfg.cckf_folds,
            cfg.seed,
        )?;
        let assess = make_assess(&assembled, &plan, finest_points, finest_labels, 0, cfg);
        let out = nud_search(assess, None, cfg.finest_rule(), cfg.seed)?;
        timings.coarsest_solve = start.elapsed().as_secs_f64();
        timings.total = total_start.elapsed().as_secs_f64();
        let record = LevelRecord {
            level: 0,
            plus_size: prepared.plus_idx.len(),
            minus_size: prepared.minus_idx.len(),
            training_size: n,
            models: 1,
            params: out.params,
            report: out.report,
            seconds: timings.coarsest_solve,
        };
        return Ok(TrainedClassifier {
            outcome: FinalModel::Single(out.model),
            chosen_level: 0,
            depth: 1,
            params: out.params,
            level_records: vec![record],
            normalization: prepared.data.normalization.clone(),
            config: cfg.clone(),
            timings,
            hierarchy_info: None,
        });
    }

    // Build the hierarchy.
    let start = Instant::now();
    let hierarchy = build_hierarchy(
        prepared.class_points(true),
        prepared.class_points(false),
        g_plus,
        g_minus,
        &cfg.hierarchy_config(),
    )?;
    timings.coarsening = start.elapsed().as_secs_f64();
    let depth = hierarchy.depth();
    let hierarchy_info = Some(hierarchy_summary(&hierarchy));

    // Solve the coarsest level exactly with the full two-stage search.
    let start = Instant::now();
    let coarsest_idx = depth - 1;
    let coarsest = hierarchy.coarsest();
    let all_idx = Subset {
        plus: (0..coarsest.plus.len()).collect(),
        minus: (0..coarsest.minus.len()).collect(),
    };
    let assembled = assemble(coarsest, &all_idx);
    let plan = make_validation_set(
        strategy,
        &assembled.labels,
        finest_labels,
        cfg.val_fraction,
        cfg.cckf_folds,
        cfg.seed.wrapping_add(coarsest_idx as u64),
    )?;
    let assess = make_assess(
        &assembled,
        &plan,
        finest_points,
        finest_labels,
        coarsest_idx,
        cfg,
    );
    let rule_coarse = cfg.rule;
    let out = nud_search(assess, None, rule_coarse, cfg.seed)?;
    timings.coarsest_solve = start.elapsed().as_secs_f64();

    let mut records = Vec::with_capacity(depth);
    let mut candidates: Vec<(usize, Refined, PerformanceReport)> = Vec::with_capacity(depth);
    records.push(LevelRecord {
        level: coarsest_idx,
        plus_size: coarsest.plus.len(),
        minus_size: coarsest.minus.len(),
        training_size: assembled.points.len(),
        models: 1,
        params: out.params,
        report: out.report.clone(),
        seconds: timings.coarsest_solve,
    });
    let coarsest_refined = Refined::Single {
        model: out.model.clone(),
        params: out.params,
    };
    let mut sv_subset = split_sv_indices(assembled.n_plus, &all_idx, &out.model.sv_indices);
    candidates.push((coarsest_idx, coarsest_refined, out.report.clone()));
    let mut inherited_params = out.params;
    // Parameters of the last level that produced a single model (the
    // ensemble levels pass these up unchanged).
    let mut last_single_params = out.params;

    // Uncoarsen level by level towards the finest.
    let refinement_start = Instant::now();
    for lvl in (0..coarsest_idx).rev() {
        let level_start = Instant::now();
        let fine = &hierarchy.levels[lvl];
        let coarse = &hierarchy.levels[lvl + 1];
        let t_plus = uncoarsen_class(&coarse.plus, &fine.plus.graph, &sv_subset.plus, cfg)?;
        let t_minus = uncoarsen_class(&coarse.minus, &fine.minus.graph, &sv_subset.minus, cfg)?;
        if t_plus.is_empty() || t_minus.is_empty() {
            // A class lost every support vector: keep the inherited model at
            // this level rather than training on a single class.
            log::warn!("level {lvl}: single-class training set, keeping the inherited model");
            let (_, prev, _) = candidates.last().unwrap();
            let carried = prev.clone();
            let report = validate_refined(
                &carried,
                fine,
                &Subset {
                    plus: t_plus.clone(),
                    minus: t_minus.clone(),
                },
                strategy,
                finest_points,
                finest_labels,
                lvl,
                cfg,
            )?;
            records.push(LevelRecord {
                level: lvl,
                plus_size: fine.plus.len(),
                minus_size: fine.minus.len(),
                training_size: t_plus.len() + t_minus.len(),
                models: 0,
                params: inherited_params,
                report: report.clone(),
                seconds: level_start.elapsed().as_secs_f64(),
            });
            candidates.push((lvl, carried, report));
            sv_subset = Subset {
                plus: t_plus,
                minus: t_minus,
            };
            continue;
        }
        let subset = Subset {
            plus: t_plus,
            minus: t_minus,
        };
        let assembled = assemble(fine, &subset);
        let plan = make_validation_set(
            strategy,
            &assembled.labels,
            finest_labels,
            cfg.val_fraction,
            cfg.cckf_folds,
            cfg.seed.wrapping_add(lvl as u64),
        )?;
        let graph_plus = fine.plus.graph.induced_subgraph(&subset.plus);
        let graph_minus = fine.minus.graph.induced_subgraph(&subset.minus);
        let points_plus: Vec<Vec<f64>> = subset
            .plus
            .iter()
            .map(|&i| fine.plus.points[i].clone())
            .collect();
        let points_minus: Vec<Vec<f64>> = subset
            .minus
            .iter()
            .map(|&i| fine.minus.points[i].clone())
            .collect();
        let inputs = RefineInputs {
            points_plus: &points_plus,
            points_minus: &points_minus,
            graph_plus: &graph_plus,
            graph_minus: &graph_minus,
        };
        let rule_here = if lvl == 0 { cfg.finest_rule() } else { cfg.rule };
        let assess = make_assess(&assembled, &plan, finest_points, finest_labels, lvl, cfg);
        let refined = refine_level(
            &inputs,
            inherited_params,
            cfg.q_t,
            |center| nud_search(&assess, Some(center), rule_here, cfg.seed),
            |plus_members, minus_members, params| {
                // Pair training: one weighted solve with inherited params.
                let mut pts = Vec::with_capacity(plus_members.len() + minus_members.len());
                let mut labels = Vec::with_capacity(pts.capacity());
                let mut volumes = Vec::with_capacity(pts.capacity());
                for &i in plus_members {
                    pts.push(points_plus[i].clone());
                    labels.push(1);
                    volumes.push(graph_plus.volumes[i]);
                }
                for &i in minus_members {
                    pts.push(points_minus[i].clone());
                    labels.push(-1);
                    volumes.push(graph_minus.volumes[i]);
                }
                let mut model = weighted_train(&pts, &labels, &volumes, params, lvl, cfg)?;
                // Remap pair-local SV indices to assembled-subset indices.
                model.sv_indices = model
                    .sv_indices
                    .iter()
                    .map(|&i| {
                        if i < plus_members.len() {
                            plus_members[i]
                        } else {
                            points_plus.len() + minus_members[i - plus_members.len()]
                        }
                    })
                    .collect();
                Ok(model)
            },
        )?;
        let mut report = match &plan {
            ValidationPlan::Finest => {
                eval_refined(&refined, cfg.vote_rule, finest_points, finest_labels)?
            }
            ValidationPlan::FinestSample(idx) => {
                let pts: Vec<Vec<f64>> = idx.iter().map(|&i| finest_points[i].clone()).collect();
                let lbl: Vec<i8> = idx.iter().map(|&i| finest_labels[i]).collect();
                eval_refined(&refined, cfg.vote_rule, &pts, &lbl)?
            }
            ValidationPlan::Holdout { val, .. } => {
                let va = gather(&assembled, val);
                eval_refined(&refined, cfg.vote_rule, &va.0, &va.1)?
            }
            ValidationPlan::LevelFolds(_) => {
                // CCkF: validate the final refined output on the whole level.
                eval_refined(&refined, cfg.vote_rule, &assembled.points, &assembled.labels)?
            }
        };
        report.level = lvl;
        let sv_local = refined.support_indices();
        // Alg.-style parameter inheritance: ensembles pass the last single
        // model's parameters to the next finer level.
        let next_params = match &refined {
            Refined::Single { params, .. } => {
                last_single_params = *params;
                *params
            }
            Refined::Ensemble { .. } => last_single_params,
        };
        records.push(LevelRecord {
            level: lvl,
            plus_size: fine.plus.len(),
            minus_size: fine.minus.len(),
            training_size: assembled.points.len(),
            models: match &refined {
                Refined::Single { .. } => 1,
                Refined::Ensemble { ensemble, .. } => ensemble.models.len(),
            },
            params: refined.params(),
            report: report.clone(),
            seconds: level_start.elapsed().as_secs_f64(),
        });
        sv_subset = split_sv_indices(assembled.n_plus, &subset, &sv_local);
        candidates.push((lvl, refined, report));
        inherited_params = next_params;
    }
    timings.refinement = refinement_start.elapsed().as_secs_f64();

    // Cross-level choice.
    let scored: Vec<Candidate> = candidates
        .iter()
        .map(|(lvl, refined, report)| Candidate {
            params: refined.params(),
            report: report.clone(),
            sv_count: refined.support_indices().len(),
            level: *lvl,
        })
        .collect();
    let best = crate::modelsel::select_best(&scored, cfg.rule)?;
    let (chosen_level, chosen, _) = candidates.swap_remove(best);
    let params = chosen.params();
    let outcome = match chosen {
        Refined::Single { model, .. } => FinalModel::Single(model),
        Refined::Ensemble { ensemble, .. } => FinalModel::Ensemble(ensemble),
    };
    timings.total = total_start.elapsed().as_secs_f64();
    records.sort_by_key(|r| r.level);
    Ok(TrainedClassifier {
        outcome,
        chosen_level,
        depth,
        params,
        level_records: records,
        normalization: prepared.data.normalization.clone(),
        config: cfg.clone(),
        timings,
        hierarchy_info,
    })
}

/// Validates an inherited (not retrained) model at a level.
#[allow(clippy::too_many_arguments)]
fn validate_refined(
    refined: &Refined,
    level: &Level,
    subset: &Subset,
    strategy: ValidationStrategy,
    finest_points: &[Vec<f64>],
    finest_labels: &[i8],
    lvl: usize,
    cfg: &Config,
) -> Result<PerformanceReport> {
    let mut report = match strategy {
        ValidationStrategy::Ff | ValidationStrategy::Fs => {
            eval_refined(refined, cfg.vote_rule, finest_points, finest_labels)?
        }
        _ => {
            let assembled = assemble(level, subset);
            if assembled.points.is_empty() {
                eval_refined(refined, cfg.vote_rule, finest_points, finest_labels)?
            } else {
                eval_refined(refined, cfg.vote_rule, &assembled.points, &assembled.labels)?
            }
        }
    };
    report.level = lvl;
    Ok(report)
}

/// Mean and standard deviation of each performance measure.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub sn: f64,
    pub sp: f64,
    pub gmean: f64,
    pub acc: f64,
    pub ppv: f64,
    pub f1: f64,
}

/// Aggregated cross-validation outcome.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub repeats: usize,
    pub mean: MetricSummary,
    pub std: MetricSummary,
    pub per_fold: Vec<PerformanceReport>,
    pub depths: Vec<usize>,
    pub chosen_levels: Vec<usize>,
    pub wall_seconds: f64,
}

/// Stratified k-fold cross-validation with `repeats` independently
/// shuffled passes. Test folds never appear in training or validation; the
/// proximity graphs are built once on the full feature matrix and their
/// fold-restricted subgraphs are reused, as is z-score normalization.
pub fn cross_validate(
    data: &Dataset,
    cfg: &Config,
    k: usize,
    repeats: usize,
) -> Result<AggregateReport> {
    cfg.validate()?;
    if k < 2 {
        return Err(Error::Dataset(format!("fold count {k} < 2")));
    }
    let repeats = repeats.max(1);
    let start = Instant::now();
    let pool = thread_pool(cfg.threads)?;
    pool.install(|| {
        let prepared = prepare(data, cfg)?;
        let (g_plus_full, g_minus_full, graph_secs) = build_class_graphs(&prepared, cfg)?;
        let mut per_fold = Vec::with_capacity(k * repeats);
        let mut depths = Vec::with_capacity(k * repeats);
        let mut chosen_levels = Vec::with_capacity(k * repeats);
        for rep in 0..repeats {
            let fold_seed = cfg.seed.wrapping_add(0x5eed * rep as u64);
            let folds = kfold_split(&prepared.data, k, fold_seed)?;
            for fold in 0..k {
                let (test_idx, train_idx) = folds.split(fold);
                debug_assert!(test_idx.iter().all(|i| !train_idx.contains(i)));
                let train_data = prepared.data.subset(&train_idx);
                let train_prep = Prepared {
                    plus_idx: train_data
                        .labels
                        .iter()
                        .enumerate()
                        .filter(|(_, &y)| y > 0)
                        .map(|(i, _)| i)
                        .collect(),
                    minus_idx: train_data
                        .labels
                        .iter()
                        .enumerate()
                        .filter(|(_, &y)| y < 0)
                        .map(|(i, _)| i)
                        .collect(),
                    data: train_data,
                };
                // Restrict the full graphs to the training members of each
                // class: positions within the class-ordered node lists.
                let (gp, gm) = if prepared.data.len() <= cfg.m_plus + cfg.m_minus {
                    let g = ProximityGraph::from_edges(0, Vec::new(), Vec::new())?;
                    (g.clone(), g)
                } else {
                    let train_set: std::collections::BTreeSet<usize> =
                        train_idx.iter().copied().collect();
                    let keep_plus: Vec<usize> = prepared
                        .plus_idx
                        .iter()
                        .enumerate()
                        .filter(|(_, row)| train_set.contains(row))
                        .map(|(pos, _)| pos)
                        .collect();
                    let keep_minus: Vec<usize> = prepared
                        .minus_idx
                        .iter()
                        .enumerate()
                        .filter(|(_, row)| train_set.contains(row))
                        .map(|(pos, _)| pos)
                        .collect();
                    (
                        g_plus_full.induced_subgraph(&keep_plus),
                        g_minus_full.induced_subgraph(&keep_minus),
                    )
                };
                let mut fold_cfg = cfg.clone();
                fold_cfg.seed = cfg.seed.wrapping_add(fold as u64).wrapping_add(
                    0x00f0_1d00u64.wrapping_mul(rep as u64),
                );
                let classifier =
                    train_prepared(&train_prep, gp, gm, graph_secs / k as f64, &fold_cfg)?;
                let test_points: Vec<Vec<f64>> = test_idx
                    .iter()
                    .map(|&i| prepared.data.points[i].clone())
                    .collect();
                let test_labels: Vec<i8> =
                    test_idx.iter().map(|&i| prepared.data.labels[i]).collect();
                let (_, pred) = classifier.predict_normalized(&test_points)?;
                let mut report = compute_metrics(&pred, &test_labels)?;
                report.level = classifier.chosen_level;
                report.wall_seconds = classifier.timings.total;
                depths.push(classifier.depth);
                chosen_levels.push(classifier.chosen_level);
                per_fold.push(report);
            }
        }
        let mean = summarize(&per_fold, |v, n| v / n);
        let std = {
            let m = mean.clone();
            let n = per_fold.len() as f64;
            let var = |f: &dyn Fn(&PerformanceReport) -> f64, mu: f64| {
                (per_fold.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / n).sqrt()
            };
            MetricSummary {
                sn: var(&|r| r.sn, m.sn),
                sp: var(&|r| r.sp, m.sp),
                gmean: var(&|r| r.gmean, m.gmean),
                acc: var(&|r| r.acc, m.acc),
                ppv: var(&|r| r.ppv, m.ppv),
                f1: var(&|r| r.f1, m.f1),
            }
        };
        Ok(AggregateReport {
            folds: k,
            repeats,
            mean,
            std,
            per_fold,
            depths,
            chosen_levels,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    })
}

fn summarize(reports: &[PerformanceReport], reduce: fn(f64, f64) -> f64) -> MetricSummary {
    let n = reports.len() as f64;
    MetricSummary {
        sn: reduce(reports.iter().map(|r| r.sn).sum(), n),
        sp: reduce(reports.iter().map(|r| r.sp).sum(), n),
        gmean: reduce(reports.iter().map(|r| r.gmean).sum(), n),
        acc: reduce(reports.iter().map(|r| r.acc).sum(), n),
        ppv: reduce(reports.iter().map(|r| r.ppv).sum(), n),
        f1: reduce(reports.iter().map(|r| r.f1).sum(), n),
    }
}
