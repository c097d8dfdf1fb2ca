//! Performance metrics, nested-uniform-design parameter search with
//! coarse-level center inheritance, validation-set strategies, and best-model
//! selection across candidates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::qp::SvmModel;
use crate::{Error, Result};

/// Confusion counts and the derived measures. Ratios with a zero denominator
/// are reported as 0 and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub sn: f64,
    pub sp: f64,
    pub gmean: f64,
    pub acc: f64,
    pub ppv: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator.
    pub undefined_ratio: bool,
    pub wall_seconds: f64,
    pub level: usize,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion metrics of predicted vs. true labels.
pub fn compute_metrics(predicted: &[i8], truth: &[i8]) -> Result<PerformanceReport> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::ModelSelection(format!(
            "metrics need equal nonempty label vectors, got {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p > 0, t > 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut undefined = false;
    let sn = ratio(tp, tp + fn_, &mut undefined);
    let sp = ratio(tn, tn + fp, &mut undefined);
    let acc = (tp + tn) as f64 / predicted.len() as f64;
    let ppv = ratio(tp, tp + fp, &mut undefined);
    let f1 = if ppv + sn == 0.0 {
        undefined = true;
        0.0
    } else {
        2.0 * ppv * sn / (ppv + sn)
    };
    Ok(PerformanceReport {
        tp,
        tn,
        fp,
        fn_,
        sn,
        sp,
        gmean: (sn * sp).sqrt(),
        acc,
        ppv,
        f1,
        undefined_ratio: undefined,
        wall_seconds: 0.0,
        level: 0,
    })
}

/// A (log2 C, log2 gamma) candidate inside the search box [-10, 10]^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    pub log2_c: f64,
    pub log2_gamma: f64,
}

impl ParamPoint {
    pub fn c(&self) -> f64 {
        self.log2_c.exp2()
    }

    pub fn gamma(&self) -> f64 {
        self.log2_gamma.exp2()
    }
}

/// Half side length of the log2 search box.
pub const PARAM_BOX: f64 = 10.0;
/// Half width of the stage-2 refinement box, in log2 units.
pub const STAGE2_HALF_WIDTH: f64 = 2.0;

/// Golden-ratio lattice: m low-discrepancy points in the unit square.
fn lattice(m: usize) -> Vec<(f64, f64)> {
    const PHI_FRAC: f64 = 0.618_033_988_7;
    (0..m)
        .map(|t| {
            let u = (t as f64 + 0.5) / m as f64;
            let v = (t as f64 * PHI_FRAC).fract();
            (u, v)
        })
        .collect()
}

/// Stage-1 design: 9 points spanning the whole box.
pub fn stage1_design() -> Vec<ParamPoint> {
    lattice(9)
        .into_iter()
        .map(|(u, v)| ParamPoint {
            log2_c: -PARAM_BOX + 2.0 * PARAM_BOX * u,
            log2_gamma: -PARAM_BOX + 2.0 * PARAM_BOX * v,
        })
        .collect()
}

/// Stage-2 design: 13 points in a half-width-2 box around the center,
/// clamped back into the global bounds.
pub fn stage2_design(center: ParamPoint) -> Vec<ParamPoint> {
    lattice(13)
        .into_iter()
        .map(|(u, v)| ParamPoint {
            log2_c: (center.log2_c - STAGE2_HALF_WIDTH + 2.0 * STAGE2_HALF_WIDTH * u)
                .clamp(-PARAM_BOX, PARAM_BOX),
            log2_gamma: (center.log2_gamma - STAGE2_HALF_WIDTH + 2.0 * STAGE2_HALF_WIDTH * v)
                .clamp(-PARAM_BOX, PARAM_BOX),
        })
        .collect()
}

/// Rule for ranking candidate models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionRule {
    Gmean,
    GmeanThenSn,
    Accuracy,
}

/// One ranked candidate.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub params: ParamPoint,
    pub report: PerformanceReport,
    pub sv_count: usize,
    pub level: usize,
}

/// Comparator: `Greater` means `a` is the better candidate. The tie chain
/// after the headline metric is fewer support vectors, then the coarser
/// (higher-index) level, then ascending parameters, making the order total
/// on distinct candidates and the winner order-independent.
pub fn candidate_order(a: &Candidate, b: &Candidate, rule: SelectionRule) -> std::cmp::Ordering {
    use std::cmp::Ordering;
    let head = match rule {
        SelectionRule::Accuracy => a.report.acc.total_cmp(&b.report.acc),
        SelectionRule::Gmean => a.report.gmean.total_cmp(&b.report.gmean),
        SelectionRule::GmeanThenSn => a
            .report
            .gmean
            .total_cmp(&b.report.gmean)
            .then(a.report.sn.total_cmp(&b.report.sn)),
    };
    head.then_with(|| b.sv_count.cmp(&a.sv_count))
        .then_with(|| a.level.cmp(&b.level))
        .then_with(|| b.params.log2_c.total_cmp(&a.params.log2_c))
        .then_with(|| b.params.log2_gamma.total_cmp(&a.params.log2_gamma))
        .then(Ordering::Equal)
}

/// Index of the best candidate under the rule.
pub fn select_best(candidates: &[Candidate], rule: SelectionRule) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::ModelSelection("no candidates".into()));
    }
    let mut best = 0usize;
    for i in 1..candidates.len() {
        if candidate_order(&candidates[i], &candidates[best], rule) == std::cmp::Ordering::Greater
        {
            best = i;
        }
    }
    Ok(best)
}

/// Which data validates the models trained during model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationStrategy {
    /// Coarse sampling: hold out a fraction of the current level.
    Cs,
    /// Coarse cross k-fold over the current level.
    CCkF,
    /// Finest full: validate on the whole finest-level training set.
    Ff,
    /// Fine sampling: validate on a sampled fraction of the finest set.
    Fs,
}

/// Materialized validation plan, as index sets.
#[derive(Debug, Clone)]
pub enum ValidationPlan {
    /// Train on `train`, validate on `val`; both index the level data.
    Holdout { train: Vec<usize>, val: Vec<usize> },
    /// Fold schedule over the level data: (train, val) pairs.
    LevelFolds(Vec<(Vec<usize>, Vec<usize>)>),
    /// Train on the whole level, validate on all finest training points.
    Finest,
    /// Train on the whole level, validate on these finest-set indices.
    FinestSample(Vec<usize>),
}

/// Stratified sample of `fraction` of the indices of each class.
fn stratified_sample(labels: &[i8], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = Vec::new();
    for class in [1i8, -1] {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(rng);
        let take = ((idx.len() as f64) * fraction).round().max(1.0) as usize;
        picked.extend(idx.into_iter().take(take));
    }
    picked.sort_unstable();
    picked
}

/// Builds the validation plan for one level. `level_labels` are the labels of
/// the current-level training data; `finest_labels` those of the finest-level
/// training set. CS/CCkF need at least two points per class at the level.
pub fn make_validation_set(
    strategy: ValidationStrategy,
    level_labels: &[i8],
    finest_labels: &[i8],
    fraction: f64,
    cckf_folds: usize,
    seed: u64,
) -> Result<ValidationPlan> {
    if !(0.0..=0.5).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::ModelSelection(format!(
            "validation fraction {fraction} outside (0, 0.5]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        ValidationStrategy::Ff => Ok(ValidationPlan::Finest),
        ValidationStrategy::Fs => Ok(ValidationPlan::FinestSample(stratified_sample(
            finest_labels,
            fraction,
            &mut rng,
        ))),
        ValidationStrategy::Cs => {
            check_two_per_class(level_labels)?;
            let val = stratified_sample(level_labels, fraction, &mut rng);
            let in_val: std::collections::BTreeSet<usize> = val.iter().copied().collect();
            let train: Vec<usize> = (0..level_labels.len())
                .filter(|i| !in_val.contains(i))
                .collect();
            if !has_both_classes(&train, level_labels) || !has_both_classes(&val, level_labels) {
                return Err(Error::ModelSelection(
                    "level too small to hold out a stratified sample".into(),
                ));
            }
            Ok(ValidationPlan::Holdout { train, val })
        }
        ValidationStrategy::CCkF => {
            check_two_per_class(level_labels)?;
            let k = cckf_folds.max(2);
            let mut fold_id = vec![0usize; level_labels.len()];
            for class in [1i8, -1] {
                let mut idx: Vec<usize> = level_labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &y)| y == class)
                    .map(|(i, _)| i)
                    .collect();
                let k = k.min(idx.len());
                idx.shuffle(&mut rng);
                for (pos, i) in idx.into_iter().enumerate() {
                    fold_id[i] = pos % k;
                }
            }
            let mut folds = Vec::new();
            for f in 0..k {
                let val: Vec<usize> = (0..level_labels.len())
                    .filter(|&i| fold_id[i] == f)
                    .collect();
                let train: Vec<usize> = (0..level_labels.len())
                    .filter(|&i| fold_id[i] != f)
                    .collect();
                if !val.is_empty()
                    && has_both_classes(&train, level_labels)
                    && has_both_classes(&val, level_labels)
                {
                    folds.push((train, val));
                }
            }
            if folds.is_empty() {
                return Err(Error::ModelSelection("no usable folds at this level".into()));
            }
            Ok(ValidationPlan::LevelFolds(folds))
        }
    }
}

fn check_two_per_class(labels: &[i8]) -> Result<()> {
    let pos = labels.iter().filter(|&&y| y > 0).count();
    let neg = labels.len() - pos;
    if pos < 2 || neg < 2 {
        return Err(Error::ModelSelection(format!(
            "level data too small to split: {pos} positive, {neg} negative"
        )));
    }
    Ok(())
}

fn has_both_classes(indices: &[usize], labels: &[i8]) -> bool {
    indices.iter().any(|&i| labels[i] > 0) && indices.iter().any(|&i| labels[i] < 0)
}

/// Result of one NUD run.
#[derive(Debug, Clone)]
pub struct NudOutcome {
    pub params: ParamPoint,
    pub model: SvmModel,
    pub report: PerformanceReport,
    /// Number of (candidate) trainings executed.
    pub trainings: usize,
}

/// Nested uniform design search. Without a center the full two-stage scheme
/// runs (9 wide candidates, then 13 refined around the stage-1 winner); with
/// an inherited center only the 13-point refinement stage runs.
///
/// `assess` must train a model for a parameter point and score it on the
/// validation data (for fold-schedule validation it may train several fold
/// models internally and return the averaged report with a final model).
/// Candidates are assessed independently (in parallel) and reduced
/// deterministically. If every candidate report has an undefined ratio
/// (single-class validation), selection falls back to the accuracy objective
/// with a warning.
///
/// `seed` is accepted for interface stability; the design itself is a fixed
/// lattice, so the search is deterministic regardless.
pub fn nud_search<A>(
    assess: A,
    center: Option<ParamPoint>,
    rule: SelectionRule,
    _seed: u64,
) -> Result<NudOutcome>
where
    A: Fn(ParamPoint) -> Result<(SvmModel, PerformanceReport)> + Sync,
{
    let mut trainings = 0usize;

    let run_stage = |design: Vec<ParamPoint>,
                     trainings: &mut usize|
     -> Result<Vec<(ParamPoint, SvmModel, PerformanceReport)>> {
        *trainings += design.len();
        design
            .into_par_iter()
            .map(|p| {
                let (model, report) = assess(p)?;
                Ok((p, model, report))
            })
            .collect()
    };

    let pick = |scored: &[(ParamPoint, SvmModel, PerformanceReport)],
                rule: SelectionRule|
     -> Result<usize> {
        let candidates: Vec<Candidate> = scored
            .iter()
            .map(|(p, m, r)| Candidate {
                params: *p,
                report: r.clone(),
                sv_count: m.support_vectors.len(),
                level: m.level,
            })
            .collect();
        let effective_rule = if candidates.iter().all(|c| c.report.undefined_ratio) {
            log::warn!("degenerate validation set: falling back to accuracy objective");
            SelectionRule::Accuracy
        } else {
            rule
        };
        select_best(&candidates, effective_rule)
    };

    let stage2_center = match center {
        Some(c) => c,
        None => {
            let scored = run_stage(stage1_design(), &mut trainings)?;
            let best = pick(&scored, rule)?;
            scored[best].0
        }
    };
    let mut scored = run_stage(stage2_design(stage2_center), &mut trainings)?;
    let best = pick(&scored, rule)?;
    let (params, model, report) = scored.swap_remove(best);
    Ok(NudOutcome {
        params,
        model,
        report,
        trainings,
    })
}
