//! Versioned text serialization of trained classifiers.
//!
//! Layout: a `MLSVM1` magic line, the mode (`single` or `ensemble`), the
//! voting rule, the searched parameters and chosen level, per-feature
//! normalization stats, then each model: gamma, C, class weights, bias, the
//! support-vector count and one line per support vector (`alpha*y` followed
//! by the dense feature values). Ensembles append the pair centroids,
//! midpoint and volume sums per model. Unknown versions are rejected.

use std::path::Path;

use crate::data::apply_stats_row;
use crate::driver::{mlsvm_predict_outcome, FinalModel, TrainedClassifier};
use crate::modelsel::ParamPoint;
use crate::qp::SvmModel;
use crate::refine::{ModelEnsemble, PairModel, VoteRule};
use crate::{Error, Result};

const MAGIC: &str = "MLSVM1";

/// A classifier reloaded from its file form: everything prediction needs.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub outcome: FinalModel,
    pub vote_rule: VoteRule,
    pub params: ParamPoint,
    pub chosen_level: usize,
    pub normalization: Option<Vec<(f64, f64)>>,
}

impl LoadedModel {
    /// Predicts raw points, applying the stored normalization first.
    pub fn predict(&self, points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<i8>)> {
        let prepared: Vec<Vec<f64>> = match &self.normalization {
            Some(stats) => points.iter().map(|p| apply_stats_row(p, stats)).collect(),
            None => points.to_vec(),
        };
        mlsvm_predict_outcome(&self.outcome, self.vote_rule, &prepared)
    }
}

fn push_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format!("{v}"));
    }
    out.push('\n');
}

fn write_svm(out: &mut String, m: &SvmModel) {
    out.push_str(&format!("gamma {}\n", m.gamma));
    out.push_str(&format!("c {}\n", m.c));
    out.push_str(&format!("wpos {}\n", m.w_pos));
    out.push_str(&format!("wneg {}\n", m.w_neg));
    out.push_str(&format!("b {}\n", m.bias));
    out.push_str(&format!("svs {}\n", m.support_vectors.len()));
    for (sv, &coef) in m.support_vectors.iter().zip(&m.coefficients) {
        let mut row = Vec::with_capacity(sv.len() + 1);
        row.push(coef);
        row.extend_from_slice(sv);
        push_floats(out, &row);
    }
}

/// Renders a trained classifier in the versioned text format.
pub fn write_model_file(c: &TrainedClassifier) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let (mode, models): (&str, Vec<(&SvmModel, Option<&PairModel>)>) = match &c.outcome {
        FinalModel::Single(m) => ("single", vec![(m, None)]),
        FinalModel::Ensemble(e) => (
            "ensemble",
            e.models.iter().map(|pm| (&pm.model, Some(pm))).collect(),
        ),
    };
    out.push_str(&format!("mode {mode}\n"));
    out.push_str(&format!(
        "vote {}\n",
        match c.config.vote_rule {
            VoteRule::DistanceWeighted => "distance",
            VoteRule::Majority => "majority",
        }
    ));
    out.push_str(&format!("params {} {}\n", c.params.log2_c, c.params.log2_gamma));
    out.push_str(&format!("level {}\n", c.chosen_level));
    match &c.normalization {
        Some(stats) => {
            out.push_str(&format!("norm {}\n", stats.len()));
            for &(mean, std) in stats {
                out.push_str(&format!("{mean} {std}\n"));
            }
        }
        None => out.push_str("norm 0\n"),
    }
    out.push_str(&format!("models {}\n", models.len()));
    for (i, (m, pm)) in models.iter().enumerate() {
        out.push_str(&format!("model {i}\n"));
        write_svm(&mut out, m);
        if let Some(pm) = pm {
            out.push_str("centroid_pos ");
            push_floats(&mut out, &pm.centroid_plus);
            out.push_str("centroid_neg ");
            push_floats(&mut out, &pm.centroid_minus);
            out.push_str("midpoint ");
            push_floats(&mut out, &pm.midpoint);
            out.push_str(&format!("volpos {}\n", pm.volume_plus));
            out.push_str(&format!("volneg {}\n", pm.volume_minus));
        }
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.inner
            .next()
            .ok_or_else(|| Error::ModelFormat(format!("truncated at line {}", self.line_no)))
    }

    fn field(&mut self, name: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(name)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| {
                Error::ModelFormat(format!(
                    "expected `{name} ...` at line {}, got {line:?}",
                    self.line_no
                ))
            })
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::ModelFormat(format!("bad float {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::ModelFormat(format!("non-finite value {s:?}")));
    }
    Ok(v)
}

fn parse_count(s: &str, limit: usize) -> Result<usize> {
    let v: usize = s
        .trim()
        .parse()
        .map_err(|_| Error::ModelFormat(format!("bad count {s:?}")))?;
    if v > limit {
        return Err(Error::ModelFormat(format!("implausible count {v}")));
    }
    Ok(v)
}

fn parse_float_row(line: &str) -> Result<Vec<f64>> {
    line.split_ascii_whitespace().map(parse_f64).collect()
}

fn parse_svm(lines: &mut Lines<'_>) -> Result<SvmModel> {
    let gamma = parse_f64(lines.field("gamma")?)?;
    let c = parse_f64(lines.field("c")?)?;
    let w_pos = parse_f64(lines.field("wpos")?)?;
    let w_neg = parse_f64(lines.field("wneg")?)?;
    let bias = parse_f64(lines.field("b")?)?;
    let sv_count = parse_count(lines.field("svs")?, 50_000_000)?;
    if gamma <= 0.0 {
        return Err(Error::ModelFormat(format!("gamma {gamma} not positive")));
    }
    let mut support_vectors = Vec::with_capacity(sv_count.min(1 << 20));
    let mut coefficients = Vec::with_capacity(sv_count.min(1 << 20));
    let mut dim: Option<usize> = None;
    for _ in 0..sv_count {
        let row = parse_float_row(lines.next()?)?;
        if row.is_empty() {
            return Err(Error::ModelFormat("empty support-vector line".into()));
        }
        match dim {
            None => dim = Some(row.len() - 1),
            Some(d) if d != row.len() - 1 => {
                return Err(Error::ModelFormat(format!(
                    "support vector with {} features, expected {d}",
                    row.len() - 1
                )))
            }
            _ => {}
        }
        coefficients.push(row[0]);
        support_vectors.push(row[1..].to_vec());
    }
    Ok(SvmModel {
        support_vectors,
        coefficients,
        bias,
        gamma,
        c,
        w_pos,
        w_neg,
        sv_indices: Vec::new(),
        level: 0,
        iterations: 0,
        converged: true,
        objective: 0.0,
        kkt_violation: 0.0,
    })
}

/// Parses the versioned text form, rejecting unknown versions and malformed
/// bodies.
pub fn parse_model_file(text: &str) -> Result<LoadedModel> {
    let mut lines = Lines {
        inner: text.lines(),
        line_no: 0,
    };
    let magic = lines.next()?;
    if magic != MAGIC {
        return Err(Error::ModelFormat(format!(
            "unknown version {magic:?}, expected {MAGIC}"
        )));
    }
    let mode = lines.field("mode")?;
    let ensemble = match mode {
        "single" => false,
        "ensemble" => true,
        other => return Err(Error::ModelFormat(format!("unknown mode {other:?}"))),
    };
    let vote_rule = match lines.field("vote")? {
        "distance" => VoteRule::DistanceWeighted,
        "majority" => VoteRule::Majority,
        other => return Err(Error::ModelFormat(format!("unknown vote rule {other:?}"))),
    };
    let params_row = parse_float_row(lines.field("params")?)?;
    if params_row.len() != 2 {
        return Err(Error::ModelFormat("params line needs two values".into()));
    }
    let params = ParamPoint {
        log2_c: params_row[0],
        log2_gamma: params_row[1],
    };
    let chosen_level = parse_count(lines.field("level")?, 1 << 16)?;
    let norm_len = parse_count(lines.field("norm")?, 10_000_000)?;
    let normalization = if norm_len == 0 {
        None
    } else {
        let mut stats = Vec::with_capacity(norm_len.min(1 << 20));
        for _ in 0..norm_len {
            let row = parse_float_row(lines.next()?)?;
            if row.len() != 2 {
                return Err(Error::ModelFormat("norm line needs mean and stddev".into()));
            }
            stats.push((row[0], row[1]));
        }
        Some(stats)
    };
    let model_count = parse_count(lines.field("models")?, 1 << 20)?;
    if model_count == 0 {
        return Err(Error::ModelFormat("model count must be positive".into()));
    }
    if !ensemble && model_count != 1 {
        return Err(Error::ModelFormat(format!(
            "single mode with {model_count} models"
        )));
    }
    let mut pair_models = Vec::with_capacity(model_count.min(1 << 12));
    let mut single_model = None;
    for i in 0..model_count {
        let idx = parse_count(lines.field("model")?, 1 << 20)?;
        if idx != i {
            return Err(Error::ModelFormat(format!(
                "model index {idx} out of order, expected {i}"
            )));
        }
        let model = parse_svm(&mut lines)?;
        if ensemble {
            let centroid_plus = parse_float_row(lines.field("centroid_pos")?)?;
            let centroid_minus = parse_float_row(lines.field("centroid_neg")?)?;
            let midpoint = parse_float_row(lines.field("midpoint")?)?;
            let volume_plus = parse_f64(lines.field("volpos")?)?;
            let volume_minus = parse_f64(lines.field("volneg")?)?;
            if centroid_plus.len() != midpoint.len() || centroid_minus.len() != midpoint.len() {
                return Err(Error::ModelFormat("centroid dimension mismatch".into()));
            }
            pair_models.push(PairModel {
                model,
                centroid_plus,
                centroid_minus,
                volume_plus,
                volume_minus,
                midpoint,
            });
        } else {
            single_model = Some(model);
        }
    }
    let tail = lines.next()?;
    if tail != "end" {
        return Err(Error::ModelFormat(format!(
            "expected end marker, got {tail:?}"
        )));
    }
    let outcome = if ensemble {
        FinalModel::Ensemble(ModelEnsemble {
            models: pair_models,
        })
    } else {
        FinalModel::Single(single_model.expect("single mode parsed one model"))
    };
    Ok(LoadedModel {
        outcome,
        vote_rule,
        params,
        chosen_level,
        normalization,
    })
}

pub fn save_model_file(path: &Path, c: &TrainedClassifier) -> Result<()> {
    std::fs::write(path, write_model_file(c)).map_err(|e| Error::io(path, e))
}

pub fn load_model_file(path: &Path) -> Result<LoadedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model_file(&text)
}
