//! Dataset ingestion, z-score normalization, stratified k-fold splitting and
//! synthetic benchmark generators.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Labeled feature vectors split into a minority (+1) and majority (-1) class.
///
/// Labels are always stored as -1/+1. `normalization` holds the per-feature
/// (mean, stddev) pairs captured by [`zscore_normalize`] so the same affine
/// map can be applied to test points later.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<i8>,
    pub normalization: Option<Vec<(f64, f64)>>,
}

impl Dataset {
    /// Validates the core invariants: at least two samples, rectangular
    /// feature matrix, labels in {-1, +1}.
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<i8>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 samples, got {}",
                points.len()
            )));
        }
        if points.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        let dim = points[0].len();
        if let Some(i) = points.iter().position(|p| p.len() != dim) {
            return Err(Error::Dataset(format!(
                "row {} has {} features, expected {}",
                i,
                points[i].len(),
                dim
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y != 1 && y != -1) {
            return Err(Error::Dataset(format!(
                "label at row {} is {}, expected -1 or +1",
                i, labels[i]
            )));
        }
        Ok(Dataset {
            points,
            labels,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    /// (n+, n-) class counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y > 0).count();
        (pos, self.labels.len() - pos)
    }

    /// Indices of the minority (+1) and majority (-1) classes, in row order.
    pub fn class_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            if y > 0 {
                pos.push(i);
            } else {
                neg.push(i);
            }
        }
        (pos, neg)
    }

    /// Row subset preserving order; normalization state is carried over.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            normalization: self.normalization.clone(),
        }
    }
}

/// Parses CSV text into a dataset. `label_column` indexes the raw columns;
/// the remaining columns become features in order. Labels may be -1/+1 or
/// 0/1 (0 is remapped to -1). Errors carry the 1-based data row number.
pub fn parse_csv(text: &str, label_column: usize, has_header: bool) -> Result<Dataset> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let mut lines = text.lines().enumerate();
    if has_header {
        lines.next();
    }
    let mut row_no = 0usize;
    for (_, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        row_no += 1;
        let fields: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::Csv {
                    row: row_no,
                    msg: format!("ragged row: {} fields, expected {}", fields.len(), w),
                })
            }
            _ => {}
        }
        if label_column >= fields.len() {
            return Err(Error::Csv {
                row: row_no,
                msg: format!(
                    "label column {} out of range for {} fields",
                    label_column,
                    fields.len()
                ),
            });
        }
        let raw_label: f64 = fields[label_column].trim().parse().map_err(|_| Error::Csv {
            row: row_no,
            msg: format!("label {:?} is not numeric", fields[label_column]),
        })?;
        let label = match raw_label {
            x if x == 1.0 => 1,
            x if x == -1.0 => -1,
            x if x == 0.0 => -1,
            other => {
                return Err(Error::Csv {
                    row: row_no,
                    msg: format!("label {} outside accepted set {{-1, 0, 1}}", other),
                })
            }
        };
        let mut feats = Vec::with_capacity(fields.len() - 1);
        for (c, field) in fields.iter().enumerate() {
            if c == label_column {
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| Error::Csv {
                row: row_no,
                msg: format!("feature column {} value {:?} is not numeric", c, field),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row: row_no,
                    msg: format!("feature column {} value {} is not finite", c, v),
                });
            }
            feats.push(v);
        }
        points.push(feats);
        labels.push(label);
    }
    Dataset::new(points, labels)
}

/// Loads a comma-separated UTF-8 file. See [`parse_csv`].
pub fn load_csv(path: &Path, label_column: usize, has_header: bool) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, label_column, has_header)
}

/// Centers every feature column to mean 0 and scales by the population
/// standard deviation. Zero-spread columns become all-zero. The (mean,
/// stddev) pairs are stored on the result for later application to test
/// points.
pub fn zscore_normalize(d: &Dataset) -> Dataset {
    let n = d.len();
    let dim = d.dim();
    let mut stats = Vec::with_capacity(dim);
    for c in 0..dim {
        let mean = d.points.iter().map(|p| p[c]).sum::<f64>() / n as f64;
        let var = d.points.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>() / n as f64;
        stats.push((mean, var.sqrt()));
    }
    let points = d
        .points
        .iter()
        .map(|p| apply_stats_row(p, &stats))
        .collect();
    Dataset {
        points,
        labels: d.labels.clone(),
        normalization: Some(stats),
    }
}

/// Applies stored (mean, stddev) pairs to one raw feature row.
pub fn apply_stats_row(row: &[f64], stats: &[(f64, f64)]) -> Vec<f64> {
    row.iter()
        .zip(stats)
        .map(|(&x, &(mean, std))| if std > 0.0 { (x - mean) / std } else { 0.0 })
        .collect()
}

/// Stratified fold assignment: within each class the shuffled samples are
/// dealt round-robin, so per-class fold sizes differ by at most one.
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    pub fold_id: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// (test, train) index sets for one fold, both in ascending row order.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut test = Vec::new();
        let mut train = Vec::new();
        for (i, &f) in self.fold_id.iter().enumerate() {
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (test, train)
    }
}

/// Stratified k-fold split, deterministic for a given seed.
pub fn kfold_split(d: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Dataset(format!("fold count {} < 2", k)));
    }
    let (pos, neg) = d.class_indices();
    for (name, class) in [("minority", &pos), ("majority", &neg)] {
        if class.len() < k {
            return Err(Error::Dataset(format!(
                "{} class has {} samples, fewer than {} folds",
                name,
                class.len(),
                k
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_id = vec![0usize; d.len()];
    for class in [pos, neg] {
        let mut shuffled = class;
        shuffled.shuffle(&mut rng);
        for (pos_in_class, idx) in shuffled.into_iter().enumerate() {
            fold_id[idx] = pos_in_class % k;
        }
    }
    Ok(FoldAssignment { fold_id, k, seed })
}

/// Synthetic benchmark family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Two unit-covariance Gaussians at +/-(a,...,a), a = 2/sqrt(20), d = 20.
    Twonorm,
    /// Class -1 ~ N(0, 4I), class +1 ~ N((a,...,a), I), a = 2/sqrt(20), d = 20.
    Ringnorm,
}

impl SyntheticKind {
    /// Fraction of +1 samples, matching the published class sizes.
    fn positive_fraction(self) -> f64 {
        match self {
            SyntheticKind::Twonorm => 3703.0 / 7400.0,
            SyntheticKind::Ringnorm => 3664.0 / 7400.0,
        }
    }
}

pub const SYNTHETIC_DIM: usize = 20;

/// Deterministic synthetic dataset of `n` samples. Same seed, same bytes.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Dataset(format!("n = {} < 2", n)));
    }
    let d = SYNTHETIC_DIM;
    let a = 2.0 / (d as f64).sqrt();
    let n_pos = ((n as f64) * kind.positive_fraction()).round() as usize;
    let n_pos = n_pos.clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<i8> = Vec::with_capacity(n);
    labels.extend(std::iter::repeat(1).take(n_pos));
    labels.extend(std::iter::repeat(-1).take(n - n_pos));
    labels.shuffle(&mut rng);
    let mut points = Vec::with_capacity(n);
    for &y in &labels {
        let mut p = Vec::with_capacity(d);
        match (kind, y) {
            (SyntheticKind::Twonorm, 1) => {
                for _ in 0..d {
                    p.push(a + rng.sample::<f64, _>(StandardNormal));
                }
            }
            (SyntheticKind::Twonorm, _) => {
                for _ in 0..d {
                    p.push(-a + rng.sample::<f64, _>(StandardNormal));
                }
            }
            (SyntheticKind::Ringnorm, 1) => {
                for _ in 0..d {
                    p.push(a + rng.sample::<f64, _>(StandardNormal));
                }
            }
            (SyntheticKind::Ringnorm, _) => {
                for _ in 0..d {
                    p.push(2.0 * rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
        points.push(p);
    }
    Dataset::new(points, labels)
}
