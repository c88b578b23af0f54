//! Consistent-relative-confidence scoring over per-model softmax outputs.
//!
//! Every candidate model is summarized by the confidences it assigns to the
//! same unlabeled inputs: the maximum softmax probability per input, their
//! mean (`MC`), their Bessel-corrected standard deviation (`SC`), and the lower
//! confidence bound `LCB = MC - SC`. A model's CRC score is its LCB minus the
//! best LCB among the *other* models, so exactly the leading model scores
//! non-negative. No labels enter this path; [`error_rate`] and
//! [`cross_entropy`] are the label-based baselines kept alongside it.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::scalar::{argmax, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("probability matrix has {rows} rows x {cols} columns but {len} values")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("probability matrix needs at least {min} classes, got {cols}")]
    TooFewClasses { cols: usize, min: usize },
    #[error("probability matrix is empty")]
    Empty,
    #[error("row {row}, column {col}: value {value} is not a probability")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f64 },
    #[error("confidence vector is empty")]
    EmptyConfidences,
    #[error("need at least 2 inputs for a sample standard deviation, got {0}")]
    TooFewInputs(usize),
    #[error("need at least 2 candidate models, got {0}")]
    TooFewModels(usize),
    #[error("model {model} has shape {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    ModelShapeMismatch {
        model: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("{labels} labels for {rows} probability rows")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("label {label} at index {index} is outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
}

pub type Result<T, E = SelectionError> = std::result::Result<T, E>;

/// Row-major `N x C` softmax outputs of one model on `N` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> ProbabilityMatrix<T> {
    /// Validates shape, entry range, NaN and row sums.
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if rows == 0 {
            return Err(SelectionError::Empty);
        }
        if cols < 2 {
            return Err(SelectionError::TooFewClasses { cols, min: 2 });
        }
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(SelectionError::Shape {
                rows,
                cols,
                len: values.len(),
            });
        }
        let matrix = Self { rows, cols, values };
        matrix.validate()?;
        Ok(matrix)
    }

    /// Builds from nested rows, e.g. `&[vec![0.2, 0.8], vec![0.5, 0.5]]`.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(SelectionError::Shape {
                    rows: rows.len(),
                    cols,
                    len: values.len() + r.as_ref().len(),
                });
            }
            values.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, values)
    }

    fn validate(&self) -> Result<()> {
        let tol = T::ROW_SUM_TOLERANCE;
        for (row, r) in self.values.chunks_exact(self.cols).enumerate() {
            let mut sum = 0.0f64;
            for (col, &v) in r.iter().enumerate() {
                let value = v.widen();
                if !(0.0..=1.0).contains(&value) {
                    return Err(SelectionError::InvalidEntry { row, col, value });
                }
                sum += value;
            }
            if (sum - 1.0).abs() > tol {
                return Err(SelectionError::RowSum { row, sum });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, n: usize) -> &[T] {
        &self.values[n * self.cols..(n + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.cols, values)
    }
}

/// Per-input confidence (maximum class probability) of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVector<T>(Vec<T>);

impl<T: Scalar> ConfidenceVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Class indices in `0..classes`, one per input.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector {
    values: Vec<usize>,
    classes: usize,
}

impl LabelVector {
    pub fn new(values: Vec<usize>, classes: usize) -> Result<Self> {
        if let Some((index, &label)) = values.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(SelectionError::LabelOutOfRange { index, label, classes });
        }
        Ok(Self { values, classes })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.values
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            values: indices.iter().map(|&i| self.values[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Maximum class probability of every row.
pub fn confidence<T: Scalar>(probs: &ProbabilityMatrix<T>) -> ConfidenceVector<T> {
    ConfidenceVector(
        probs
            .iter_rows()
            .map(|r| r.iter().copied().fold(T::zero(), T::max))
            .collect(),
    )
}

/// Arithmetic mean of the confidences, summed in input order.
pub fn mean_confidence<T: Scalar>(conf: &ConfidenceVector<T>) -> Result<T> {
    if conf.is_empty() {
        return Err(SelectionError::EmptyConfidences);
    }
    let sum = conf.0.iter().fold(T::zero(), |acc, &c| acc + c);
    Ok(sum / T::of(conf.len() as f64))
}

/// Sample standard deviation of the confidences (divides by `N - 1`).
pub fn std_confidence<T: Scalar>(conf: &ConfidenceVector<T>) -> Result<T> {
    if conf.len() < 2 {
        return Err(SelectionError::TooFewInputs(conf.len()));
    }
    let mean = mean_confidence(conf)?;
    let ss = conf.0.iter().fold(T::zero(), |acc, &c| {
        let d = c - mean;
        acc + d * d
    });
    Ok((ss / T::of((conf.len() - 1) as f64)).sqrt())
}

/// Confidence statistics of a single model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceStats<T> {
    pub mean: T,
    pub std: T,
    pub lcb: T,
}

pub fn confidence_stats<T: Scalar>(probs: &ProbabilityMatrix<T>) -> Result<ConfidenceStats<T>> {
    let conf = confidence(probs);
    let mean = mean_confidence(&conf)?;
    let std = std_confidence(&conf)?;
    Ok(ConfidenceStats {
        mean,
        std,
        lcb: mean - std,
    })
}

/// Lower confidence bound `MC - SC`.
pub fn lcb<T: Scalar>(probs: &ProbabilityMatrix<T>) -> Result<T> {
    confidence_stats(probs).map(|s| s.lcb)
}

/// `S_k = LCB_k - max_{i != k} LCB_i` for every `k`.
pub fn relative_scores<T: Scalar>(lcbs: &[T]) -> Result<Vec<T>> {
    if lcbs.len() < 2 {
        return Err(SelectionError::TooFewModels(lcbs.len()));
    }
    // The best rival of every model is the overall maximum, except for the
    // model holding it, whose rival is the runner-up.
    let top = argmax(lcbs).unwrap_or(0);
    let runner_up = lcbs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    Ok(lcbs
        .iter()
        .enumerate()
        .map(|(k, &v)| if k == top { v - runner_up } else { v - lcbs[top] })
        .collect())
}

/// One candidate's row in a [`ModelScoreReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScore<T> {
    pub model_id: String,
    pub mean_confidence: T,
    pub std_confidence: T,
    pub lcb: T,
    pub crc_score: T,
}

/// Label-free selection verdict over `K` candidate models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScoreReport<T> {
    pub models: Vec<ModelScore<T>>,
    pub selected_index: usize,
    pub num_inputs: usize,
    pub num_models: usize,
}

impl<T: Scalar> ModelScoreReport<T> {
    pub fn selected(&self) -> &ModelScore<T> {
        &self.models[self.selected_index]
    }

    pub fn scores(&self) -> Vec<T> {
        self.models.iter().map(|m| m.crc_score).collect()
    }

    pub fn lcbs(&self) -> Vec<T> {
        self.models.iter().map(|m| m.lcb).collect()
    }
}

/// Tab-separated table: a header line, one line per model with the selected
/// model marked `*`, then `selected=<id> N=<n> K=<k>`.
impl<T: Scalar> fmt::Display for ModelScoreReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        writeln!(out, "model\tMC\tSC\tLCB\tCRC\tselected")?;
        for (k, m) in self.models.iter().enumerate() {
            writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                m.model_id,
                m.mean_confidence.widen(),
                m.std_confidence.widen(),
                m.lcb.widen(),
                m.crc_score.widen(),
                if k == self.selected_index { "*" } else { "" }
            )?;
        }
        write!(
            out,
            "selected={} N={} K={}",
            self.selected().model_id,
            self.num_inputs,
            self.num_models
        )?;
        f.write_str(&out)
    }
}

/// Scores `K >= 2` models named `M0..M{K-1}`.
pub fn crc_scores<T: Scalar>(per_model: &[ProbabilityMatrix<T>]) -> Result<ModelScoreReport<T>> {
    let ids: Vec<String> = (0..per_model.len()).map(|k| format!("M{k}")).collect();
    crc_scores_named(per_model, &ids)
}

/// Like [`crc_scores`] with caller-supplied model identifiers.
pub fn crc_scores_named<T: Scalar, S: AsRef<str>>(
    per_model: &[ProbabilityMatrix<T>],
    ids: &[S],
) -> Result<ModelScoreReport<T>> {
    assert_eq!(per_model.len(), ids.len(), "one id per model");
    let first = per_model.first().ok_or(SelectionError::TooFewModels(0))?;
    if per_model.len() < 2 {
        return Err(SelectionError::TooFewModels(per_model.len()));
    }
    for (model, m) in per_model.iter().enumerate() {
        if m.rows() != first.rows() || m.cols() != first.cols() {
            return Err(SelectionError::ModelShapeMismatch {
                model,
                rows: m.rows(),
                cols: m.cols(),
                expected_rows: first.rows(),
                expected_cols: first.cols(),
            });
        }
    }
    let stats = per_model.iter().map(confidence_stats).collect::<Result<Vec<_>>>()?;
    let lcbs: Vec<T> = stats.iter().map(|s| s.lcb).collect();
    let scores = relative_scores(&lcbs)?;
    let selected_index = argmax(&lcbs).unwrap_or(0);
    let models = stats
        .iter()
        .zip(scores)
        .zip(ids)
        .map(|((s, crc_score), id)| ModelScore {
            model_id: id.as_ref().to_string(),
            mean_confidence: s.mean,
            std_confidence: s.std,
            lcb: s.lcb,
            crc_score,
        })
        .collect();
    Ok(ModelScoreReport {
        models,
        selected_index,
        num_inputs: first.rows(),
        num_models: per_model.len(),
    })
}

fn check_labels<T: Scalar>(probs: &ProbabilityMatrix<T>, labels: &LabelVector) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(SelectionError::LengthMismatch {
            rows: probs.rows(),
            labels: labels.len(),
        });
    }
    if let Some((index, &label)) = labels.as_slice().iter().enumerate().find(|(_, &l)| l >= probs.cols()) {
        return Err(SelectionError::LabelOutOfRange {
            index,
            label,
            classes: probs.cols(),
        });
    }
    Ok(())
}

/// Predicted class of every row (lowest index among ties).
pub fn predictions<T: Scalar>(probs: &ProbabilityMatrix<T>) -> Vec<usize> {
    probs.iter_rows().map(|r| argmax(r).unwrap_or(0)).collect()
}

/// Fraction of rows whose predicted class differs from the label.
pub fn error_rate<T: Scalar>(probs: &ProbabilityMatrix<T>, labels: &LabelVector) -> Result<T> {
    check_labels(probs, labels)?;
    let wrong = predictions(probs)
        .iter()
        .zip(labels.as_slice())
        .filter(|(p, l)| p != l)
        .count();
    Ok(T::of(wrong as f64 / probs.rows() as f64))
}

/// Mean negative log-probability of the true class, floored at `T::LOG_FLOOR`.
pub fn cross_entropy<T: Scalar>(probs: &ProbabilityMatrix<T>, labels: &LabelVector) -> Result<T> {
    check_labels(probs, labels)?;
    let floor = T::of(T::LOG_FLOOR);
    let total = probs
        .iter_rows()
        .zip(labels.as_slice())
        .fold(T::zero(), |acc, (r, &l)| acc - r[l].max(floor).ln());
    Ok(total / T::of(probs.rows() as f64))
}
