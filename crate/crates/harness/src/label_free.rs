//! Label-free scoring. Nothing in this module accepts labels.

use anyhow::Result;
use crc_core::nn::{forward, CnnModel};
use crc_core::{crc_scores, Image, ModelScoreReport, ProbabilityMatrix};

/// Softmax outputs of every model on the same images.
pub fn model_probabilities(models: &[CnnModel<f64>], images: &[Image<f64>]) -> Result<Vec<ProbabilityMatrix<f64>>> {
    models.iter().map(|m| forward(m, images).map_err(Into::into)).collect()
}

#[derive(Debug, Clone)]
pub struct LabelFreeSelection {
    pub report: ModelScoreReport<f64>,
    pub probabilities: Vec<ProbabilityMatrix<f64>>,
}

/// Runs every model over unlabeled images and scores them by CRC.
pub fn select_from_images(models: &[CnnModel<f64>], images: &[Image<f64>]) -> Result<LabelFreeSelection> {
    let probabilities = model_probabilities(models, images)?;
    let report = crc_scores(&probabilities)?;
    Ok(LabelFreeSelection { report, probabilities })
}
