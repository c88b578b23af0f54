//! Label-free selection among pre-trained softmax classifiers by consistent
//! relative confidence (CRC), plus the tooling needed to reproduce a
//! selection study end to end: IDX dataset I/O, image perturbations and a
//! small convolutional network trained with momentum SGD.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are the double-precision instantiations used by the
//! reference pipeline.
//!
//! ```
//! use crc_core::{crc_scores, ProbabilityMatrix};
//!
//! let a = ProbabilityMatrix::from_rows(&[[0.9, 0.1], [0.8, 0.2], [0.85, 0.15]]).unwrap();
//! let b = ProbabilityMatrix::from_rows(&[[0.6, 0.4], [0.99, 0.01], [0.5, 0.5]]).unwrap();
//! let report = crc_scores(&[a, b]).unwrap();
//! assert_eq!(report.selected_index, 0);
//! assert!(report.models[0].crc_score > 0.0 && report.models[1].crc_score < 0.0);
//! ```

pub mod dataset;
pub mod idx;
pub mod imageops;
pub mod nn;
pub mod scalar;
pub mod selection;

pub use dataset::{Image, LabeledDataset, Split};
pub use scalar::Scalar;
pub use selection::{
    confidence, crc_scores, cross_entropy, error_rate, lcb, mean_confidence, std_confidence, ConfidenceVector,
    LabelVector, ModelScore, ModelScoreReport, ProbabilityMatrix, SelectionError,
};

pub type ProbabilityMatrix64 = ProbabilityMatrix<f64>;
pub type ProbabilityMatrix32 = ProbabilityMatrix<f32>;
pub type ConfidenceVector64 = ConfidenceVector<f64>;
pub type ModelScoreReport64 = ModelScoreReport<f64>;
pub type Image64 = Image<f64>;
pub type Image32 = Image<f32>;
pub type LabeledDataset64 = LabeledDataset<f64>;
pub type Kernel2D64 = imageops::Kernel2D<f64>;
pub type CnnModel64 = nn::CnnModel<f64>;
pub type CnnModel32 = nn::CnnModel<f32>;
