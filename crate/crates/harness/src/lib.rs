//! Experiment harness for label-free model selection on MNIST-family data.
//!
//! Five datasets are derived from each family's originals (D0 unchanged,
//! D1-D4 perturbed), one network is trained per dataset, and every network
//! is scored on every dataset by CRC, error rate and cross-entropy.

pub mod artifacts;
pub mod label_free;
pub mod pipeline;
pub mod plan;
pub mod report;

pub use pipeline::{run_all, run_generate, run_report, run_select, run_train};
pub use plan::{ExperimentPlan, Family};
pub use report::{Metric, SelectionResultTable};
