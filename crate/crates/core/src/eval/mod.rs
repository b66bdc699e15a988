//! Datasets, metrics, threshold sweeps, and end-to-end experiments.

pub mod dataset;
pub mod experiment;
mod metrics;
pub mod sweep;
pub mod synthetic;

pub use dataset::{load_input_image, load_mvtec_layout, load_test_item, CategoryData, LabeledDataset, TestItem};
pub use metrics::{accuracy, accuracy_of, pixel_auc, pixel_auc_per_image, roc_auc};
pub use sweep::{default_grid, threshold_sweep, CategoryScores, Optimum, SweepTable, DEFAULT_GRID_POINTS};
pub use experiment::{config_hash, run_experiment, DatasetSpec, EvalReport, ExperimentConfig, Mode};
