//! Data loading, run configuration, and the drivers behind the command
//! line tool. Each driver writes its artifacts into the run's output
//! directory and leaves a `FAILED` file there if it errors out.

mod config;
mod data;
pub mod gradcheck;
mod run;

pub use config::{parse_thresholds, DatasetKind, Overrides, Preprocessing, RunConfig};
pub use data::{
    add_gaussian_noise, load_idx_dataset, load_mnist, parse_idx_images, parse_idx_labels, read_maybe_gzip,
    synthetic_dataset, Dataset, SyntheticSpec, IMAGE_MAGIC, LABEL_MAGIC, MNIST_CLASSES,
};
pub use run::{
    build_model, checkpoint_path, combine_members, evaluate, load_model, prepare_data, run_eval, run_ensemble,
    run_export_samples, run_train, run_uncertainty, sample_sets, score, train_model, with_sentinel, write_evaluation,
    EnsembleReport, EpochSummary, EvalSummary, PreparedData, ThresholdSummary, TrainLogs, Trained,
    UncertaintyReport, FAILED_SENTINEL,
};
