//! Data generation, training and experiment drivers.

pub mod bench;
pub mod dataset;
pub mod experiment;
pub mod reference;
pub mod report;
pub mod train;

pub use bench::{benchmark_timing, spearman, BenchSettings, BenchSpec};
pub use dataset::{synth_dataset, synth_splits, Dataset, DatasetSpec, SplitDataset, SplitSizes};
pub use experiment::{
    analyze_layers, layer_analysis, mean_by_known, run_sweep, sweep, Experiment, ExperimentSpec, FeedbackGrid,
    LabelSelection, SweepPlan,
};
pub use reference::{reference_model_spec, reference_plan, reference_run, train_model, ModelSpec, ReferenceRun};
pub use report::{emit_report, load_report, Report, ReportRow};
pub use train::{evaluate_map, predict_all, train, TrainConfig, TrainCurve};

use crate::error::{Error, Result};

/// Worker pool sized by `FBPROP_THREADS`, or rayon's default when unset.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("FBPROP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidSpec(format!("FBPROP_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidSpec(format!("cannot start worker pool: {e}")))
}
