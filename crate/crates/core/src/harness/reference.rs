//! The desk-scale reference benchmark: data, network, training and sweep settings.

use serde::{Deserialize, Serialize};

use super::dataset::{synth_splits, DatasetSpec, SplitDataset};
use super::experiment::{FeedbackGrid, LabelSelection, SweepPlan};
use super::train::{train, TrainConfig, TrainCurve};
use crate::error::Result;
use crate::feedback::Method;
use crate::model::{build_model, reference_architecture, Architecture, Head, Model};

/// Architecture plus training settings, as read by the `train` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub init_seed: u64,
}

pub fn reference_heads() -> Vec<Head> {
    vec![Head { name: "a".into(), start: 0, end: 20 }, Head { name: "b".into(), start: 20, end: 40 }]
}

pub fn reference_model_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        architecture: reference_architecture(vec![1, 28, 28], 40, reference_heads()),
        train: TrainConfig { epochs: 8, batch_size: 32, rate: 0.003, momentum: 0.9, rate_decay: 0.85, seed },
        init_seed: seed,
    }
}

/// Head `b` unknown, evidence drawn from head `a`.
pub fn reference_plan(seed: u64) -> SweepPlan {
    SweepPlan {
        unknown: LabelSelection::Head("b".into()),
        known_pool: None,
        known_amounts: vec![0, 5, 10, 20],
        pivots: vec![vec!["pool2".into(), "fc_relu".into()]],
        methods: vec![Method::Lf, Method::Rf],
        grid: FeedbackGrid { rates: vec![0.01, 0.1, 0.3], iterations: vec![20], ..Default::default() },
        repetitions: 20,
        seed,
        tune_known: None,
        weighted: true,
        val_limit: None,
        test_limit: None,
    }
}

pub fn train_model(spec: &ModelSpec, data: &SplitDataset) -> Result<(Model, TrainCurve)> {
    let mut model = build_model(&spec.architecture, spec.init_seed)?;
    let curve = train(&mut model, &data.train, &data.val, &spec.train)?;
    Ok((model, curve))
}

pub struct ReferenceRun {
    pub data: SplitDataset,
    pub model: Model,
    pub curve: TrainCurve,
}

/// Generates the reference data and trains the reference model from `seed`.
pub fn reference_run(seed: u64) -> Result<ReferenceRun> {
    let data = synth_splits(&DatasetSpec::reference(seed))?;
    let (model, curve) = super::worker_pool()?.install(|| train_model(&reference_model_spec(seed), &data))?;
    Ok(ReferenceRun { data, model, curve })
}
