//! Minibatch SGD on the class-weighted multi-label loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{forward_full, LossTerms};
use crate::metrics::{class_weights, mean_ap, ClassWeights};
use crate::model::{Model, Params};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rate: f64,
    /// Heavy-ball coefficient; 0 gives plain SGD.
    pub momentum: f64,
    /// Multiplies the rate after every epoch.
    pub rate_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 32, rate: 0.01, momentum: 0.9, rate_decay: 1.0, seed: 0 }
    }
}

/// Mean per-sample loss after each epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

fn all_terms(labels: &[f64], weights: &ClassWeights) -> LossTerms {
    LossTerms { indices: (0..labels.len()).collect(), targets: labels.to_vec(), weights: weights.values().to_vec() }
}

fn sample_grads(model: &Model, data: &Dataset, i: usize, weights: &ClassWeights) -> Result<(f64, Vec<Option<Params>>)> {
    let mut tape = forward_full(model, &data.image(i))?;
    let out = tape.output().expect("model has an output");
    let loss = tape.partial_loss(out, all_terms(data.label_row(i), weights))?;
    let mut grads = model.zero_grads();
    tape.backward_params(loss, &mut grads)?;
    Ok((tape.value(loss).item(), grads))
}

/// Mean weighted loss over `data` without updating anything.
pub fn mean_loss(model: &Model, data: &Dataset, weights: &ClassWeights) -> Result<f64> {
    let losses: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(all_terms(data.label_row(i), weights).value(model.predict(&data.image(i))?.data())))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / data.len().max(1) as f64)
}

/// Raw scores `[N, d]` for every sample.
pub fn predict_all(model: &Model, data: &Dataset) -> Result<Tensor> {
    let rows: Vec<Tensor> = (0..data.len()).into_par_iter().map(|i| model.predict(&data.image(i))).collect::<Result<_>>()?;
    let d = model.output_dim();
    let mut flat = Vec::with_capacity(rows.len() * d);
    for r in rows {
        flat.extend_from_slice(r.data());
    }
    Tensor::new(vec![data.len(), d], flat)
}

/// mAP over all labels of `data`.
pub fn evaluate_map(model: &Model, data: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..data.label_count()).collect();
    mean_ap(&predict_all(model, data)?, data.labels(), &all)
}

/// Trains `model` in place with class weights computed from `train`.
///
/// Per-sample gradients are summed in sample order, so results do not depend
/// on the worker count.
pub fn train(model: &mut Model, train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<TrainCurve> {
    if config.batch_size == 0 {
        return Err(Error::InvalidSpec("batch size must be positive".into()));
    }
    if !(config.rate.is_finite() && config.rate >= 0.0) || !(0.0..1.0).contains(&config.momentum) {
        return Err(Error::InvalidSpec("rate must be non-negative and momentum in [0, 1)".into()));
    }
    if train.label_count() != model.output_dim() || train.image_shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "dataset images {:?} with {} labels do not fit model input {:?} with {} outputs",
            train.image_shape(),
            train.label_count(),
            model.input_shape(),
            model.output_dim()
        )));
    }
    let weights = class_weights(train.labels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut velocity = model.zero_grads();
    let mut rate = config.rate;
    let mut curve = TrainCurve::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let per_sample: Vec<(f64, Vec<Option<Params>>)> = batch
                .par_iter()
                .map(|&i| sample_grads(model, train, i, &weights))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut total = model.zero_grads();
            for (loss, grads) in &per_sample {
                epoch_loss += loss;
                for (acc, g) in total.iter_mut().zip(grads) {
                    if let (Some(acc), Some(g)) = (acc, g) {
                        acc.weight.add_assign(&g.weight)?;
                        acc.bias.add_assign(&g.bias)?;
                    }
                }
            }
            for ((layer, v), g) in model.layers_mut().iter_mut().zip(&mut velocity).zip(&total) {
                let (Some(p), Some(v), Some(g)) = (layer.params_mut(), v.as_mut(), g.as_ref()) else {
                    continue;
                };
                for (param, vel, grad) in [(&mut p.weight, &mut v.weight, &g.weight), (&mut p.bias, &mut v.bias, &g.bias)] {
                    for ((x, m), &dg) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
                        *m = config.momentum * *m + dg * scale;
                        *x -= rate * *m;
                    }
                }
            }
        }
        let train_loss = epoch_loss / train.len().max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: train_loss });
        }
        curve.train_loss.push(train_loss);
        curve.val_loss.push(if val.is_empty() { f64::NAN } else { mean_loss(model, val, &weights)? });
        rate *= config.rate_decay;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{synth_splits, DatasetSpec, SplitSizes};
    use crate::model::{build_model, reference_architecture};

    fn tiny_data(train: usize) -> (Dataset, Dataset) {
        let mut spec = DatasetSpec::reference(9);
        spec.splits = SplitSizes { train, val: 8, test: 1 };
        let s = synth_splits(&spec).unwrap();
        (s.train, s.val)
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let (tr, va) = tiny_data(64);
        let mut m = build_model(&reference_architecture(vec![1, 28, 28], 40, vec![]), 1).unwrap();
        let before = m.param_checksum();
        let cfg = TrainConfig { epochs: 1, rate: 0.0, ..Default::default() };
        let curve = train(&mut m, &tr, &va, &cfg).unwrap();
        assert_eq!(m.param_checksum(), before);
        assert_eq!(curve.train_loss.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va) = tiny_data(48);
        let arch = reference_architecture(vec![1, 28, 28], 40, vec![]);
        let cfg = TrainConfig { epochs: 2, batch_size: 16, ..Default::default() };
        let mut a = build_model(&arch, 2).unwrap();
        let mut b = build_model(&arch, 2).unwrap();
        assert_eq!(train(&mut a, &tr, &va, &cfg).unwrap(), train(&mut b, &tr, &va, &cfg).unwrap());
        assert_eq!(a.param_checksum(), b.param_checksum());
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, va) = tiny_data(32);
        let mut m = build_model(&reference_architecture(vec![1, 28, 28], 40, vec![]), 3).unwrap();
        let cfg = TrainConfig { epochs: 3, rate: 1e200, momentum: 0.0, ..Default::default() };
        assert!(matches!(train(&mut m, &tr, &va, &cfg), Err(Error::Divergence { .. } | Error::NonFinite { .. })));
    }
}
