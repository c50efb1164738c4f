//! Evidence-amount sweep and per-layer analysis.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::report::{Report, ReportRow};
use super::worker_pool;
use crate::error::{Error, Result};
use crate::feedback::{infer, FeedbackConfig, Method, ResidualPlacement, UpdateRule};
use crate::metrics::{class_weights, mean_ap, ClassWeights, EvidencePartition};
use crate::model::{load_model, Model};
use crate::tensor::Tensor;

/// Unknown labels given either as a model head name or explicit indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelSelection {
    Head(String),
    Indices(Vec<usize>),
}

/// Feedback settings shared by every cell; the grid varies rate and iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackGrid {
    pub rates: Vec<f64>,
    pub iterations: Vec<usize>,
    pub rule: UpdateRule,
    pub placement: ResidualPlacement,
    pub max_grad_norm: Option<f64>,
}

impl Default for FeedbackGrid {
    fn default() -> Self {
        FeedbackGrid {
            rates: vec![1e-3],
            iterations: vec![20],
            rule: UpdateRule::Sgd,
            placement: ResidualPlacement::PostNonlinearity,
            max_grad_norm: None,
        }
    }
}

impl FeedbackGrid {
    fn configs(&self, pivots: &[String]) -> Vec<FeedbackConfig> {
        let mut out = Vec::new();
        for &rate in &self.rates {
            for &iterations in &self.iterations {
                out.push(FeedbackConfig {
                    pivots: pivots.to_vec(),
                    rate,
                    iterations,
                    rule: self.rule,
                    placement: self.placement,
                    max_grad_norm: self.max_grad_norm,
                    ..Default::default()
                });
            }
        }
        out
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Lf, Method::Rf]
}

fn default_true() -> bool {
    true
}

/// Everything about a sweep except where the model and data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub unknown: LabelSelection,
    /// Labels eligible as evidence; defaults to every label outside `unknown`.
    #[serde(default)]
    pub known_pool: Option<Vec<usize>>,
    pub known_amounts: Vec<usize>,
    /// Pivot configurations to compare; each entry is one ordered pivot list.
    pub pivots: Vec<Vec<String>>,
    /// Feedback methods; the no-feedback baseline is always reported.
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub grid: FeedbackGrid,
    pub repetitions: usize,
    pub seed: u64,
    /// Known amount used when tuning on validation; defaults to the largest.
    #[serde(default)]
    pub tune_known: Option<usize>,
    /// Class-weighted partial loss.
    #[serde(default = "default_true")]
    pub weighted: bool,
    #[serde(default)]
    pub val_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: PathBuf,
    /// Directory holding `{train,val,test}_{images,labels}.fbpt`.
    pub data_dir: PathBuf,
    #[serde(flatten)]
    pub plan: SweepPlan,
}

impl ExperimentSpec {
    /// Reads a JSON spec; relative paths resolve against the spec's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec: ExperimentSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut spec.model, &mut spec.data_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(spec)
    }
}

/// A loaded experiment: model, class weights from the training labels, and evaluation splits.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub model: Model,
    pub weights: ClassWeights,
    pub val: Dataset,
    pub test: Dataset,
    pub plan: SweepPlan,
}

impl Experiment {
    pub fn new(model: Model, train_labels: &Tensor, val: Dataset, test: Dataset, plan: SweepPlan) -> Result<Self> {
        let weights = class_weights(train_labels)?;
        Ok(Experiment { model, weights, val, test, plan })
    }

    pub fn load(spec: &ExperimentSpec) -> Result<Self> {
        let model = load_model(&spec.model)?;
        let train = Dataset::load(&spec.data_dir, "train")?;
        let val = Dataset::load(&spec.data_dir, "val")?;
        let test = Dataset::load(&spec.data_dir, "test")?;
        Experiment::new(model, train.labels(), val, test, spec.plan.clone())
    }

    fn weights(&self) -> Option<&ClassWeights> {
        self.plan.weighted.then_some(&self.weights)
    }

    fn unknown(&self) -> Result<Vec<usize>> {
        let d = self.model.output_dim();
        let unknown: Vec<usize> = match &self.plan.unknown {
            LabelSelection::Head(name) => self
                .model
                .head(name)
                .ok_or_else(|| Error::InvalidSpec(format!("model has no head `{name}`")))?
                .indices()
                .collect(),
            LabelSelection::Indices(v) => v.clone(),
        };
        if unknown.is_empty() {
            return Err(Error::InvalidSpec("unknown label set is empty".into()));
        }
        if let Some(&index) = unknown.iter().find(|&&j| j >= d) {
            return Err(Error::IndexOutOfRange { index, len: d });
        }
        Ok(unknown)
    }

    fn known_pool(&self, unknown: &[usize]) -> Result<Vec<usize>> {
        let d = self.model.output_dim();
        let unknown_set: BTreeSet<usize> = unknown.iter().copied().collect();
        match &self.plan.known_pool {
            Some(pool) => {
                if let Some(&index) = pool.iter().find(|&&j| j >= d) {
                    return Err(Error::IndexOutOfRange { index, len: d });
                }
                let overlap: Vec<usize> = pool.iter().copied().filter(|j| unknown_set.contains(j)).collect();
                if !overlap.is_empty() {
                    return Err(Error::OverlappingSets(overlap));
                }
                Ok(pool.clone())
            }
            None => Ok((0..d).filter(|j| !unknown_set.contains(j)).collect()),
        }
    }

    fn validate(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let d = self.model.output_dim();
        for (name, ds) in [("val", &self.val), ("test", &self.test)] {
            if ds.label_count() != d || ds.image_shape() != self.model.input_shape() {
                return Err(Error::Shape(format!(
                    "{name} split has images {:?} with {} labels; model expects {:?} with {d}",
                    ds.image_shape(),
                    ds.label_count(),
                    self.model.input_shape()
                )));
            }
        }
        let unknown = self.unknown()?;
        let pool = self.known_pool(&unknown)?;
        if let Some(&k) = self.plan.known_amounts.iter().chain(&self.plan.tune_known).find(|&&k| k > pool.len()) {
            return Err(Error::InvalidSpec(format!("known amount {k} exceeds the {} available labels", pool.len())));
        }
        if self.plan.repetitions == 0 || self.plan.known_amounts.is_empty() {
            return Err(Error::InvalidSpec("need at least one repetition and one known amount".into()));
        }
        if self.plan.methods.iter().any(|m| *m != Method::None) && self.plan.pivots.is_empty() {
            return Err(Error::InvalidSpec("feedback methods need at least one pivot configuration".into()));
        }
        if self.plan.grid.rates.is_empty() || self.plan.grid.iterations.is_empty() {
            return Err(Error::InvalidSpec("feedback grid needs at least one rate and one iteration count".into()));
        }
        Ok((unknown, pool))
    }

    fn tune_known(&self) -> usize {
        self.plan.tune_known.unwrap_or_else(|| self.plan.known_amounts.iter().copied().max().unwrap_or(0))
    }

    /// Known labels for repetition `rep`: a seeded permutation of the pool,
    /// truncated to `amount`. Amounts within a repetition are nested.
    fn known_set(&self, pool: &[usize], stream: u64, rep: usize, amount: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
        rng.set_stream(stream.wrapping_mul(1 << 32).wrapping_add(rep as u64));
        let mut order = pool.to_vec();
        order.shuffle(&mut rng);
        order.truncate(amount);
        order.sort_unstable();
        order
    }
}

const VAL_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

fn limited(ds: &Dataset, limit: Option<usize>) -> usize {
    limit.map_or(ds.len(), |l| l.min(ds.len()))
}

/// Unknown-set mAP of one method/config/evidence cell, plus its wall time.
pub fn evaluate_cell(
    exp: &Experiment,
    data: &Dataset,
    samples: usize,
    method: &Method,
    config: &FeedbackConfig,
    known: &[usize],
    unknown: &[usize],
) -> Result<(f64, f64)> {
    let start = Instant::now();
    let d = exp.model.output_dim();
    let rows: Vec<Tensor> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let evidence = EvidencePartition::from_labels(data.label_row(i), known, unknown.to_vec())?;
            Ok(infer(method, &exp.model, &data.image(i), &evidence, config, exp.weights())?.scores)
        })
        .collect::<Result<_>>()?;
    let mut flat = Vec::with_capacity(samples * d);
    for r in &rows {
        flat.extend_from_slice(r.data());
    }
    let scores = Tensor::new(vec![samples, d], flat)?;
    let labels = Tensor::new(vec![samples, d], data.labels().data()[..samples * d].to_vec())?;
    let map = mean_ap(&scores, &labels, unknown)?;
    Ok((map, start.elapsed().as_secs_f64() * 1e3))
}

fn pivots_label(pivots: &[String]) -> String {
    pivots.join("+")
}

fn row(method: &Method, pivots: &str, known: usize, rep: usize, metric: String, value: f64, wall_ms: f64) -> ReportRow {
    ReportRow { method: method.label().into(), pivots: pivots.into(), known, rep, metric, value, wall_ms }
}

fn grid_metric(config: &FeedbackConfig) -> String {
    format!("val_map:rate={}:iters={}", config.rate, config.iterations)
}

/// Best validation config per (method, pivot list), tuned at one known amount.
fn tune(exp: &Experiment, unknown: &[usize], pool: &[usize], report: &mut Report) -> Result<Vec<(Method, Vec<String>, FeedbackConfig)>> {
    let amount = exp.tune_known();
    let known = exp.known_set(pool, VAL_STREAM, 0, amount);
    let n = limited(&exp.val, exp.plan.val_limit);
    let mut chosen = Vec::new();
    for method in exp.plan.methods.iter().filter(|m| **m != Method::None) {
        for pivots in &exp.plan.pivots {
            let label = pivots_label(pivots);
            let mut best: Option<(f64, FeedbackConfig)> = None;
            for config in exp.plan.grid.configs(pivots) {
                let (map, ms) = evaluate_cell(exp, &exp.val, n, method, &config, &known, unknown)?;
                report.push(row(method, &label, amount, 0, grid_metric(&config), map, ms));
                if best.as_ref().is_none_or(|(b, _)| map > *b) {
                    best = Some((map, config));
                }
            }
            let (map, config) = best.expect("grid is non-empty");
            report.push(row(method, &label, amount, 0, "best_val_map".into(), map, 0.0));
            report.push(row(method, &label, amount, 0, "chosen_rate".into(), config.rate, 0.0));
            report.push(row(method, &label, amount, 0, "chosen_iters".into(), config.iterations as f64, 0.0));
            chosen.push((method.clone(), pivots.clone(), config));
        }
    }
    Ok(chosen)
}

/// Runs the sweep on a loaded experiment using the `FBPROP_THREADS` worker pool.
pub fn sweep(exp: &Experiment) -> Result<Report> {
    worker_pool()?.install(|| sweep_inner(exp))
}

fn sweep_inner(exp: &Experiment) -> Result<Report> {
    let (unknown, pool) = exp.validate()?;
    let mut report = Report::default();
    let no_feedback = FeedbackConfig::default();

    let n_val = limited(&exp.val, exp.plan.val_limit);
    let (val_base, ms) = evaluate_cell(exp, &exp.val, n_val, &Method::None, &no_feedback, &[], &unknown)?;
    report.push(row(&Method::None, "-", exp.tune_known(), 0, "best_val_map".into(), val_base, ms));
    let chosen = tune(exp, &unknown, &pool, &mut report)?;

    let n = limited(&exp.test, exp.plan.test_limit);
    let (base, base_ms) = evaluate_cell(exp, &exp.test, n, &Method::None, &no_feedback, &[], &unknown)?;
    for &amount in &exp.plan.known_amounts {
        for rep in 0..exp.plan.repetitions {
            report.push(row(&Method::None, "-", amount, rep, "map".into(), base, base_ms));
        }
    }
    for (method, pivots, config) in &chosen {
        let label = pivots_label(pivots);
        for &amount in &exp.plan.known_amounts {
            for rep in 0..exp.plan.repetitions {
                let known = exp.known_set(&pool, TEST_STREAM, rep, amount);
                let (map, ms) = evaluate_cell(exp, &exp.test, n, method, config, &known, &unknown)?;
                report.push(row(method, &label, amount, rep, "map".into(), map, ms));
            }
        }
    }
    report.sort();
    Ok(report)
}

pub fn run_sweep(spec: &ExperimentSpec) -> Result<Report> {
    sweep(&Experiment::load(spec)?)
}

/// Best validation mAP with each single layer (and the input) as the only pivot.
pub fn analyze_layers(exp: &Experiment) -> Result<Report> {
    worker_pool()?.install(|| {
        let (unknown, pool) = exp.validate()?;
        let amount = exp.tune_known();
        let known = exp.known_set(&pool, VAL_STREAM, 0, amount);
        let n = limited(&exp.val, exp.plan.val_limit);
        let mut report = Report::default();
        let (base, ms) = evaluate_cell(exp, &exp.val, n, &Method::None, &FeedbackConfig::default(), &[], &unknown)?;
        report.push(row(&Method::None, "-", amount, 0, "best_val_map".into(), base, ms));
        for layer in exp.model.pivot_names() {
            let pivots = vec![layer.clone()];
            for method in exp.plan.methods.iter().filter(|m| **m != Method::None) {
                let start = Instant::now();
                let mut best = f64::NEG_INFINITY;
                for config in exp.plan.grid.configs(&pivots) {
                    best = best.max(evaluate_cell(exp, &exp.val, n, method, &config, &known, &unknown)?.0);
                }
                let ms = start.elapsed().as_secs_f64() * 1e3;
                report.push(row(method, &layer, amount, 0, "best_val_map".into(), best, ms));
            }
        }
        report.sort();
        Ok(report)
    })
}

pub fn layer_analysis(spec: &ExperimentSpec) -> Result<Report> {
    analyze_layers(&Experiment::load(spec)?)
}

/// Mean of `metric` rows for `method` at each known amount, ascending by amount.
pub fn mean_by_known(report: &Report, method: &str, metric: &str) -> Vec<(usize, f64)> {
    let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in report.filter(method, metric) {
        let e = sums.entry(r.known).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
}
