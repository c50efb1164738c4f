//! Feedback-prop inference: single-layer, layer-wise (LF) and residual (RF).
//!
//! All three start from a full forward pass, attach the known-label loss to the
//! tape, and then alternate truncated backward passes to the pivots with
//! truncated forward passes from them. Model parameters are only ever read.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{forward_full, forward_full_with_residuals, NodeId, Tape, TapeStats};
use crate::metrics::{partial_loss, ClassWeights, EvidencePartition};
use crate::model::{Model, PivotSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UpdateRule {
    Sgd,
    Momentum {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    Adam {
        #[serde(default = "default_beta")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl UpdateRule {
    pub fn adam() -> Self {
        UpdateRule::Adam { beta1: default_beta(), beta2: default_beta2(), eps: default_adam_eps() }
    }
}

/// Optimizer memory for one updated tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateState {
    pub step: u64,
    pub first: Option<Tensor>,
    pub second: Option<Tensor>,
}

/// One update of `value` along `-gradient` under `rule` at `rate`.
pub fn update_step(
    rule: &UpdateRule,
    rate: f64,
    value: &Tensor,
    gradient: &Tensor,
    state: UpdateState,
) -> Result<(Tensor, UpdateState)> {
    value.expect_same_shape(gradient)?;
    let step = state.step + 1;
    match *rule {
        UpdateRule::Sgd => Ok((value.zip_map(gradient, |v, g| v - rate * g)?, UpdateState { step, ..state })),
        UpdateRule::Momentum { beta } => {
            let velocity = match state.first {
                Some(buf) => buf.zip_map(gradient, |b, g| beta * b + g)?,
                None => gradient.clone(),
            };
            let next = value.zip_map(&velocity, |v, b| v - rate * b)?;
            Ok((next, UpdateState { step, first: Some(velocity), second: None }))
        }
        UpdateRule::Adam { beta1, beta2, eps } => {
            let m = match state.first {
                Some(m) => m.zip_map(gradient, |m, g| beta1 * m + (1.0 - beta1) * g)?,
                None => gradient.scale(1.0 - beta1),
            };
            let v = match state.second {
                Some(v) => v.zip_map(gradient, |v, g| beta2 * v + (1.0 - beta2) * g * g)?,
                None => gradient.map(|g| (1.0 - beta2) * g * g),
            };
            let c1 = 1.0 - beta1.powi(step as i32);
            let c2 = 1.0 - beta2.powi(step as i32);
            let mut next = value.clone();
            for ((x, &mi), &vi) in next.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *x -= rate * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
            Ok((next, UpdateState { step, first: Some(m), second: Some(v) }))
        }
    }
}

/// Where a residual is injected relative to a pivot that is a nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualPlacement {
    /// `a_l = f_l(a_{l-1}) + r_l` on the named layer's output.
    #[default]
    PostNonlinearity,
    /// For a nonlinearity pivot, the residual goes on its input instead.
    PreNonlinearity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub pivots: Vec<String>,
    pub rate: f64,
    pub iterations: usize,
    pub rule: UpdateRule,
    pub placement: ResidualPlacement,
    /// Per-pivot rate replacing `rate`.
    pub rate_overrides: BTreeMap<String, f64>,
    /// Rescale gradients whose L2 norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            pivots: Vec::new(),
            rate: 1e-3,
            iterations: 20,
            rule: UpdateRule::Sgd,
            placement: ResidualPlacement::PostNonlinearity,
            rate_overrides: BTreeMap::new(),
            max_grad_norm: None,
        }
    }
}

impl FeedbackConfig {
    pub fn new<S: Into<String>>(pivots: impl IntoIterator<Item = S>, rate: f64, iterations: usize) -> Self {
        FeedbackConfig { pivots: pivots.into_iter().map(Into::into).collect(), rate, iterations, ..Default::default() }
    }

    fn rate_for(&self, pivot: &str) -> f64 {
        self.rate_overrides.get(pivot).copied().unwrap_or(self.rate)
    }

    fn validate(&self) -> Result<()> {
        let rates = std::iter::once(&self.rate).chain(self.rate_overrides.values());
        for r in rates {
            if !(r.is_finite() && *r > 0.0) {
                return Err(Error::InvalidSpec(format!("update rate must be positive, got {r}")));
            }
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidSpec(format!("max gradient norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    fn ordered_pivots(&self, model: &Model) -> Result<PivotSet> {
        if self.pivots.is_empty() {
            return Err(Error::InvalidSpec("at least one pivot layer is required".into()));
        }
        PivotSet::ordered(model, &self.pivots)
    }
}

/// Residuals keyed by the layer whose output they are added to, with per-residual optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResidualSet {
    values: BTreeMap<String, Tensor>,
    states: BTreeMap<String, UpdateState>,
}

impl ResidualSet {
    pub fn zeros(model: &Model, stages: &[usize]) -> Self {
        let values = stages.iter().map(|&s| (model.stage_name(s).to_string(), Tensor::zeros(model.stage_shape(s)))).collect();
        ResidualSet { values, states: BTreeMap::new() }
    }

    pub fn values(&self) -> &BTreeMap<String, Tensor> {
        &self.values
    }

    pub fn get(&self, layer: &str) -> Option<&Tensor> {
        self.values.get(layer)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn update(&mut self, layer: &str, rule: &UpdateRule, rate: f64, grad: &Tensor) -> Result<()> {
        let value = self.values.get_mut(layer).expect("residual exists");
        let state = self.states.remove(layer).unwrap_or_default();
        let (next, state) = update_step(rule, rate, value, grad, state)?;
        *value = next;
        self.states.insert(layer.to_string(), state);
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeedbackTrace {
    /// Partial loss before each update, one list per optimized pivot (one list in total for RF).
    pub losses: Vec<Vec<f64>>,
    /// Partial loss after the last update of each list in `losses`.
    pub final_losses: Vec<f64>,
    /// Wall time of each iteration, in milliseconds.
    pub iteration_ms: Vec<f64>,
    pub stats: TapeStats,
}

impl FeedbackTrace {
    pub fn iterations(&self) -> usize {
        self.losses.iter().map(Vec::len).sum()
    }

    /// `(decreases, steps)` over consecutive losses, counting the final loss.
    pub fn descent_counts(&self) -> (usize, usize) {
        let mut down = 0;
        let mut steps = 0;
        for (seq, &last) in self.losses.iter().zip(&self.final_losses) {
            let full: Vec<f64> = seq.iter().copied().chain(std::iter::once(last)).collect();
            for w in full.windows(2) {
                steps += 1;
                down += (w[1] < w[0]) as usize;
            }
        }
        (down, steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackOutcome {
    /// All output scores after refinement.
    pub scores: Tensor,
    /// Scores at the evidence's unknown indices, in that order.
    pub unknown_scores: Vec<f64>,
    /// True when no labels were known and the result is a plain forward pass.
    pub degenerate: bool,
    /// Final pivot activations (single-layer, LF) or residuals (RF).
    pub refined: BTreeMap<String, Tensor>,
    pub trace: FeedbackTrace,
}

impl FeedbackOutcome {
    fn from_scores(scores: Tensor, evidence: &EvidencePartition, degenerate: bool, trace: FeedbackTrace) -> Self {
        let unknown_scores = evidence.unknown().iter().map(|&j| scores.data()[j]).collect();
        FeedbackOutcome { scores, unknown_scores, degenerate, refined: BTreeMap::new(), trace }
    }
}

/// Inference method selector used by the harness and CLI.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    Single,
    Lf,
    Rf,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Single => "single",
            Method::Lf => "lf",
            Method::Rf => "rf",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "single" => Ok(Method::Single),
            "lf" => Ok(Method::Lf),
            "rf" => Ok(Method::Rf),
            other => Err(Error::InvalidSpec(format!("unknown method `{other}`"))),
        }
    }
}

/// Dispatches to the requested procedure. `Single` uses the first configured pivot.
pub fn infer(
    method: &Method,
    model: &Model,
    input: &Tensor,
    evidence: &EvidencePartition,
    config: &FeedbackConfig,
    weights: Option<&ClassWeights>,
) -> Result<FeedbackOutcome> {
    match method {
        Method::None => plain_forward(model, input, evidence),
        Method::Single => {
            let layer = config
                .pivots
                .first()
                .ok_or_else(|| Error::InvalidSpec("single-layer feedback needs a pivot".into()))?;
            single_layer_feedback(model, input, evidence, layer, config, weights)
        }
        Method::Lf => layer_wise_feedback(model, input, evidence, config, weights),
        Method::Rf => residual_feedback(model, input, evidence, config, weights),
    }
}

pub fn plain_forward(model: &Model, input: &Tensor, evidence: &EvidencePartition) -> Result<FeedbackOutcome> {
    let scores = model.predict(input)?;
    Ok(FeedbackOutcome::from_scores(scores, evidence, evidence.is_degenerate(), FeedbackTrace::default()))
}

fn clip(grad: &mut Tensor, max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let n = grad.norm();
        if n > c {
            *grad = grad.scale(c / n);
        }
    }
}

/// Runs `iterations` updates on one stage value, replaying downstream after each.
fn refine_stage(
    tape: &mut Tape<'_>,
    loss: NodeId,
    name: &str,
    node: NodeId,
    config: &FeedbackConfig,
    trace: &mut FeedbackTrace,
) -> Result<Tensor> {
    let rate = config.rate_for(name);
    let mut activation = tape.value(node).clone();
    let mut state = UpdateState::default();
    let mut losses = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let started = Instant::now();
        losses.push(tape.value(loss).item());
        let mut grad = tape.backward_to(loss, &[node])?.remove(0);
        clip(&mut grad, config.max_grad_norm);
        (activation, state) = update_step(&config.rule, rate, &activation, &grad, state)?;
        tape.forward_from(name, &activation, None)?;
        trace.iteration_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    trace.losses.push(losses);
    trace.final_losses.push(tape.value(loss).item());
    Ok(activation)
}

fn finish(tape: &Tape<'_>, evidence: &EvidencePartition, mut trace: FeedbackTrace, refined: BTreeMap<String, Tensor>) -> FeedbackOutcome {
    trace.stats = tape.stats();
    let mut out = FeedbackOutcome::from_scores(tape.output_value().clone(), evidence, false, trace);
    out.refined = refined;
    out
}

/// Optimizes the activation of a single layer (`"input"` for the input itself),
/// then predicts from it.
pub fn single_layer_feedback(
    model: &Model,
    input: &Tensor,
    evidence: &EvidencePartition,
    layer: &str,
    config: &FeedbackConfig,
    weights: Option<&ClassWeights>,
) -> Result<FeedbackOutcome> {
    config.validate()?;
    model.stage_of(layer)?;
    let mut tape = forward_full(model, input)?;
    let Some(loss) = partial_loss(&mut tape, evidence, weights)? else {
        return Ok(FeedbackOutcome::from_scores(tape.output_value().clone(), evidence, true, FeedbackTrace::default()));
    };
    let node = tape.pivot(layer)?;
    let mut trace = FeedbackTrace::default();
    let refined = refine_stage(&mut tape, loss, layer, node, config, &mut trace)?;
    Ok(finish(&tape, evidence, trace, BTreeMap::from([(layer.to_string(), refined)])))
}

/// Layer-wise feedback: optimizes each pivot in topological order, freezing it
/// before initializing the next one from a truncated forward pass.
pub fn layer_wise_feedback(
    model: &Model,
    input: &Tensor,
    evidence: &EvidencePartition,
    config: &FeedbackConfig,
    weights: Option<&ClassWeights>,
) -> Result<FeedbackOutcome> {
    config.validate()?;
    let pivots = config.ordered_pivots(model)?;
    let mut tape = forward_full(model, input)?;
    let Some(loss) = partial_loss(&mut tape, evidence, weights)? else {
        return Ok(FeedbackOutcome::from_scores(tape.output_value().clone(), evidence, true, FeedbackTrace::default()));
    };
    let mut trace = FeedbackTrace::default();
    let mut refined = BTreeMap::new();
    for (name, stage) in pivots.iter() {
        // The stage value already equals Forward(frozen previous pivot).
        let node = tape.stage_node(stage);
        let frozen = refine_stage(&mut tape, loss, name, node, config, &mut trace)?;
        refined.insert(name.to_string(), frozen);
    }
    Ok(finish(&tape, evidence, trace, refined))
}

/// Stage receiving the residual for `pivot` under `placement`.
pub fn residual_stage(model: &Model, stage: usize, placement: ResidualPlacement) -> usize {
    match placement {
        ResidualPlacement::PreNonlinearity if stage > 0 && model.layers()[stage - 1].kind().is_nonlinearity() => stage - 1,
        _ => stage,
    }
}

/// Residual feedback: zero residuals at every pivot, all updated jointly from a
/// single backward pass per iteration.
pub fn residual_feedback(
    model: &Model,
    input: &Tensor,
    evidence: &EvidencePartition,
    config: &FeedbackConfig,
    weights: Option<&ClassWeights>,
) -> Result<FeedbackOutcome> {
    config.validate()?;
    let pivots = config.ordered_pivots(model)?;
    let mut slots: Vec<(usize, &str)> =
        pivots.iter().map(|(name, s)| (residual_stage(model, s, config.placement), name)).collect();
    slots.dedup_by_key(|(s, _)| *s);
    let stages: Vec<usize> = slots.iter().map(|(s, _)| *s).collect();

    let mut tape = forward_full_with_residuals(model, input, &stages)?;
    let Some(loss) = partial_loss(&mut tape, evidence, weights)? else {
        return Ok(FeedbackOutcome::from_scores(tape.output_value().clone(), evidence, true, FeedbackTrace::default()));
    };
    let mut residuals = ResidualSet::zeros(model, &stages);
    let leaves: Vec<NodeId> = stages.iter().map(|&s| tape.residual_node(s).expect("slot inserted")).collect();
    let names: Vec<&str> = stages.iter().map(|&s| model.stage_name(s)).collect();
    let first = names[0];
    // Upstream of the first residual never changes, so its transform output is fixed.
    let anchor = tape.value(tape.transform_node(stages[0])).clone();

    let mut trace = FeedbackTrace::default();
    let mut losses = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let started = Instant::now();
        losses.push(tape.value(loss).item());
        let grads = tape.backward_to(loss, &leaves)?;
        for ((name, (_, pivot)), mut grad) in names.iter().zip(&slots).zip(grads) {
            clip(&mut grad, config.max_grad_norm);
            residuals.update(name, &config.rule, config.rate_for(pivot), &grad)?;
        }
        tape.forward_from(first, &anchor, Some(residuals.values()))?;
        trace.iteration_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    trace.losses.push(losses);
    trace.final_losses.push(tape.value(loss).item());
    Ok(finish(&tape, evidence, trace, residuals.values().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Architecture, LayerKind, LayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let arch = Architecture {
            input_shape: vec![1, 6, 6],
            layers: vec![
                LayerSpec::new("conv", LayerKind::Conv2d { out_channels: 3, kernel: 3, stride: 1, pad: 1 }),
                LayerSpec::new("relu", LayerKind::Relu),
                LayerSpec::new("pool", LayerKind::Maxpool { size: 2 }),
                LayerSpec::new("flat", LayerKind::Flatten),
                LayerSpec::new("fc", LayerKind::Dense { units: 8 }),
                LayerSpec::new("act", LayerKind::Relu),
                LayerSpec::new("head", LayerKind::SigmoidHead { units: 6 }),
            ],
            heads: vec![],
        };
        build_model(&arch, 42).unwrap()
    }

    fn input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 6, 6], (0..36).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn evidence() -> EvidencePartition {
        EvidencePartition::new(BTreeMap::from([(0, 1.0), (1, 0.0), (2, 1.0)]), vec![3, 4, 5], 6).unwrap()
    }

    #[test]
    fn sgd_and_zero_gradient() {
        let one = Tensor::scalar(1.0);
        let (v, _) = update_step(&UpdateRule::Sgd, 0.1, &one, &Tensor::scalar(0.5), UpdateState::default()).unwrap();
        assert!((v.item() - 0.95).abs() < 1e-15);
        for rule in [UpdateRule::Sgd, UpdateRule::Momentum { beta: 0.9 }, UpdateRule::adam()] {
            let (v, _) = update_step(&rule, 0.1, &one, &Tensor::scalar(0.0), UpdateState::default()).unwrap();
            assert_eq!(v.item(), 1.0, "{rule:?}");
        }
    }

    #[test]
    fn adam_first_step() {
        // m = 0.05, v = 0.00025; corrected: 0.5 and 0.25; step = 0.1 * 0.5 / (0.5 + 1e-8)
        let (v, s) = update_step(&UpdateRule::adam(), 0.1, &Tensor::scalar(1.0), &Tensor::scalar(0.5), UpdateState::default())
            .unwrap();
        assert!((v.item() - 0.9).abs() < 1e-4);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn momentum_accumulates() {
        let rule = UpdateRule::Momentum { beta: 0.5 };
        let g = Tensor::scalar(1.0);
        let (v, s) = update_step(&rule, 0.1, &Tensor::scalar(0.0), &g, UpdateState::default()).unwrap();
        let (v, _) = update_step(&rule, 0.1, &v, &g, s).unwrap();
        assert!((v.item() - (-0.1 - 0.15)).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_and_empty_evidence_are_plain_forward() {
        let m = model();
        let x = input(1);
        let plain = m.predict(&x).unwrap();
        let zero_t = FeedbackConfig::new(["relu", "fc"], 0.1, 0);
        for method in [Method::Single, Method::Lf, Method::Rf] {
            let out = infer(&method, &m, &x, &evidence(), &zero_t, None).unwrap();
            assert_eq!(out.scores, plain, "{method:?}");
            assert!(!out.degenerate);
        }
        let empty = EvidencePartition::new(BTreeMap::new(), vec![3], 6).unwrap();
        let cfg = FeedbackConfig::new(["relu", "fc"], 0.1, 5);
        for method in [Method::Single, Method::Lf, Method::Rf] {
            let out = infer(&method, &m, &x, &empty, &cfg, None).unwrap();
            assert_eq!(out.scores, plain, "{method:?}");
            assert!(out.degenerate);
        }
    }

    #[test]
    fn single_pivot_lf_equals_single_layer() {
        let m = model();
        let x = input(2);
        for layer in ["input", "relu", "pool", "act"] {
            let cfg = FeedbackConfig::new([layer], 0.05, 6);
            let a = single_layer_feedback(&m, &x, &evidence(), layer, &cfg, None).unwrap();
            let b = layer_wise_feedback(&m, &x, &evidence(), &cfg, None).unwrap();
            assert_eq!(a.trace.losses, b.trace.losses);
            assert_eq!(a.scores, b.scores);
        }
    }

    #[test]
    fn first_rf_step_matches_first_lf_step() {
        let m = model();
        let x = input(3);
        let cfg = FeedbackConfig::new(["pool"], 0.05, 1);
        let lf = layer_wise_feedback(&m, &x, &evidence(), &cfg, None).unwrap();
        let rf = residual_feedback(&m, &x, &evidence(), &cfg, None).unwrap();
        let mut tape = forward_full(&m, &x).unwrap();
        let before = tape.value(tape.pivot("pool").unwrap()).clone();
        let _ = &mut tape;
        let delta = lf.refined["pool"].sub(&before).unwrap();
        for (a, b) in delta.data().iter().zip(rf.refined["pool"].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pivots_out_of_order_are_rejected() {
        let m = model();
        let cfg = FeedbackConfig::new(["fc", "relu"], 0.1, 2);
        assert!(matches!(layer_wise_feedback(&m, &input(1), &evidence(), &cfg, None), Err(Error::PivotOrder { .. })));
        assert!(matches!(residual_feedback(&m, &input(1), &evidence(), &cfg, None), Err(Error::PivotOrder { .. })));
        let cfg = FeedbackConfig::new(["nope"], 0.1, 2);
        assert!(matches!(
            single_layer_feedback(&m, &input(1), &evidence(), "nope", &cfg, None),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn known_loss_goes_down_and_params_stay_put() {
        let m = model();
        let before = m.param_checksum();
        let cfg = FeedbackConfig::new(["relu", "act"], 0.01, 10);
        for method in [Method::Lf, Method::Rf] {
            let out = infer(&method, &m, &input(4), &evidence(), &cfg, None).unwrap();
            let (down, steps) = out.trace.descent_counts();
            assert_eq!(down, steps, "{method:?}");
            assert_eq!(out.trace.iterations(), if method == Method::Lf { 20 } else { 10 });
        }
        assert_eq!(m.param_checksum(), before);
    }

    #[test]
    fn unknown_targets_do_not_affect_trajectory() {
        let m = model();
        let known = BTreeMap::from([(0, 1.0), (2, 0.0)]);
        let a = EvidencePartition::new(known.clone(), vec![1, 3], 6).unwrap();
        let b = EvidencePartition::new(known, vec![4, 5], 6).unwrap();
        let cfg = FeedbackConfig::new(["pool", "act"], 0.05, 4);
        let (ra, rb) = (
            residual_feedback(&m, &input(5), &a, &cfg, None).unwrap(),
            residual_feedback(&m, &input(5), &b, &cfg, None).unwrap(),
        );
        assert_eq!(ra.scores, rb.scores);
        assert_eq!(ra.trace.losses, rb.trace.losses);
    }

    #[test]
    fn pre_nonlinearity_residuals_sit_before_relu() {
        let m = model();
        let relu = m.stage_of("relu").unwrap();
        assert_eq!(residual_stage(&m, relu, ResidualPlacement::PreNonlinearity), relu - 1);
        assert_eq!(residual_stage(&m, relu, ResidualPlacement::PostNonlinearity), relu);
        let pool = m.stage_of("pool").unwrap();
        assert_eq!(residual_stage(&m, pool, ResidualPlacement::PreNonlinearity), pool);

        let mut cfg = FeedbackConfig::new(["relu"], 0.05, 3);
        cfg.placement = ResidualPlacement::PreNonlinearity;
        let pre = residual_feedback(&m, &input(6), &evidence(), &cfg, None).unwrap();
        assert!(pre.refined.contains_key("conv"));
        cfg.iterations = 0;
        let zero = residual_feedback(&m, &input(6), &evidence(), &cfg, None).unwrap();
        assert_eq!(zero.scores, m.predict(&input(6)).unwrap());
    }

    #[test]
    fn rate_override_and_clipping() {
        let m = model();
        let mut cfg = FeedbackConfig::new(["act"], 0.05, 1);
        let base = layer_wise_feedback(&m, &input(7), &evidence(), &cfg, None).unwrap();
        cfg.rate_overrides.insert("act".into(), 0.1);
        let faster = layer_wise_feedback(&m, &input(7), &evidence(), &cfg, None).unwrap();
        assert_ne!(base.scores, faster.scores);
        cfg.max_grad_norm = Some(1e-9);
        let clipped = layer_wise_feedback(&m, &input(7), &evidence(), &cfg, None).unwrap();
        let plain = m.predict(&input(7)).unwrap();
        for (a, b) in clipped.scores.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        cfg.rate = -1.0;
        assert!(matches!(layer_wise_feedback(&m, &input(7), &evidence(), &cfg, None), Err(Error::InvalidSpec(_))));
    }
}
