//! Define-by-run computation tape with truncated replay and truncated reverse mode.
//!
//! A tape built by [`forward_full`] holds one node per model stage (the input and
//! every layer output). Stages may carry a residual slot, in which case the stage
//! value is `transform + residual` and the residual is a free leaf. Replaying from
//! a stage recomputes only the nodes after it; reverse mode stops at the earliest
//! requested target.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, Error, Result};
use crate::model::{Layer, Model, Params};
use crate::tensor::{self, Activation, Reduction, Tensor};

pub type NodeId = usize;

/// Per-label terms of a weighted binary cross-entropy over a subset of outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub indices: Vec<usize>,
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LossTerms {
    /// `sum_j w_j [y_j softplus(-f_j) + (1 - y_j) softplus(f_j)]`.
    pub fn value(&self, scores: &[f64]) -> f64 {
        let mut total = 0.0;
        for ((&j, &y), &w) in self.indices.iter().zip(&self.targets).zip(&self.weights) {
            let f = scores[j];
            total += w * (y * tensor::softplus(-f) + (1.0 - y) * tensor::softplus(f));
        }
        total
    }

    /// Adds `scale * dL/df` into `grad`; zero outside `indices`.
    pub fn accumulate_grad(&self, scores: &[f64], scale: f64, grad: &mut [f64]) {
        for ((&j, &y), &w) in self.indices.iter().zip(&self.targets).zip(&self.weights) {
            grad[j] += scale * w * (tensor::sigmoid(scores[j]) - y);
        }
    }
}

#[derive(Clone, Debug)]
pub enum Op<'m> {
    /// The model input, a leaf.
    Input,
    /// A free leaf: residuals and ad-hoc variables.
    Variable,
    Layer { index: usize, layer: &'m Layer },
    /// `parents[0] + parents[1]`.
    Add,
    Activation(Activation),
    Reduce(Reduction),
    PartialLoss(LossTerms),
}

impl Op<'_> {
    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Variable)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Variable => "variable",
            Op::Layer { layer, .. } => layer.kind().label(),
            Op::Add => "add",
            Op::Activation(Activation::Relu) => "relu",
            Op::Activation(Activation::Sigmoid) => "sigmoid",
            Op::Reduce(Reduction::Sum) => "sum",
            Op::Reduce(Reduction::Mean) => "mean",
            Op::PartialLoss(_) => "partial-loss",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode<'m> {
    pub id: NodeId,
    pub op: Op<'m>,
    pub parents: Vec<NodeId>,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Layer evaluations performed on a tape, forward and backward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    pub forward_evals: usize,
    pub backward_evals: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    name: String,
    /// Node holding the stage value `a_l`.
    node: NodeId,
    /// Node holding the layer output before any residual.
    transform: NodeId,
    residual: Option<NodeId>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<'m> {
    nodes: Vec<GraphNode<'m>>,
    stages: Vec<Stage>,
    by_name: HashMap<String, usize>,
    output: Option<NodeId>,
    stats: TapeStats,
}

impl<'m> Tape<'m> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn nodes(&self) -> &[GraphNode<'m>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&GraphNode<'m>> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = TapeStats::default();
    }

    /// The model output node, if this tape was built from a model.
    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn output_value(&self) -> &Tensor {
        &self.nodes[self.output.expect("tape built from a model")].value
    }

    /// Node holding the named stage value.
    pub fn pivot(&self, name: &str) -> Result<NodeId> {
        self.by_name.get(name).map(|&s| self.stages[s].node).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn pivot_names(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().map(|s| s.name.as_str())
    }

    pub fn stage_node(&self, stage: usize) -> NodeId {
        self.stages[stage].node
    }

    pub fn transform_node(&self, stage: usize) -> NodeId {
        self.stages[stage].transform
    }

    pub fn residual_node(&self, stage: usize) -> Option<NodeId> {
        self.stages[stage].residual
    }

    fn push(&mut self, op: Op<'m>, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(GraphNode { id, op, parents, value, grad: None });
        id
    }

    fn check_parent(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::UnknownNode(id));
        }
        Ok(())
    }

    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Variable, vec![], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_parent(a)?;
        self.check_parent(b)?;
        let v = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        self.check_parent(x)?;
        let v = tensor::activation(&self.nodes[x].value, kind);
        Ok(self.push(Op::Activation(kind), vec![x], v))
    }

    pub fn reduce(&mut self, x: NodeId, kind: Reduction) -> Result<NodeId> {
        self.check_parent(x)?;
        let v = tensor::reduce(&self.nodes[x].value, kind);
        Ok(self.push(Op::Reduce(kind), vec![x], v))
    }

    pub fn layer(&mut self, index: usize, layer: &'m Layer, x: NodeId) -> Result<NodeId> {
        self.check_parent(x)?;
        let v = layer.forward(&self.nodes[x].value)?;
        self.stats.forward_evals += 1;
        Ok(self.push(Op::Layer { index, layer }, vec![x], v))
    }

    pub fn partial_loss(&mut self, scores: NodeId, terms: LossTerms) -> Result<NodeId> {
        self.check_parent(scores)?;
        let len = self.nodes[scores].value.len();
        if let Some(&index) = terms.indices.iter().find(|&&j| j >= len) {
            return Err(Error::IndexOutOfRange { index, len });
        }
        let v = Tensor::scalar(terms.value(self.nodes[scores].value.data()));
        Ok(self.push(Op::PartialLoss(terms), vec![scores], v))
    }

    fn evaluate(&mut self, id: NodeId) -> Result<()> {
        let node = &self.nodes[id];
        let arg = |k: usize| &self.nodes[node.parents[k]].value;
        let value = match &node.op {
            Op::Input | Op::Variable => return Ok(()),
            Op::Layer { layer, .. } => {
                self.stats.forward_evals += 1;
                layer.forward(arg(0))?
            }
            Op::Add => arg(0).add(arg(1))?,
            Op::Activation(kind) => tensor::activation(arg(0), *kind),
            Op::Reduce(kind) => tensor::reduce(arg(0), *kind),
            Op::PartialLoss(terms) => Tensor::scalar(terms.value(arg(0).data())),
        };
        self.nodes[id].value = value;
        Ok(())
    }

    /// Recomputes every non-leaf node after `from`, in order.
    pub fn replay_after(&mut self, from: NodeId) -> Result<()> {
        for id in from + 1..self.nodes.len() {
            self.evaluate(id)?;
        }
        Ok(())
    }

    /// Truncated forward propagation from the named stage.
    ///
    /// `activation` replaces the stage value `a_l`, unless `residuals` carries an
    /// entry for that same stage: then it replaces the pre-residual transform
    /// output and the residual is added on top. Residual entries overwrite the
    /// stored residual leaves; stages without an entry keep their stored residual.
    /// Returns the model output.
    pub fn forward_from(
        &mut self,
        layer: &str,
        activation: &Tensor,
        residuals: Option<&BTreeMap<String, Tensor>>,
    ) -> Result<&Tensor> {
        let start = *self.by_name.get(layer).ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        let mut write_to = self.stages[start].node;
        if let Some(residuals) = residuals {
            for (name, r) in residuals {
                let s = *self.by_name.get(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
                if s < start {
                    return Err(Error::ResidualUpstream { residual: name.clone(), start: layer.to_string() });
                }
                let leaf = self.stages[s].residual.ok_or_else(|| Error::NoResidualSlot(name.clone()))?;
                if r.shape() != self.nodes[leaf].value.shape() {
                    return shape_err(format!(
                        "residual for `{name}` has shape {:?}, expected {:?}",
                        r.shape(),
                        self.nodes[leaf].value.shape()
                    ));
                }
                self.nodes[leaf].value.clone_from(r);
                if s == start {
                    write_to = self.stages[s].transform;
                }
            }
        }
        let slot = &mut self.nodes[write_to].value;
        if slot.shape() != activation.shape() {
            return shape_err(format!(
                "activation for `{layer}` has shape {:?}, expected {:?}",
                activation.shape(),
                slot.shape()
            ));
        }
        slot.clone_from(activation);
        self.replay_after(write_to)?;
        Ok(self.output_value())
    }

    /// Reverse-mode gradients of scalar `loss` with respect to each target.
    ///
    /// Traversal stops at the earliest target; nodes before it are never visited.
    pub fn backward_to(&mut self, loss: NodeId, targets: &[NodeId]) -> Result<Vec<Tensor>> {
        self.check_loss(loss)?;
        let ancestors = self.ancestors(loss);
        for &t in targets {
            if t >= self.nodes.len() || !ancestors[t] {
                return Err(Error::NotAncestor { target: t, loss });
            }
        }
        let Some(&lo) = targets.iter().min() else {
            return Ok(Vec::new());
        };
        self.backprop(loss, lo, None)?;
        Ok(targets
            .iter()
            .map(|&t| self.nodes[t].grad.clone().unwrap_or_else(|| Tensor::zeros(self.nodes[t].value.shape())))
            .collect())
    }

    /// Full reverse pass accumulating parameter gradients (scaled by `scale`)
    /// into `grads`, indexed by layer.
    pub fn backward_params(&mut self, loss: NodeId, grads: &mut [Option<Params>]) -> Result<()> {
        self.check_loss(loss)?;
        self.backprop(loss, 1, Some(grads))
    }

    fn check_loss(&self, loss: NodeId) -> Result<()> {
        let node = self.node(loss)?;
        if !node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss));
        }
        Ok(())
    }

    fn ancestors(&self, of: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![of];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                continue;
            }
            stack.extend(&self.nodes[id].parents);
        }
        seen
    }

    fn backprop(&mut self, loss: NodeId, lo: NodeId, mut param_grads: Option<&mut [Option<Params>]>) -> Result<()> {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss].grad = Some(Tensor::scalar(1.0));
        for id in (lo..=loss).rev() {
            let Some(g) = self.nodes[id].grad.take() else { continue };
            let node = &self.nodes[id];
            let wants = |k: usize| node.parents[k] >= lo;
            let mut contributions: Vec<(NodeId, Tensor)> = Vec::with_capacity(2);
            match &node.op {
                Op::Input | Op::Variable => {}
                Op::Layer { index, layer } => {
                    let x = &self.nodes[node.parents[0]].value;
                    let acc = param_grads.as_deref_mut().and_then(|p| p[*index].as_mut());
                    if wants(0) || acc.is_some() {
                        self.stats.backward_evals += 1;
                        if let Some(gx) = layer.backward(x, &g, wants(0), acc)? {
                            contributions.push((node.parents[0], gx));
                        }
                    }
                }
                Op::Add => {
                    for k in 0..2 {
                        if wants(k) {
                            contributions.push((node.parents[k], g.clone()));
                        }
                    }
                }
                Op::Activation(kind) => {
                    if wants(0) {
                        let x = &self.nodes[node.parents[0]].value;
                        contributions.push((node.parents[0], tensor::activation_backward(x, &g, *kind)?));
                    }
                }
                Op::Reduce(kind) => {
                    if wants(0) {
                        let shape = self.nodes[node.parents[0]].value.shape();
                        let n = shape.iter().product::<usize>() as f64;
                        let fill = match kind {
                            Reduction::Sum => g.item(),
                            Reduction::Mean => g.item() / n,
                        };
                        contributions.push((node.parents[0], Tensor::full(shape, fill)));
                    }
                }
                Op::PartialLoss(terms) => {
                    if wants(0) {
                        let scores = &self.nodes[node.parents[0]].value;
                        let mut grad = Tensor::zeros(scores.shape());
                        terms.accumulate_grad(scores.data(), g.item(), grad.data_mut());
                        contributions.push((node.parents[0], grad));
                    }
                }
            }
            self.nodes[id].grad = Some(g);
            for (parent, gp) in contributions {
                match &mut self.nodes[parent].grad {
                    Some(existing) => existing.add_assign(&gp)?,
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        Ok(())
    }
}

/// Records a full forward pass of `model` on `input`, with no residual slots.
pub fn forward_full<'m>(model: &'m Model, input: &Tensor) -> Result<Tape<'m>> {
    forward_full_with_residuals(model, input, &[])
}

/// Records a full forward pass, inserting a zero residual after each stage in
/// `residual_stages` (stage 0 is the input, stage `i + 1` the output of layer `i`).
pub fn forward_full_with_residuals<'m>(model: &'m Model, input: &Tensor, residual_stages: &[usize]) -> Result<Tape<'m>> {
    if input.shape() != model.input_shape() {
        return shape_err(format!(
            "input has shape {:?} but the model expects {:?}",
            input.shape(),
            model.input_shape()
        ));
    }
    if let Some(&s) = residual_stages.iter().find(|&&s| s > model.layers().len()) {
        return shape_err(format!("residual stage {s} beyond the last layer"));
    }
    let mut tape = Tape::new();
    let mut prev = tape.push(Op::Input, vec![], input.clone());
    for stage in 0..=model.layers().len() {
        let transform = if stage == 0 {
            prev
        } else {
            let index = stage - 1;
            let layer = &model.layers()[index];
            tape.layer(index, layer, prev)
                .map_err(|e| Error::Shape(format!("at layer `{}`: {e}", layer.name())))?
        };
        let (node, residual) = if residual_stages.contains(&stage) {
            let leaf = tape.variable(Tensor::zeros(tape.nodes[transform].value.shape()));
            (tape.add(transform, leaf)?, Some(leaf))
        } else {
            (transform, None)
        };
        let name = model.stage_name(stage).to_string();
        tape.by_name.insert(name.clone(), stage);
        tape.stages.push(Stage { name, node, transform, residual });
        prev = node;
    }
    tape.output = Some(prev);
    Ok(tape)
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` returns the function value and its analytic gradient at a point.
pub fn grad_check<F>(mut f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidSpec(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, analytic) = f(point)?;
    point.expect_same_shape(&analytic)?;
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let (up, _) = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let (down, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
