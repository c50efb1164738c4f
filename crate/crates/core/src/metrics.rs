//! Weighted logistic losses, evidence partitions and ranking metrics.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::graph::{LossTerms, NodeId, Tape};
use crate::tensor::{self, Tensor};

/// Known outputs with their true values, and the unknown outputs to predict.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvidencePartition {
    known: BTreeMap<usize, f64>,
    unknown: Vec<usize>,
}

impl EvidencePartition {
    pub fn new(known: BTreeMap<usize, f64>, unknown: Vec<usize>, outputs: usize) -> Result<Self> {
        for (&j, &y) in &known {
            if j >= outputs {
                return Err(Error::IndexOutOfRange { index: j, len: outputs });
            }
            if y != 0.0 && y != 1.0 {
                return Err(Error::InvalidSpec(format!("known value for label {j} must be 0 or 1, got {y}")));
            }
        }
        if let Some(&j) = unknown.iter().find(|&&j| j >= outputs) {
            return Err(Error::IndexOutOfRange { index: j, len: outputs });
        }
        let overlap: Vec<usize> = unknown.iter().copied().filter(|j| known.contains_key(j)).collect();
        if !overlap.is_empty() {
            return Err(Error::OverlappingSets(overlap));
        }
        Ok(EvidencePartition { known, unknown })
    }

    /// Takes known values for `known` from a full label row.
    pub fn from_labels(labels: &[f64], known: &[usize], unknown: Vec<usize>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for &j in known {
            let y = *labels.get(j).ok_or(Error::IndexOutOfRange { index: j, len: labels.len() })?;
            map.insert(j, y);
        }
        EvidencePartition::new(map, unknown, labels.len())
    }

    pub fn known(&self) -> &BTreeMap<usize, f64> {
        &self.known
    }

    pub fn unknown(&self) -> &[usize] {
        &self.unknown
    }

    pub fn is_degenerate(&self) -> bool {
        self.known.is_empty()
    }
}

/// Per-label loss weights `lambda_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    lambda: Vec<f64>,
}

impl ClassWeights {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if let Some(j) = lambda.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidSpec(format!("class weight {j} must be finite and positive")));
        }
        Ok(ClassWeights { lambda })
    }

    pub fn uniform(labels: usize) -> Self {
        ClassWeights { lambda: vec![1.0; labels] }
    }

    pub fn values(&self) -> &[f64] {
        &self.lambda
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

/// `lambda_j = sum_i (1 - y_ij) / sum_i y_ij` over an `[N, d]` binary label matrix.
///
/// Fails with [`Error::ExcludedLabels`] listing every label without positives.
pub fn class_weights(labels: &Tensor) -> Result<ClassWeights> {
    let (n, d) = matrix_dims(labels, "label matrix")?;
    let mut positives = vec![0.0; d];
    for row in labels.data().chunks_exact(d) {
        for (p, &y) in positives.iter_mut().zip(row) {
            *p += y;
        }
    }
    let excluded: Vec<usize> = (0..d).filter(|&j| positives[j] == 0.0).collect();
    if !excluded.is_empty() {
        return Err(Error::ExcludedLabels(excluded));
    }
    let lambda = positives.iter().map(|&p| (n as f64 - p) / p).collect();
    // A label positive in every sample gets weight 0, which the loss cannot use.
    ClassWeights::new(lambda).map_err(|_| {
        Error::ExcludedLabels((0..d).filter(|&j| positives[j] == n as f64).collect())
    })
}

/// `-sum_j lambda_j [y_j log s(f_j) + (1 - y_j) log(1 - s(f_j))]` over `subset` (all labels if `None`).
pub fn weighted_bce(scores: &Tensor, targets: &[f64], weights: &ClassWeights, subset: Option<&[usize]>) -> Result<f64> {
    let d = scores.len();
    if targets.len() != d || weights.len() != d {
        return shape_err(format!(
            "scores ({d}), targets ({}) and weights ({}) disagree",
            targets.len(),
            weights.len()
        ));
    }
    let indices: Vec<usize> = match subset {
        Some(s) => {
            if let Some(&index) = s.iter().find(|&&j| j >= d) {
                return Err(Error::IndexOutOfRange { index, len: d });
            }
            s.to_vec()
        }
        None => (0..d).collect(),
    };
    let terms = LossTerms {
        targets: indices.iter().map(|&j| targets[j]).collect(),
        weights: indices.iter().map(|&j| weights.values()[j]).collect(),
        indices,
    };
    Ok(terms.value(scores.data()))
}

/// Per-sample partial loss terms over the known labels; `None` for degenerate evidence.
pub fn partial_loss_terms(evidence: &EvidencePartition, weights: Option<&ClassWeights>) -> Option<LossTerms> {
    if evidence.is_degenerate() {
        return None;
    }
    let indices: Vec<usize> = evidence.known.keys().copied().collect();
    Some(LossTerms {
        targets: evidence.known.values().copied().collect(),
        weights: indices.iter().map(|&j| weights.map_or(1.0, |w| w.values()[j])).collect(),
        indices,
    })
}

/// Attaches the known-label loss to the tape output. Returns `Ok(None)` when
/// no labels are known.
pub fn partial_loss(tape: &mut Tape<'_>, evidence: &EvidencePartition, weights: Option<&ClassWeights>) -> Result<Option<NodeId>> {
    let Some(terms) = partial_loss_terms(evidence, weights) else {
        return Ok(None);
    };
    let out = tape.output().ok_or_else(|| Error::InvalidSpec("tape has no model output".into()))?;
    let len = tape.value(out).len();
    if let Some(w) = weights {
        if w.len() != len {
            return shape_err(format!("{} class weights for {len} outputs", w.len()));
        }
    }
    tape.partial_loss(out, terms).map(Some)
}

/// Non-interpolated average precision: mean precision at the rank of each
/// positive, scores sorted descending with ties kept in input order.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return shape_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let total: usize = labels.iter().filter(|&&y| y > 0.5).count();
    if total == 0 {
        return Err(Error::UndefinedAp(vec![]));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// Mean over `subset` of per-label AP across the rows of `[N, d]` matrices.
pub fn mean_ap(scores: &Tensor, labels: &Tensor, subset: &[usize]) -> Result<f64> {
    let (n, d) = matrix_dims(scores, "score matrix")?;
    if labels.shape() != scores.shape() {
        return shape_err(format!("scores {:?} vs labels {:?}", scores.shape(), labels.shape()));
    }
    if subset.is_empty() {
        return Err(Error::InvalidSpec("mean AP over an empty label subset".into()));
    }
    if let Some(&index) = subset.iter().find(|&&j| j >= d) {
        return Err(Error::IndexOutOfRange { index, len: d });
    }
    let column = |m: &Tensor, j: usize| -> Vec<f64> { (0..n).map(|i| m.data()[i * d + j]).collect() };
    let mut undefined = Vec::new();
    let mut total = 0.0;
    for &j in subset {
        match average_precision(&column(scores, j), &column(labels, j)) {
            Ok(ap) => total += ap,
            Err(Error::UndefinedAp(_)) => undefined.push(j),
            Err(e) => return Err(e),
        }
    }
    if !undefined.is_empty() {
        return Err(Error::UndefinedAp(undefined));
    }
    Ok(total / subset.len() as f64)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the true class.
pub fn multiclass_accuracy(scores: &Tensor, truth: &[usize]) -> Result<f64> {
    let (n, c) = matrix_dims(scores, "score matrix")?;
    if truth.len() != n {
        return shape_err(format!("{} true classes for {n} rows", truth.len()));
    }
    let correct = scores
        .data()
        .chunks_exact(c)
        .zip(truth)
        .filter(|(row, &t)| {
            let best = row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
            best == t
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Probability view of raw scores.
pub fn sigmoid_scores(scores: &Tensor) -> Tensor {
    scores.map(tensor::sigmoid)
}

fn matrix_dims(m: &Tensor, what: &str) -> Result<(usize, usize)> {
    if m.rank() != 2 {
        return shape_err(format!("{what} must be [N, d], got {:?}", m.shape()));
    }
    Ok((m.shape()[0], m.shape()[1]))
}
