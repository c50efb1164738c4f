//! Shared fixtures for the benchmarks.

use std::collections::BTreeMap;

use fbprop_core::harness::reference_model_spec;
use fbprop_core::{build_model, EvidencePartition, Model, Tensor};

/// Reference network with freshly initialized parameters.
pub fn reference_model() -> Model {
    build_model(&reference_model_spec(0).architecture, 0).expect("reference architecture is valid")
}

/// Deterministic pseudo-image in `[-1, 1)`.
pub fn input(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite data")
}

/// First half of the outputs known with alternating values.
pub fn evidence(outputs: usize) -> EvidencePartition {
    let half = outputs / 2;
    let known: BTreeMap<usize, f64> = (0..half).map(|j| (j, (j % 2) as f64)).collect();
    EvidencePartition::new(known, (half..outputs).collect(), outputs).expect("disjoint sets")
}
