//! LF vs RF per-iteration timing over a pivot schedule.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{Report, ReportRow};
use crate::error::{Error, Result};
use crate::feedback::{infer, FeedbackConfig, Method};
use crate::metrics::EvidencePartition;
use crate::model::{Model, PivotSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub iterations: usize,
    pub rate: f64,
    pub warmup: usize,
    pub timed: usize,
    /// Number of known outputs; the rest are unknown.
    pub known: Option<usize>,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { iterations: 20, rate: 1e-3, warmup: 20, timed: 200, known: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub schedule: Vec<String>,
    #[serde(flatten)]
    pub settings: BenchSettings,
}

struct Case {
    input: Tensor,
    evidence: EvidencePartition,
}

fn cases(model: &Model, settings: &BenchSettings, count: usize) -> Result<Vec<Case>> {
    let d = model.output_dim();
    let known = settings.known.unwrap_or(d / 2).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let size: usize = model.input_shape().iter().product();
    (0..count)
        .map(|_| {
            let input = Tensor::new(model.input_shape().to_vec(), (0..size).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let values: BTreeMap<usize, f64> = (0..known).map(|j| (j, f64::from(u8::from(rng.random_bool(0.5))))).collect();
            let evidence = EvidencePartition::new(values, (known..d).collect(), d)?;
            Ok(Case { input, evidence })
        })
        .collect()
}

/// For each start position in `schedule`, times LF and RF updating that
/// pivot together with every later one. Runs on the calling thread; LF and RF
/// inferences alternate so drift affects both equally.
pub fn benchmark_timing(model: &Model, schedule: &[String], settings: &BenchSettings) -> Result<Report> {
    if schedule.is_empty() {
        return Err(Error::InvalidSpec("pivot schedule is empty".into()));
    }
    if settings.iterations == 0 || settings.timed == 0 {
        return Err(Error::InvalidSpec("need at least one iteration and one timed inference".into()));
    }
    PivotSet::ordered(model, schedule)?;
    let inputs = cases(model, settings, settings.timed)?;
    let mut report = Report::default();
    for start in 0..schedule.len() {
        let pivots = schedule[start..].to_vec();
        let label = pivots.join("+");
        let config = FeedbackConfig::new(pivots.clone(), settings.rate, settings.iterations);
        let methods = [Method::Lf, Method::Rf];
        for i in 0..settings.warmup {
            let case = &inputs[i % inputs.len()];
            for m in &methods {
                infer(m, model, &case.input, &case.evidence, &config, None)?;
            }
        }
        let mut total_ms = [0.0; 2];
        let mut evals = [0.0; 2];
        for case in &inputs {
            for (k, m) in methods.iter().enumerate() {
                let t = Instant::now();
                let out = infer(m, model, &case.input, &case.evidence, &config, None)?;
                total_ms[k] += t.elapsed().as_secs_f64() * 1e3;
                let stats = out.trace.stats;
                evals[k] = (stats.forward_evals + stats.backward_evals - model.layers().len()) as f64;
            }
        }
        let known = case_known(&inputs);
        let per_iter = (settings.timed * settings.iterations) as f64;
        for (k, m) in methods.iter().enumerate() {
            let mk = |metric: &str, value: f64| ReportRow {
                method: m.label().into(),
                pivots: label.clone(),
                known,
                rep: 0,
                metric: metric.into(),
                value,
                wall_ms: total_ms[k],
            };
            report.push(mk("ms_per_iter", total_ms[k] / per_iter));
            report.push(mk("layer_evals_per_iter", evals[k] / settings.iterations as f64));
            report.push(mk("pivot_count", pivots.len() as f64));
        }
    }
    report.sort();
    Ok(report)
}

fn case_known(cases: &[Case]) -> usize {
    cases.first().map_or(0, |c| c.evidence.known().len())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, reference_architecture};

    #[test]
    fn spearman_hand_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // ranks (1, 2.5, 2.5) vs (1, 2, 3): r = 1.5 / sqrt(1.5 * 2)
        assert!((spearman(&[1.0, 5.0, 5.0], &[1.0, 2.0, 3.0]) - 1.5 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn report_shape_and_eval_counts() {
        let m = build_model(&reference_architecture(vec![1, 28, 28], 40, vec![]), 1).unwrap();
        let schedule: Vec<String> = ["pool2", "fc", "fc_relu"].map(String::from).to_vec();
        let settings = BenchSettings { iterations: 2, warmup: 1, timed: 2, ..Default::default() };
        let report = benchmark_timing(&m, &schedule, &settings).unwrap();
        assert_eq!(report.len(), 3 * 2 * 3);
        let evals = |r: &Report, method: &str, pivots: &str| {
            r.filter(method, "layer_evals_per_iter").find(|r| r.pivots == pivots).unwrap().value
        };
        let single = benchmark_timing(&m, &schedule[..1], &settings).unwrap();
        // RF differentiates each layer below the first pivot once per iteration.
        assert_eq!(evals(&report, "rf", "pool2+fc+fc_relu"), evals(&single, "rf", "pool2"));
        assert_eq!(evals(&single, "lf", "pool2"), evals(&single, "rf", "pool2"));
        assert!(evals(&report, "lf", "pool2+fc+fc_relu") > evals(&report, "rf", "pool2+fc+fc_relu"));
        assert!(benchmark_timing(&m, &["fc".into(), "pool2".into()], &settings).is_err());
    }
}
