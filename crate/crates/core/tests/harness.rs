use fbprop_core::harness::{
    emit_report, load_report, synth_dataset, train, DatasetSpec, Report, ReportRow, SplitSizes, TrainConfig,
};
use fbprop_core::model::reference_architecture;
use fbprop_core::{build_model, Error};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn diagonal_coupling_gives_uncorrelated_labels() {
    let d = 6;
    let mut spec = DatasetSpec::reference(17);
    spec.labels = d;
    spec.factors = d;
    spec.coupling = (0..d).map(|k| (0..d).map(|j| u8::from(j == k)).collect()).collect();
    spec.label_noise = 0.0;
    spec.splits = SplitSizes { train: 5000, val: 0, test: 0 };
    let ds = synth_dataset(&spec).unwrap();
    let col = |j: usize| -> Vec<f64> { (0..ds.len()).map(|i| ds.label_row(i)[j]).collect() };
    // Standard error of a sample correlation near zero is about 1 / sqrt(N).
    let bound = 3.0 / (ds.len() as f64).sqrt();
    for a in 0..d {
        for b in a + 1..d {
            let r = pearson(&col(a), &col(b));
            assert!(r.abs() < bound, "labels {a},{b}: r = {r}");
        }
    }
}

#[test]
fn coupled_labels_correlate() {
    let mut spec = DatasetSpec::reference(4);
    spec.splits = SplitSizes { train: 2000, val: 0, test: 0 };
    let ds = synth_dataset(&spec).unwrap();
    let col = |j: usize| -> Vec<f64> { (0..ds.len()).map(|i| ds.label_row(i)[j]).collect() };
    // Labels 3 and 23 share a factor; 3 and 4 do not.
    assert!(pearson(&col(3), &col(23)) > 0.7);
    assert!(pearson(&col(3), &col(4)).abs() < 0.1);
}

#[test]
fn overfits_sixteen_samples() {
    let mut spec = DatasetSpec::reference(8);
    spec.splits = SplitSizes { train: 16, val: 0, test: 0 };
    let ds = synth_dataset(&spec).unwrap();
    // Every label needs a positive and a negative for the class weights.
    let mut rows: Vec<f64> = ds.labels().data().to_vec();
    for j in 0..40 {
        rows[j] = 1.0;
        rows[40 + j] = 0.0;
    }
    let ds = fbprop_core::harness::Dataset::new(
        ds.images().clone(),
        fbprop_core::Tensor::new(vec![16, 40], rows).unwrap(),
    )
    .unwrap();
    let mut model = build_model(&reference_architecture(vec![1, 28, 28], 40, vec![]), 3).unwrap();
    let cfg = TrainConfig { epochs: 500, batch_size: 16, rate: 0.003, momentum: 0.9, rate_decay: 1.0, seed: 1 };
    let curve = train(&mut model, &ds, &ds.slice(0, 4).unwrap(), &cfg).unwrap();
    let last = *curve.train_loss.last().unwrap();
    assert!(last < 0.01, "final train loss {last}");
}

#[test]
fn report_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let mut report = Report::default();
    for (m, k) in [("rf", 10), ("none", 0), ("lf", 10), ("lf", 5)] {
        report.push(ReportRow {
            method: m.into(),
            pivots: "pool2+fc_relu".into(),
            known: k,
            rep: 1,
            metric: "map".into(),
            value: 1.0 / 3.0,
            wall_ms: 12.25,
        });
    }
    emit_report(&report, &path).unwrap();
    let mut back = load_report(&path).unwrap().rows;
    let mut orig = report.rows.clone();
    let key = |r: &ReportRow| (r.method.clone(), r.known);
    back.sort_by_key(key);
    orig.sort_by_key(key);
    assert_eq!(back, orig);
    assert!(matches!(emit_report(&Report::default(), &path), Err(Error::EmptyReport)));
}
