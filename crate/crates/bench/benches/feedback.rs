use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fbprop_bench::{evidence, input, reference_model};
use fbprop_core::feedback::{layer_wise_feedback, residual_feedback};
use fbprop_core::FeedbackConfig;

fn lf_vs_rf(c: &mut Criterion) {
    let model = reference_model();
    let x = input(model.input_shape(), 1);
    let ev = evidence(model.output_dim());
    let schedule = ["relu1", "pool1", "relu2", "pool2", "fc_relu"];
    let mut group = c.benchmark_group("feedback");
    group.sample_size(10);
    for start in 0..schedule.len() {
        let pivots = &schedule[start..];
        let config = FeedbackConfig::new(pivots.iter().copied(), 1e-3, 5);
        let label = pivots.join("+");
        group.bench_with_input(BenchmarkId::new("lf", &label), &config, |b, cfg| {
            b.iter(|| layer_wise_feedback(&model, &x, &ev, cfg, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("rf", &label), &config, |b, cfg| {
            b.iter(|| residual_feedback(&model, &x, &ev, cfg, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, lf_vs_rf);
criterion_main!(benches);
