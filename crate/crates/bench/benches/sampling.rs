use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ecm_bench::{darcy, desk_model};
use ecm_core::inference::ScheduleKind;
use ecm_core::{make_schedule, sample_unconditional, solve_constrained, Mask};

fn constrained(c: &mut Criterion) {
    let d = darcy(32, 1);
    let model = desk_model(32);
    let mask = Mask::coefficient(d.grid);
    let mut group = c.benchmark_group("solve_constrained_b1");
    group.sample_size(10);
    for steps in [1, 4, 16] {
        let schedule = make_schedule(steps, ScheduleKind::SigmaUniform, 1.0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(steps), &schedule, |b, s| {
            b.iter(|| solve_constrained(&model, &d.samples[0], &mask, &d.norm_stats, s, 0).unwrap())
        });
    }
    group.finish();
}

fn unconditional(c: &mut Criterion) {
    let model = desk_model(32);
    let schedule = make_schedule(2, ScheduleKind::SigmaUniform, 1.0).unwrap();
    let mut group = c.benchmark_group("sample_unconditional_nfe2");
    group.sample_size(10);
    for count in [1, 8] {
        group.bench_with_input(BenchmarkId::from_parameter(count), &count, |b, &k| {
            b.iter(|| sample_unconditional(&model, k, &schedule, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, constrained, unconditional);
criterion_main!(benches);
