use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ircdesync::par::Exec;
use ircdesync::scenario::builtin;
use ircdesync::sweep;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn placement(c: &mut Criterion) {
    let mut g = c.benchmark_group("placement-5-servers");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep::placement_sweep(exec, 5).unwrap())
        });
    }
    g.finish();
}

fn toggles(c: &mut Criterion) {
    let mut g = c.benchmark_group("toggle-pairs");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep::toggle_sweep(exec).unwrap())
        });
    }
    g.finish();
}

fn detection(c: &mut Criterion) {
    let mut g = c.benchmark_group("detection-200");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep::detection_trials(exec, 200, 1).unwrap())
        });
    }
    g.finish();
}

fn attempts(c: &mut Criterion) {
    let s = builtin("jittered-desync").unwrap().scenario().unwrap();
    let mut g = c.benchmark_group("attempts-1000");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep::attempt_stats(exec, &s, 1000, 10, 1).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, placement, toggles, detection, attempts);
criterion_main!(benches);
