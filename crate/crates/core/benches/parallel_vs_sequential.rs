use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use relevance_core::par::ExecMode;
use relevance_core::pipeline::{Engine, PipelineConfig};
use relevance_core::world::Split;

fn modes() -> [(&'static str, ExecMode); 2] {
    [("parallel", ExecMode::Parallel), ("sequential", ExecMode::Sequential)]
}

fn bench(c: &mut Criterion) {
    let e = Engine::init(PipelineConfig::default(), None, ExecMode::Parallel).expect("engine");
    let queries: Vec<_> = e.world.sample_queries(Split::Train, 20, "bench").into_iter().map(|w| w.query.clone()).collect();

    let mut g = c.benchmark_group("build_index");
    g.sample_size(10);
    for (name, mode) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(e.model().build_index(&e.world.serving_products, mode))));
    }
    g.finish();

    let mut g = c.benchmark_group("retrieve_20_queries");
    for (name, mode) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                for q in &queries {
                    black_box(e.model().retrieve(q, e.index(), 50, mode).expect("retrieve"));
                }
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
