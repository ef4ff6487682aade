//! Rayon pool against a single worker on the hot paths.
//!
//! "sequential" runs inside a one-thread pool, so it measures the same code
//! without the fan-out. Build with `--no-default-features` for the plain loop.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;
use uatta_core::adapt::{build_batches, uatta_loss, AdaptationConfig, CalibrationHead, LossContext};
use uatta_core::ccs::select_reliable;
use uatta_core::io::EmbeddingSet;
use uatta_core::retrieval::{cosine_similarity, topk, Direction};
use uatta_core::simulator::{generate, SyntheticSpec};
use uatta_core::uncertainty::UncertaintyVariant;

fn data() -> (EmbeddingSet, EmbeddingSet) {
    let spec = SyntheticSpec {
        n_identities: 400,
        ..Default::default()
    };
    generate(&spec).expect("default spec is valid")
}

fn pools(c: &mut Criterion, name: &str, f: impl Fn() + Sync) {
    let single = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut group = c.benchmark_group(name);
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("sequential", 1), |b| {
        b.iter(|| single.install(&f))
    });
    let n = rayon::current_num_threads();
    group.bench_function(BenchmarkId::new("parallel", n), |b| b.iter(&f));
    group.finish();
}

fn bench(c: &mut Criterion) {
    let (text, image) = data();
    let k = 5;
    let s = cosine_similarity(&text, &image).unwrap();

    pools(c, "similarity", || {
        cosine_similarity(&text, &image).unwrap();
    });
    pools(c, "topk", || {
        topk(&s, k, Direction::T2I).unwrap();
        topk(&s, k, Direction::I2T).unwrap();
    });
    pools(c, "selection", || {
        select_reliable(&s, k).unwrap();
    });

    let reliable = select_reliable(&s, k).unwrap();
    let t2i = topk(&s, k, Direction::T2I).unwrap();
    let i2t = topk(&s, k, Direction::I2T).unwrap();
    let config = AdaptationConfig {
        queries_per_batch: reliable.reliable().len(),
        ..Default::default()
    };
    let batch = build_batches(&reliable, &t2i, &config, 0).unwrap().remove(0);
    let ctx = LossContext::new(&text, &image, &i2t).unwrap();
    let head = CalibrationHead::identity(text.dim());
    pools(c, "loss_and_gradient", || {
        uatta_loss(&ctx, &head, &batch, UncertaintyVariant::NormalizedDiffExp, 1e-8, true).unwrap();
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);
