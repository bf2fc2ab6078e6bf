use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use patchwipe::data::{gen_blobs, train_mlp, BlobConfig, TrainConfig};
use patchwipe::evaluation::{losses, predictions};
use patchwipe::fixtures::model_for;
use patchwipe::geometry::{region_of, region_purity};
use patchwipe::par::Execution;
use patchwipe::unlearning::{unlearn_multipoint, UnlearnParams};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let (train, _) = gen_blobs(&BlobConfig {
        per_class: 1000,
        dim: 32,
        ..BlobConfig::default()
    })
    .unwrap();
    let net = train_mlp(
        &train,
        &TrainConfig {
            hidden: vec![32, 32],
            epochs: 5,
            seed: 1,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let base = model_for(&train, net).unwrap();
    let request: Vec<usize> = (0..train.len()).step_by(40).collect();
    let params = UnlearnParams {
        k: 4,
        seed: 5,
        ..UnlearnParams::default()
    };
    let patched = unlearn_multipoint(&base, &train, request.clone(), &params, Execution::Parallel)
        .unwrap()
        .model;
    let region = region_of(base.base(), &train.features[0], base.domain()).unwrap();

    let mut g = c.benchmark_group("batch_eval");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("patched_predictions", name), |b| {
            b.iter(|| predictions(&patched, &train, exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("losses", name), |b| b.iter(|| losses(&patched, &train, exec).unwrap()));
        g.bench_function(BenchmarkId::new("region_purity", name), |b| {
            b.iter(|| region_purity(&region, &train.features, exec))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("unlearn");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("multipoint_k4", name), |b| {
            b.iter(|| unlearn_multipoint(&base, &train, request.clone(), &params, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
