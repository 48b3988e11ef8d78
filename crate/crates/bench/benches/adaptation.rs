use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use imkws_core::adapt::{step_imkws, step_tent};
use imkws_core::augment::make_views;
use imkws_core::experiment::templates_for;
use imkws_core::losses::dem_grad;
use imkws_core::stream::generate_stream;
use imkws_core::{
    AdaptConfig, LogitVector, Method, ModelDims, NormMode, NormPoolClassifier, SeedStream, StreamConfig,
    UnlabeledBatch,
};

fn fixture() -> (NormPoolClassifier, UnlabeledBatch, StreamConfig) {
    let stream = StreamConfig {
        n_batches: 1,
        ..StreamConfig::default()
    };
    let templates = templates_for(&stream).unwrap();
    let batch = generate_stream(&stream, &templates).unwrap().next().unwrap().into_parts().0;
    let dims = ModelDims {
        features: stream.bins,
        hidden: 32,
        classes: stream.n_classes,
    };
    (NormPoolClassifier::init(dims, SeedStream::new(0)), batch, stream)
}

fn losses(c: &mut Criterion) {
    let z = LogitVector::new(vec![2.0, -1.0, 0.5, 3.0]).unwrap();
    c.bench_function("dem_grad/4", |b| b.iter(|| dem_grad(black_box(&z), 0.5)));
    let z = LogitVector::new((0..35).map(|i| (i as f64 * 0.37).sin() * 4.0).collect()).unwrap();
    c.bench_function("dem_grad/35", |b| b.iter(|| dem_grad(black_box(&z), 0.5)));
}

fn model(c: &mut Criterion) {
    let (model, batch, _) = fixture();
    c.bench_function("forward/batch128", |b| {
        b.iter(|| model.forward(black_box(&batch.grids), &NormMode::BatchStats).unwrap())
    });
    let policy = AdaptConfig::default().mask_policy;
    c.bench_function("make_views/one_grid", |b| {
        b.iter(|| make_views(black_box(&batch.grids[0]), &policy, SeedStream::new(1)).unwrap())
    });
}

fn steps(c: &mut Criterion) {
    let (model, batch, _) = fixture();
    let tent = AdaptConfig::for_method(Method::Tent);
    c.bench_function("step/tent", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| step_tent(&mut m, &batch, &tent).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let imkws = AdaptConfig::for_method(Method::Imkws);
    c.bench_function("step/imkws", |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| step_imkws(&mut m, &batch, &imkws, SeedStream::new(2)).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, losses, model, steps);
criterion_main!(benches);
