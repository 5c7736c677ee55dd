use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use xdomain::adapt::{epoch_refresh, AdaptConfig};
use xdomain::corpus::{Domain, RelevanceSets};
use xdomain::eval::evaluate_model;
use xdomain::synth::{generate, SynthSpec};
use xdomain::train::{adapt, pretrain, ModelSpec, TrainConfig};

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::desk(),
        pretrain_epochs: epochs,
        adapt_epochs: epochs,
        ..TrainConfig::default()
    }
}

fn benches(c: &mut Criterion) {
    let data = generate(&SynthSpec::default()).unwrap();
    let trained = pretrain(&config(5), &data.source, Some(&data.target), None, None).unwrap();
    let ckpt = &trained.checkpoint;
    let pp = &ckpt.preprocess;
    let source = data
        .source
        .with_video(pp.apply(data.source.video(), Domain::Source).unwrap())
        .unwrap();
    let target = data
        .target
        .with_video(pp.apply(data.target.video(), Domain::Target).unwrap())
        .unwrap();
    let relevance = RelevanceSets::build(&source).unwrap();
    let labels = data.truth.labels_for(&data.target).unwrap();

    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("pretrain_epoch", |b| {
        b.iter(|| pretrain(&config(1), &data.source, Some(&data.target), None, None).unwrap())
    });
    g.bench_function("adapt_epoch", |b| {
        b.iter(|| {
            adapt(
                &config(1),
                &data.source,
                &data.target,
                ckpt.clone(),
                Some(trained.optimizer.clone()),
                None,
            )
            .unwrap()
        })
    });
    g.bench_function("pseudo_label_refresh", |b| {
        b.iter(|| epoch_refresh(&ckpt.model, &source, &target, &relevance, &AdaptConfig::default()).unwrap())
    });
    g.bench_function("evaluate", |b| {
        b.iter(|| {
            black_box(
                evaluate_model(&ckpt.model, &target, &labels, data.truth.captions())
                    .unwrap()
                    .ndcg,
            )
        })
    });
    g.finish();
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
