use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use auprompt::model::{encode_video, forward_full};
use auprompt::pretrain::{batch_loss_and_grads, evaluate};
use auprompt::tta::{adapt_corpus, personalize_video, window_entropy_profile, TunablePrompts};
use auprompt::TtaConfig;
use auprompt_bench::fixture;

fn forward(c: &mut Criterion) {
    let f = fixture(0);
    let ck = &f.checkpoint;
    let video = &f.targets[0];
    c.bench_function("encode_video", |b| {
        b.iter(|| encode_video(black_box(&video.frames), ck.params.temporal()).unwrap())
    });
    c.bench_function("forward_full", |b| {
        b.iter(|| forward_full(black_box(&video.frames), ck.prompts.embeddings(), &ck.params).unwrap())
    });
    c.bench_function("window_entropy_profile/L16", |b| {
        b.iter(|| window_entropy_profile(black_box(&video.frames), &ck.adapted, &ck.params, 16).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let f = fixture(0);
    let ck = &f.checkpoint;
    let batch: Vec<_> = f.sources.iter().take(8).collect();
    c.bench_function("batch_loss_and_grads/8", |b| {
        b.iter(|| batch_loss_and_grads(&ck.params, ck.prompts.embeddings(), black_box(&batch)).unwrap())
    });
    c.bench_function("evaluate/sources", |b| {
        b.iter(|| evaluate(black_box(&f.sources), ck.prompts.embeddings(), &ck.params, None).unwrap())
    });
}

fn adaptation(c: &mut Criterion) {
    let f = fixture(0);
    let ck = &f.checkpoint;
    let cfg = TtaConfig::default();
    let video = &f.targets[0];
    c.bench_function("personalize_video", |b| {
        b.iter(|| {
            let mut prompts = TunablePrompts::new(ck.adapted.clone());
            personalize_video(black_box(video), &mut prompts, &ck.params, &cfg).unwrap()
        })
    });
    let mut group = c.benchmark_group("adapt_corpus");
    group.sample_size(10);
    group.bench_function("targets", |b| {
        b.iter(|| adapt_corpus(black_box(&f.targets), &ck.adapted, &ck.params, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, forward, training, adaptation);
criterion_main!(benches);
