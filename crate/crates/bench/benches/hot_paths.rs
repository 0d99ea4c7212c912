//! Benchmarks for the four hot paths: teacher-forced forward+backward,
//! per-epoch frozen redraw, greedy decoding, and corpus diversity metrics.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use paraformer_bench::{bench_corpus, bench_model, bench_vocab, reinit_stream};
use paraformer_core::{
    decode::{generate, DecodeConfig, DecodeStrategy},
    diversity_report, evaluate_loss, AdamState, Graph, InitSpec, SeedStream, TrainConfig,
    BOS,
};

fn forward_backward(c: &mut Criterion) {
    let vocab = bench_vocab();
    let model = bench_model(&vocab, 2);
    let ctx = [5usize, 6, 7, 8, 9, 10];
    let resp_in = [BOS, 7, 8, 9, 10, 5];
    let targets = [7usize, 8, 9, 10, 5, 2];
    c.bench_function("forward_backward_teacher_forced", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let logits = model.forward(&mut g, black_box(&ctx), black_box(&resp_in)).unwrap();
            let loss = g.cross_entropy_logits(&logits, &targets, 0).unwrap();
            black_box(g.backward(&loss).unwrap());
        })
    });
}

fn epoch_reinit(c: &mut Criterion) {
    let vocab = bench_vocab();
    let model = bench_model(&vocab, 2);
    let spec = InitSpec::standard_defaults();
    let stream = reinit_stream();
    let mut epoch = 0u64;
    c.bench_function("redraw_frozen_registry", |b| {
        b.iter(|| {
            epoch += 1;
            black_box(model.reinit_frozen(&spec, &stream.child_idx(epoch)).unwrap());
        })
    });
}

fn greedy_decode(c: &mut Criterion) {
    let vocab = bench_vocab();
    let model = bench_model(&vocab, 2);
    let cfg = DecodeConfig {
        strategy: DecodeStrategy::Greedy,
        max_new_tokens: 8,
        seed: 7,
        reinit_per_context: false,
    };
    let ctx = [5usize, 6, 7, 8];
    let stream = SeedStream::new(7).child("bench-decode");
    c.bench_function("greedy_decode_8_tokens", |b| {
        b.iter(|| black_box(generate(&model, black_box(&ctx), &cfg, &stream).unwrap()))
    });
}

fn adam_epoch(c: &mut Criterion) {
    let vocab = bench_vocab();
    let model = bench_model(&vocab, 2);
    let corpus = bench_corpus(32);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 0.001,
        reinit_each_epoch: true,
        ..TrainConfig::default()
    };
    c.bench_function("train_epoch_32_examples", |b| {
        let mut adam = AdamState::new(model.trainable_params());
        let mut epoch = 0usize;
        b.iter(|| {
            epoch += 1;
            black_box(
                paraformer_core::train_epoch(&model, &mut adam, &cfg, &corpus, &vocab, epoch)
                    .unwrap(),
            );
        })
    });
    c.bench_function("evaluate_loss_32_examples", |b| {
        b.iter(|| black_box(evaluate_loss(&model, &corpus, &vocab, 8).unwrap()))
    });
}

fn diversity(c: &mut Criterion) {
    let responses: Vec<Vec<String>> = (0..200)
        .map(|i| (0..12).map(|j| format!("t{}", (i * 7 + j * 3) % 40)).collect())
        .collect();
    c.bench_function("diversity_report_200x12", |b| {
        b.iter(|| black_box(diversity_report(black_box(&responses)).unwrap()))
    });
}

criterion_group!(benches, forward_backward, epoch_reinit, greedy_decode, adam_epoch, diversity);
criterion_main!(benches);
