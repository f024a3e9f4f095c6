use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsq_core::decoding::{beam_search_utterance, speech_memory, DecodeConfig};
use dsq_core::nn::Session;
use dsq_core::training::{onehot, segment_loss, PreparedUtterance};
use dsq_core::vocab::EOS;
use dsq_core::{DiscourseModel, ModelConfig, Precision, Tensor};

const V: usize = 24;

fn desk_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ffn: 64,
        n_feats: 16,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn lecture(rng: &mut ChaCha8Rng, n: usize) -> Vec<PreparedUtterance> {
    (0..n)
        .map(|_| {
            let mut tokens: Vec<usize> = (0..8).map(|_| rng.gen_range(4..V)).collect();
            tokens.push(EOS);
            PreparedUtterance {
                features: Some(random(rng, 32, 16)),
                tokens,
            }
        })
        .collect()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 64, 64);
    let b = random(&mut rng, 64, 64);
    c.bench_function("matmul 64x64", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
}

fn forward(c: &mut Criterion) {
    let cfg = desk_config();
    let (model, store) = DiscourseModel::new_asr(&cfg, V, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats = random(&mut rng, 32, 16);
    for p in [Precision::Verification, Precision::Fast] {
        c.bench_function(&format!("speech encoder 32 frames ({p:?})"), |b| {
            b.iter(|| speech_memory(&model, &store, p, black_box(&feats)).unwrap())
        });
    }
}

fn training_step(c: &mut Criterion) {
    let cfg = desk_config();
    let (model, store) = DiscourseModel::new_asr(&cfg, V, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let utts = lecture(&mut rng, 3);
    let targets: Vec<Tensor> = utts.iter().map(|u| onehot(&u.tokens, V).unwrap()).collect();
    c.bench_function("loss and gradients, 3-utterance segment", |b| {
        b.iter_batched(
            || Session::tracking(&store, Precision::Fast),
            |s| {
                let loss = segment_loss(&s, &model, &utts, &targets, true, None).unwrap();
                s.graph().backward(loss).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn beam(c: &mut Criterion) {
    let cfg = desk_config();
    let (model, store) = DiscourseModel::new_asr(&cfg, V, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let speech = speech_memory(&model, &store, Precision::Fast, &random(&mut rng, 32, 16)).unwrap();
    let context = random(&mut rng, 3, cfg.d_model);
    let memories = [speech, context];
    let mut group = c.benchmark_group("beam search 16 tokens");
    for beam_size in [1, 4, 8] {
        let dc = DecodeConfig {
            beam_size,
            max_len: 16,
            ..DecodeConfig::default()
        };
        group.bench_function(format!("beam {beam_size}"), |b| {
            b.iter(|| beam_search_utterance(&model, &store, Precision::Fast, &memories, &dc).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, forward, training_step, beam);
criterion_main!(benches);
