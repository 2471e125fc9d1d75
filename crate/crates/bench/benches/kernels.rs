use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rarelm_bench::{token_batch, uniform, LossSpec};
use rarelm_core::kernels::{attention_core_fwd, gelu_fwd, layernorm_fwd, linear_fwd, AttnShape, LN_EPS};
use rarelm_core::loss::ce_loss;

// one training batch: 12 sequences of 64 tokens, width 128
const N: usize = 12 * 64;
const D: usize = 128;
const V: usize = 128;

fn dense(c: &mut Criterion) {
    let x = uniform(N * D, 1);
    let w = uniform(D * 4 * D, 2);
    let b = uniform(4 * D, 3);
    let mut y = vec![0.0f32; N * 4 * D];
    c.bench_function("linear_fwd 768x128x512", |bench| {
        bench.iter(|| linear_fwd(black_box(&x), &w, Some(&b), &mut y, N, D, 4 * D))
    });
    let g = vec![1.0f32; D];
    let z = vec![0.0f32; D];
    let mut out = vec![0.0f32; N * D];
    c.bench_function("layernorm_fwd 768x128", |bench| {
        bench.iter(|| layernorm_fwd(black_box(&x), &g, &z, LN_EPS as f32, &mut out, D))
    });
    let mut act = vec![0.0f32; N * D];
    c.bench_function("gelu_fwd 768x128", |bench| bench.iter(|| gelu_fwd(black_box(&x), &mut act)));
}

fn attention(c: &mut Criterion) {
    let s = AttnShape { batch: 12, seq: 64, d_model: D, n_head: 4 };
    let qkv = uniform(N * 3 * D, 4);
    let mut y = vec![0.0f32; N * D];
    c.bench_function("attention_core_fwd 12x64x128/4", |bench| {
        bench.iter(|| attention_core_fwd(black_box(&qkv), &mut y, s))
    });
}

fn losses(c: &mut Criterion) {
    let logits: Vec<f32> = uniform(N * V, 5).iter().map(|z| 4.0 * z).collect();
    let (_, targets) = token_batch(12, 64, V, 6);
    for (name, spec) in [
        ("standard", LossSpec::standard()),
        ("threshold", LossSpec::threshold(1.0)),
        ("dut", LossSpec::dut(1.0)),
        ("softminus", LossSpec::softminus(2.0, 1.0, false)),
    ] {
        c.bench_function(&format!("ce_loss {name} 768x128"), |bench| {
            bench.iter(|| ce_loss(black_box(&logits), &targets, V, &spec, None).unwrap())
        });
    }
}

criterion_group!(benches, dense, attention, losses);
criterion_main!(benches);
