//! Sequential vs data-parallel kernel benchmarks, plus a whole forward pass
//! under each backend. The parallel path splits work per output row, so both
//! produce bit-identical results; this suite measures what that costs or buys
//! at different problem sizes.
//!
//! Run with `cargo bench`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coda::model::{forward_lm, Architecture, ModelConfig, VariantKind};
use coda::tensor::backend::{matmul_par, matmul_seq, MatmulSpec};
use coda::tensor::Tensor;
use coda::training::TrainState;

fn square_spec(n: usize) -> MatmulSpec {
    MatmulSpec {
        batch: 1,
        p: n,
        q: n,
        r: n,
        a_batched: true,
        b_batched: true,
        trans_a: false,
        trans_b: false,
    }
}

/// The shape attention actually produces: scores = Q * K^T per (batch, head).
fn attention_scores_spec(batch_heads: usize, n: usize, d_head: usize) -> MatmulSpec {
    MatmulSpec {
        batch: batch_heads,
        p: n,
        q: d_head,
        r: n,
        a_batched: true,
        b_batched: true,
        trans_a: false,
        trans_b: true,
    }
}

fn bench_square(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_square");
    for n in [32, 64, 128, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(vec![n, n], 1.0, &mut rng);
        let b = Tensor::randn(vec![n, n], 1.0, &mut rng);
        let spec = square_spec(n);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bench, _| {
            bench.iter(|| matmul_seq(&spec, a.data(), b.data(), &mut out));
        });
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bench, _| {
            bench.iter(|| matmul_par(&spec, a.data(), b.data(), &mut out));
        });
    }
    group.finish();
}

fn bench_attention_scores(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_scores");
    // 16-sequence batch, 4 heads, d_head 16 at growing sequence lengths
    for n in [16, 32, 64] {
        let (bh, d_head) = (16 * 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::randn(vec![bh, n, d_head], 1.0, &mut rng);
        let k = Tensor::randn(vec![bh, n, d_head], 1.0, &mut rng);
        let spec = attention_scores_spec(bh, n, d_head);
        let mut out = vec![0.0; bh * n * n];
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bench, _| {
            bench.iter(|| matmul_seq(&spec, q.data(), k.data(), &mut out));
        });
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bench, _| {
            bench.iter(|| matmul_par(&spec, q.data(), k.data(), &mut out));
        });
    }
    group.finish();
}

/// End-to-end forward pass with the production dispatch (parallel above the
/// size threshold, sequential below). Compare against a run with
/// `--no-default-features` for the all-sequential number.
fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_lm");
    group.sample_size(20);
    for variant in [VariantKind::Vanilla, VariantKind::Coda] {
        let cfg = ModelConfig::desk_default(variant, Architecture::Lm, 64);
        let params = TrainState::new(&cfg, 0).unwrap().params;
        let tokens: Vec<Vec<usize>> = (0..16).map(|i| (0..32).map(|j| 4 + (i + j) % 60).collect()).collect();
        group.bench_function(variant.name(), |bench| {
            bench.iter(|| forward_lm(&cfg, &params, &tokens, None).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_square, bench_attention_scores, bench_forward);
criterion_main!(benches);
