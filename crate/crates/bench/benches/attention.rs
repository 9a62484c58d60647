use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use teamwork::baselines::{AttentionBaseline, AttentionSpec};
use teamwork::Rng;
use teamwork_bench::{team_tokens, TEAM_SIZES};

const DIM: usize = 32;
const TOKENS: usize = 64;
const HEADS: usize = 2;

fn attention(c: &mut Criterion) {
    let spec = AttentionSpec::new(TOKENS, DIM, HEADS).unwrap();
    let baseline = AttentionBaseline::new(spec, &mut Rng::new(7)).unwrap();
    let mut group = c.benchmark_group("attention");
    for t in TEAM_SIZES {
        let xs = team_tokens(t, TOKENS, DIM, 8);
        group.bench_with_input(BenchmarkId::new("self", t), &t, |b, _| {
            b.iter(|| baseline.self_attention(black_box(&xs)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("joint", t), &t, |b, _| {
            b.iter(|| baseline.joint_attention(black_box(&xs)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
