use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use defa_bench::{bi_cells, Fixture};
use defa_core::reference::quantized::msdeform_attn_quantized;
use defa_core::reference::{fused_bi, msdeform_attn_reference, AttnOptions};
use defa_core::sim::simulate_block;
use defa_core::{ModeFlags, Parallelism};

fn four_product(n: [f64; 4], t0: f64, t1: f64) -> f64 {
    let (u0, u1) = (1.0 - t0, 1.0 - t1);
    n[0] * u1 * u0 + n[1] * t1 * u0 + n[2] * u1 * t0 + n[3] * t1 * t0
}

fn bilinear(c: &mut Criterion) {
    let cells = bi_cells(4096);
    let mut g = c.benchmark_group("bilinear");
    g.bench_function("fused", |b| b.iter(|| cells.iter().map(|&(n, t0, t1)| fused_bi(black_box(n), t0, t1)).sum::<f64>()));
    g.bench_function("four-product", |b| b.iter(|| cells.iter().map(|&(n, t0, t1)| four_product(black_box(n), t0, t1)).sum::<f64>()));
    g.finish();
}

fn attention(c: &mut Criterion) {
    let f = Fixture::new("16x16,8x8,4x4,2x2");
    let i = f.inputs();
    let opts = AttnOptions {
        narrowing: Some(&f.model.bounded_ranges),
        ..AttnOptions::default()
    };
    let mut g = c.benchmark_group("attention");
    g.sample_size(20);
    g.bench_function("float", |b| b.iter(|| msdeform_attn_reference(i.query, i.fmap, i.refs, i.weights, &f.model).unwrap()));
    g.bench_function("int12", |b| b.iter(|| msdeform_attn_quantized(i.query, i.fmap, i.refs, i.weights, &f.model, &opts).unwrap()));
    g.finish();
}

fn simulator(c: &mut Criterion) {
    let f = Fixture::new("16x16,8x8,4x4,2x2");
    let hw = f.config.hardware();
    let mut g = c.benchmark_group("simulate_block");
    g.sample_size(10);
    for parallelism in [Parallelism::Inter, Parallelism::Intra] {
        let flags = ModeFlags { parallelism, ..ModeFlags::default() };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{parallelism:?}").to_lowercase()), &flags, |b, flags| {
            b.iter(|| simulate_block(&f.inputs(), &f.model, *flags, &hw).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bilinear, attention, simulator);
criterion_main!(benches);
