use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use depthcrf::complexity::{dense_attention_macs, windowed_attention_macs};
use depthcrf::data::{assemble, BatchPlan};
use depthcrf::model::{init_params, predict};
use depthcrf::train::{batch_loss_and_grads, Precision};
use depthcrf::{Params, Tape, Tensor};
use depthcrf_bench::{scene, toy_config};

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("bmm");
    for n in [32usize, 64, 128] {
        let a = Tensor::from_fn([4, n, n], |i| (i % 13) as f32 * 0.1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let x = tape.leaf(&a);
                black_box(x.bmm(x, false, true).unwrap().value());
            })
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let x = Tensor::from_fn([1, 32, 32, 32], |i| (i % 7) as f32 * 0.1);
    let w = Tensor::from_fn([32, 32, 3, 3], |i| (i % 5) as f32 * 0.01);
    c.bench_function("conv3x3_32ch_32x32_fwd_bwd", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let xv = tape.leaf(&x.clone().with_grad());
            let wv = tape.leaf(&w.clone().with_grad());
            let y = xv.conv2d(wv, None, 1, 1).unwrap().sum();
            black_box(tape.backward(y).unwrap());
        })
    });
}

fn forward(c: &mut Criterion) {
    let cfg = toy_config();
    let params: Params<f32> = init_params(&cfg).unwrap();
    let mut g = c.benchmark_group("predict");
    g.sample_size(10);
    for side in [64usize, 128] {
        let s = scene(&cfg, 1, side);
        let img = Tensor::new([1, 3, side, side], s.rgb.data().to_vec()).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| black_box(predict(&cfg, &params, &img).unwrap()))
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = toy_config();
    let params: Params<f32> = init_params(&cfg).unwrap();
    let samples: Vec<_> = (0..4).map(|i| scene(&cfg, i, 64)).collect();
    let batch = assemble(&samples, &BatchPlan { indices: vec![0, 1, 2, 3], flips: vec![false; 4] }).unwrap();
    let mut g = c.benchmark_group("loss_and_grads");
    g.sample_size(10);
    g.bench_function("batch4_64x64", |b| {
        b.iter(|| black_box(batch_loss_and_grads(&cfg, &params, &batch, false, Precision::Single).unwrap()))
    });
    g.finish();
}

/// Prints the counted MACs next to the timings; the counts are what the
/// scaling claims rest on, the timings show the same trend.
fn attention_scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("window_attention_macs");
    g.sample_size(10);
    for window in [4usize, 7] {
        let mut prev: Option<(u64, u64)> = None;
        for side in [16usize, 32, 64] {
            let w = windowed_attention_macs(side, side, 32, 1, window).unwrap();
            let d = dense_attention_macs((side * side) as u64, 32);
            if let Some((pw, pd)) = prev {
                eprintln!(
                    "window {window} tokens {side}x{side}: windowed x{:.3}, dense x{:.3}",
                    w as f64 / pw as f64,
                    d as f64 / pd as f64
                );
            }
            prev = Some((w, d));
            g.bench_with_input(BenchmarkId::new(format!("S{window}"), side), &side, |b, &s| {
                b.iter(|| black_box(windowed_attention_macs(s, s, 32, 1, window).unwrap()))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, gemm, conv, forward, train_step, attention_scaling);
criterion_main!(benches);
