//! Criterion benches for the hot kernels and a full model step, each run on
//! the sequential path and (when compiled in) the rayon path, so the two are
//! directly comparable on the same build:
//!
//! ```bash
//! cargo bench -p uctransnet                          # parallel + sequential
//! cargo bench -p uctransnet --no-default-features    # sequential only
//! ```

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use uctransnet::config::{Mode, ModelConfig};
use uctransnet::model::{cct, forward, init_params, register_params};
use uctransnet::par::set_parallel;
use uctransnet::tensor::{Graph, Tensor};
use uctransnet::train::loss::combined_loss;

fn modes() -> Vec<(&'static str, bool)> {
    if cfg!(feature = "parallel") {
        vec![("sequential", false), ("parallel", true)]
    } else {
        vec![("sequential", false)]
    }
}

fn filled(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut s = seed | 1;
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(11);
        ((s >> 40) as f32 / (1u64 << 24) as f32) - 0.5
    })
}

fn bench_matmul(c: &mut Criterion) {
    let a = filled(&[128, 128], 1);
    let b = filled(&[128, 128], 2);
    let mut group = c.benchmark_group("matmul_128");
    for (label, par) in modes() {
        group.bench_function(label, |bench| {
            set_parallel(par);
            bench.iter(|| {
                let mut g = Graph::new();
                let va = g.constant(a.clone());
                let vb = g.constant(b.clone());
                black_box(g.matmul(va, vb).unwrap());
            });
        });
    }
    group.finish();
    set_parallel(true);
}

fn bench_conv2d(c: &mut Criterion) {
    let x = filled(&[16, 64, 64], 3);
    let w = filled(&[16, 16, 3, 3], 4);
    let mut group = c.benchmark_group("conv2d_16x64x64");
    group.sample_size(20);
    for (label, par) in modes() {
        group.bench_function(label, |bench| {
            set_parallel(par);
            bench.iter(|| {
                let mut g = Graph::new();
                let vx = g.constant(x.clone());
                let vw = g.constant(w.clone());
                black_box(g.conv2d(vx, vw, None, 1, 1).unwrap());
            });
        });
    }
    group.finish();
    set_parallel(true);
}

fn bench_attention_head(c: &mut Criterion) {
    let t_level = filled(&[64, 64], 5);
    let t_all = filled(&[64, 120], 6);
    let w_q = filled(&[64, 64], 7);
    let w_k = filled(&[120, 120], 8);
    let w_v = filled(&[120, 120], 9);
    let mut group = c.benchmark_group("cross_attention_head_d64");
    for (label, par) in modes() {
        group.bench_function(label, |bench| {
            set_parallel(par);
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let ti = g.constant(t_level.clone());
                let ta = g.constant(t_all.clone());
                let wq = g.constant(w_q.clone());
                let wk = g.constant(w_k.clone());
                let wv = g.constant(w_v.clone());
                black_box(cct::cross_attention_head(&mut g, ti, ta, wq, wk, wv).unwrap());
            });
        });
    }
    group.finish();
    set_parallel(true);
}

fn bench_model_step(c: &mut Criterion) {
    let cfg = ModelConfig {
        mode: Mode::UcTransNet,
        base_channels: 4,
        heads: 2,
        cct_layers: 2,
        ..Default::default()
    };
    let params = init_params::<f32>(&cfg, 32, 32, 1).unwrap();
    let image = filled(&[1, 32, 32], 10);
    let mask: Vec<u8> = (0..1024).map(|i| ((i / 32) % 2) as u8).collect();

    let mut group = c.benchmark_group("model_forward_backward_32");
    group.sample_size(10);
    for (label, par) in modes() {
        group.bench_function(label, |bench| {
            set_parallel(par);
            bench.iter(|| {
                let mut g = Graph::new();
                let leaves = register_params(&mut g, &params, true);
                let out = forward(&mut g, &leaves, &cfg, &image, false).unwrap();
                let terms = combined_loss(&mut g, out.logits, &mask, 0.5, 0.5, false).unwrap();
                black_box(g.backward(terms.total).unwrap());
            });
        });
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, bench_matmul, bench_conv2d, bench_attention_head, bench_model_step);
criterion_main!(benches);
