use bwarea_tensor::nn::{causal_self_attention_block, init_block, Binder, BlockDims};
use bwarea_tensor::{kernels, set_reference_mode, ParamStore, Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_nn");
    for &n in &[64usize, 128, 256] {
        let a: Vec<f32> = (0..n * n).map(|i| (i % 17) as f32 * 0.01).collect();
        let b: Vec<f32> = (0..n * n).map(|i| (i % 13) as f32 * 0.01).collect();
        for (label, reference) in modes() {
            g.bench_with_input(BenchmarkId::new(label, n), &n, |bch, &n| {
                set_reference_mode(reference);
                bch.iter(|| {
                    let mut out = vec![0.0f32; n * n];
                    kernels::matmul_nn_acc(black_box(&a), black_box(&b), &mut out, n, n, n);
                    out
                });
            });
        }
    }
    set_reference_mode(false);
    g.finish();
}

fn bench_block(c: &mut Criterion) {
    let dims = BlockDims {
        d_model: 128,
        n_heads: 4,
        ffn_hidden: 256,
        max_context: 128,
    };
    let mut store = ParamStore::<f32>::new();
    let mut k = 0u64;
    let mut normal = || {
        k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((k >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    init_block(&mut store, "b", dims, &mut normal);
    let x = Tensor::<f32>::from_fn(&[4 * 64, 128], |i| ((i % 29) as f32 - 14.0) * 0.05);

    let mut g = c.benchmark_group("block_forward_backward");
    g.sample_size(20);
    for (label, reference) in modes() {
        g.bench_function(label, |bch| {
            set_reference_mode(reference);
            bch.iter(|| {
                let mut t = Tape::new();
                let p = Binder::new(&store, true);
                let v = t.constant(x.clone());
                let y = causal_self_attention_block(&mut t, &p, "b", dims, v, 4, 64).unwrap();
                let s = t.sum_squares(y);
                t.backward(s).unwrap();
                t.named_grads()
            });
        });
    }
    set_reference_mode(false);
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_block);
criterion_main!(benches);
