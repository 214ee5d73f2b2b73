use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use vqvc_core::context::{wca_layer, ContextConfig, WcaWeights};
use vqvc_core::quantizer::{mcvq_quantize, Codebook};
use vqvc_core::tensor::{conv2d, ConvSpec};
use vqvc_core::{Linear, Numerics, Reduction, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0f32, 0.5).unwrap();
    Tensor::from_fn(shape, |_| n.sample(rng))
}

fn policies() -> [(&'static str, Numerics); 2] {
    [
        ("sequential", Numerics { reduction: Reduction::Sequential, parallel: false }),
        ("parallel", Numerics { reduction: Reduction::Sequential, parallel: true }),
    ]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ConvSpec::new(random(&[32, 32, 3, 3], &mut rng), random(&[32], &mut rng), 1, 1).unwrap();
    let x = random(&[32, 64, 64], &mut rng);
    let mut g = c.benchmark_group("conv2d_32x64x64");
    for (name, num) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| conv2d(black_box(&x), &spec, &num).unwrap())
        });
    }
    g.finish();
}

fn codebook_search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let books = [
        Codebook::new(random(&[2048, 32], &mut rng)).unwrap(),
        Codebook::new(random(&[2048, 32], &mut rng)).unwrap(),
    ];
    let z = random(&[64, 16, 16], &mut rng);
    let mut g = c.benchmark_group("codebook_search_k2048");
    for (name, num) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mcvq_quantize(black_box(&z), &books, num.parallel).unwrap())
        });
    }
    g.finish();
}

fn window_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ContextConfig { window: 4, padding: 2, heads: 8, head_dim: 16, repeats: 1 };
    let (ch, inner) = (64, cfg.inner_width());
    let mut lin = |i: usize, o: usize| Linear { weight: random(&[o, i], &mut rng), bias: random(&[o], &mut rng) };
    let w = WcaWeights { q: lin(ch, inner), k: lin(ch, inner), v: lin(ch, inner), o: lin(inner, ch) };
    let y = random(&[ch, 32, 32], &mut rng);
    let r = random(&[ch, 32, 32], &mut rng);
    let mut g = c.benchmark_group("window_attention_64x32x32");
    for (name, num) in policies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| wca_layer(black_box(&y), &r, &cfg, &w, &num).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, codebook_search, window_attention
}
criterion_main!(benches);
