use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lintransfer::attention::{linear_attention, orthogonal_hedgehog, softmax_attention, SimilarityScale};
use lintransfer::eval::sliced_wasserstein2;
use lintransfer::flow::VelocityField;
use lintransfer::model::{LayerKind, ModelConfig, ToyTransformer};
use lintransfer::parallel::set_parallel;
use lintransfer::DenseArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn attention(c: &mut Criterion) {
    let d = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = orthogonal_hedgehog::<f32, _>(d, 1.0, &mut rng).unwrap();
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for n in [512, 2048] {
        let q = DenseArray::<f32>::randn(&[n, d], 1.0, &mut rng);
        let k = DenseArray::<f32>::randn(&[n, d], 1.0, &mut rng);
        let v = DenseArray::<f32>::randn(&[n, d], 1.0, &mut rng);
        for (mode, on) in MODES {
            set_parallel(on);
            group.bench_with_input(BenchmarkId::new(format!("softmax/{mode}"), n), &n, |b, _| {
                b.iter(|| softmax_attention(&q, &k, &v, SimilarityScale::SqrtDim).unwrap())
            });
            group.bench_with_input(BenchmarkId::new(format!("linear/{mode}"), n), &n, |b, _| {
                b.iter(|| linear_attention(&q, &k, &v, &h, &h).unwrap())
            });
        }
    }
    set_parallel(true);
    group.finish();
}

fn model_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ToyTransformer::<f32>::new(&ModelConfig::default(), &[LayerKind::Mixed; 8], &mut rng).unwrap();
    let x = DenseArray::<f32>::randn(&[64, 16, 2], 1.0, &mut rng);
    let t = vec![0.5f32; 64];
    let mut group = c.benchmark_group("model_forward");
    group.sample_size(10);
    for (mode, on) in MODES {
        set_parallel(on);
        group.bench_function(mode, |b| b.iter(|| model.velocity(&x, &t).unwrap()));
    }
    set_parallel(true);
    group.finish();
}

fn sliced_w2(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = DenseArray::<f32>::randn(&[512, 32], 1.0, &mut rng);
    let b = DenseArray::<f32>::randn(&[512, 32], 1.5, &mut rng);
    let mut group = c.benchmark_group("sliced_w2");
    group.sample_size(10);
    for (mode, on) in MODES {
        set_parallel(on);
        group.bench_function(mode, |bench| bench.iter(|| sliced_wasserstein2(&a, &b, 128, 0).unwrap()));
    }
    set_parallel(true);
    group.finish();
}

criterion_group!(benches, attention, model_forward, sliced_w2);
criterion_main!(benches);
