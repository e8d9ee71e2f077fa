use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nowcast_core::tensor::{conv2d_valid, conv2d_valid_backward};
use nowcast_core::trainer::allreduce_average;
use nowcast_core::{build_model, GradientSet, ModelConfig, Tensor};

fn pseudo(shape: &[usize], salt: u64) -> Tensor {
    Tensor::from_fn(shape, |i| {
        let v = (i as u64 ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40;
        v as f64 / (1u64 << 24) as f64 - 0.5
    })
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for &(cin, cout) in &[(7, 16), (16, 32), (32, 32)] {
        let x = pseudo(&[4, 64, 64, cin], 1);
        let w = pseudo(&[3, 3, cin, cout], 2);
        let out = conv2d_valid(&x, &w, None, 1).unwrap();
        let gy = pseudo(out.shape(), 3);
        let id = format!("{cin}x{cout}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| conv2d_valid(black_box(&x), black_box(&w), None, 1).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward", &id), &(), |b, _| {
            b.iter(|| conv2d_valid_backward(black_box(&x), black_box(&w), black_box(&gy), 1, true).unwrap())
        });
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::tiny().with_patch(64);
    let (model, params) = build_model(&cfg, 0).unwrap();
    let x = pseudo(&[8, 64, 64, 7], 4);
    let y = pseudo(&[8, 64, 64, 6], 5);
    let mut g = c.benchmark_group("tiny_model_batch8");
    g.sample_size(20);
    g.bench_function("forward", |b| b.iter(|| model.forward_final(&params, black_box(&x)).unwrap()));
    g.bench_function("loss_and_grad", |b| b.iter(|| model.loss_and_grad(&params, black_box(&x), black_box(&y)).unwrap()));
    g.finish();
}

fn allreduce(c: &mut Criterion) {
    let cfg = ModelConfig::tiny().with_patch(64);
    let (model, params) = build_model(&cfg, 0).unwrap();
    let x = pseudo(&[1, 64, 64, 7], 6);
    let y = pseudo(&[1, 64, 64, 6], 7);
    let (_, grad) = model.loss_and_grad(&params, &x, &y).unwrap();
    for workers in [2usize, 4, 8] {
        let sums: Vec<GradientSet> = vec![grad.clone(); workers];
        let sizes = vec![8; workers];
        c.bench_function(&format!("allreduce_average/{workers}"), |b| {
            b.iter(|| allreduce_average(black_box(&sums), &sizes, 8, workers).unwrap())
        });
    }
}

criterion_group!(benches, conv, model, allreduce);
criterion_main!(benches);
