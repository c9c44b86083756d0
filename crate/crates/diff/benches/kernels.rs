use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sonovis_diff::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use sonovis_diff::{par, AdamConfig, AdamState, Ctx, LayerSpec, Mode, Network, ParamStore, Tensor};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn conv_kernels(c: &mut Criterion) {
    let g = ConvGeom::new(32, 32, 32, 4, 2, 1).unwrap();
    let n = 16;
    let x: Vec<f32> = (0..n * 32 * 32 * 32).map(|i| ((i % 97) as f32) * 0.01).collect();
    let w: Vec<f32> = (0..64 * g.col_rows()).map(|i| ((i % 13) as f32) * 0.01).collect();
    let gout = vec![0.5f32; n * 64 * g.col_cols()];
    let mut group = c.benchmark_group("conv2d_32to64_s2_batch16");
    for (name, on) in modes() {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| conv2d_forward(&x, n, &g, &w, 64, None))
        });
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| conv2d_backward(&x, n, &g, &w, 64, &gout, true))
        });
    }
    par::set_parallel(true);
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let specs = vec![
        LayerSpec::conv(1, 32, 4, 2),
        LayerSpec::Relu,
        LayerSpec::conv(32, 64, 4, 2),
        LayerSpec::Relu,
        LayerSpec::Residual { channels: 64 },
        LayerSpec::upconv(64, 32),
        LayerSpec::Relu,
        LayerSpec::upconv(32, 1),
        LayerSpec::Sigmoid,
    ];
    let net = Network::build("ae", specs, &mut store, &mut rng).unwrap();
    let x = Tensor::from_fn(&[16, 1, 64, 64], |i| ((i % 89) as f32) / 89.0);
    let mut group = c.benchmark_group("autoencoder_step_64px_batch16");
    group.sample_size(10);
    for (name, on) in modes() {
        par::set_parallel(on);
        group.bench_function(name, |b| {
            let mut s = store.clone();
            let mut adam = AdamState::new(AdamConfig::default(), &s);
            b.iter(|| {
                let (grads, updates) = {
                    let mut ctx = Ctx::new(&s, Mode::Train, 0);
                    let xv = ctx.input(x.clone(), false);
                    let y = net.forward(&mut ctx, xv).unwrap();
                    let l = ctx.tape.mse(y, xv).unwrap();
                    ctx.backward(l).unwrap();
                    (ctx.param_grads(), ctx.take_buffer_updates())
                };
                s.apply_buffer_updates(updates).unwrap();
                adam.step(&mut s, &grads).unwrap();
            })
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, conv_kernels, train_step);
criterion_main!(benches);
