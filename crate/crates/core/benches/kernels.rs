//! Hot kernels on the rayon pool against a single worker.
//!
//! Built without the `parallel` feature every helper runs inline, so only
//! the `sequential` variant is reported.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use floodsr::numerics::kernels::{conv2d_forward, group_norm_forward, ConvGeom};
use floodsr::numerics::Tensor;
use floodsr::terrain::{generate_dem, simulate_flood, Boundary, RainEvent};
use floodsr::unet::{Unet, UnetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Runs `f` under each available execution mode.
fn modes(c: &mut Criterion, group: &str, mut f: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(|| single.install(&mut f)));
        let label = format!("parallel-{}", rayon::current_num_threads());
        g.bench_function(BenchmarkId::from_parameter(label), |b| b.iter(&mut f));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(&mut f));
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(vec![8, 32, 32, 32], &mut rng);
    let w = Tensor::<f32>::randn(vec![32, 32, 3, 3], &mut rng);
    let g = ConvGeom::new(x.shape(), w.shape(), 1, 1).unwrap();
    modes(c, "conv2d 8x32x32x32 k3", || {
        std::hint::black_box(conv2d_forward(x.data(), w.data(), &g));
    });
}

fn norm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(vec![8, 64, 32, 32], &mut rng);
    let gamma = vec![1.0f32; 64];
    let beta = vec![0.0f32; 64];
    modes(c, "group_norm 8x64x32x32", || {
        std::hint::black_box(group_norm_forward(x.data(), &gamma, &beta, 8, 64, 32 * 32, 8));
    });
}

fn unet(c: &mut Criterion) {
    let cfg = UnetConfig {
        in_channels: 3,
        out_channels: 1,
        base_width: 16,
        depth: 3,
        attn_levels: vec![2],
        time_embed_dim: 64,
        norm_groups: 8,
    };
    let net = Unet::<f32>::build(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(vec![8, 1, 32, 32], &mut rng);
    let cond = Tensor::randn(vec![8, 2, 32, 32], &mut rng);
    let t = [10usize, 20, 30, 40, 50, 60, 70, 80];
    modes(c, "unet predict batch 8 at 32x32", || {
        std::hint::black_box(net.predict(&x, &cond, &t).unwrap());
    });
    modes(c, "unet loss and grads batch 8 at 32x32", || {
        std::hint::black_box(net.loss_and_grads(&x, &cond, &t, &x, false).unwrap());
    });
}

fn flood(c: &mut Criterion) {
    let dem = generate_dem(3, 128, 0.55, 12.0).unwrap();
    let rain = RainEvent::new(vec![2.0, 1.0, 0.0, 0.0]).unwrap();
    modes(c, "flood event 128x128", || {
        std::hint::black_box(simulate_flood(&dem, &rain, 40, Boundary::Open).unwrap());
    });
}

criterion_group!(benches, conv, norm, unet, flood);
criterion_main!(benches);
