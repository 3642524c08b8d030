use criterion::{criterion_group, criterion_main, Criterion};

use supernet_bench::{batch, toy_space};
use supernet_core::calibrate;
use supernet_core::searchspace::biggest_config;
use supernet_core::tensor::OptimizerState;
use supernet_core::trainer::sandwich_step;
use supernet_core::{init_supernet, TrainConfig};

fn sandwich(c: &mut Criterion) {
    let space = toy_space();
    let cfg = TrainConfig { batch_size: 64, lr_initial: 0.004, ..TrainConfig::default() };
    let schedule = cfg.schedule(10, 300);
    let data = batch(64, 32, space.num_classes, 7);
    let mut params = init_supernet(&space, 0).unwrap();
    let mut opt = OptimizerState::new(&params.tensors);
    let mut step = 0;
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("sandwich_step/toy/batch64", |b| {
        b.iter(|| {
            sandwich_step(&space, &mut params, &mut opt, &data, step, &cfg, &schedule).unwrap();
            step += 1;
        })
    });
    let params = init_supernet(&space, 0).unwrap();
    let calib: Vec<_> = (0..4).map(|s| batch(64, 32, space.num_classes, s)).collect();
    let big = biggest_config(&space);
    g.bench_function("calibrate/toy/biggest/4x64", |b| {
        b.iter(|| calibrate(&space, &params, &big, &calib, calib.len(), "bench").unwrap())
    });
    g.finish();
}

criterion_group!(benches, sandwich);
criterion_main!(benches);
