use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use forgeseg_core::config::RunConfig;
use forgeseg_core::exec::{self, Mode};
use forgeseg_core::forge::generate_sample;
use forgeseg_core::model::Model;
use forgeseg_core::objective::{loss_and_grad, Objective, TrainSample};

fn desk_batch(n: usize) -> (RunConfig, Vec<TrainSample<f32>>) {
    let config = RunConfig::default();
    let batch = (0..n)
        .map(|i| {
            let s = generate_sample(&config.data, 1, i).unwrap();
            TrainSample { image: s.image.to_tensor(), mask: s.mask.as_f32(), label: f32::from(s.label) }
        })
        .collect();
    (config, batch)
}

fn modes() -> [(&'static str, Mode); 2] {
    [("parallel", Mode::Parallel), ("sequential", Mode::Sequential)]
}

fn training_step(c: &mut Criterion) {
    let (config, batch) = desk_batch(16);
    let model = Model::<f32>::build(config.model.clone(), 1).unwrap();
    let objective = Objective::joint();
    let mut group = c.benchmark_group("loss_and_grad_batch16");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| loss_and_grad(&model, &batch, &objective).unwrap());
        });
    }
    group.finish();
    exec::set_mode(Mode::Parallel);
}

fn forward(c: &mut Criterion) {
    let (config, batch) = desk_batch(32);
    let model = Model::<f32>::build(config.model.clone(), 1).unwrap();
    let images: Vec<_> = batch.into_iter().map(|s| s.image).collect();
    let mut group = c.benchmark_group("forward_batch32");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| model.forward(&images).unwrap());
        });
    }
    group.finish();
    exec::set_mode(Mode::Parallel);
}

criterion_group!(benches, training_step, forward);
criterion_main!(benches);
