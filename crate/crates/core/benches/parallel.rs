//! Sequential against rayon execution on the three hot loops: frame
//! generation, a fixed-seed evaluation pass and one pre-training epoch.

use std::hint::black_box;

use bevalign::config::{micro_manifest, RunConfig};
use bevalign::data::{generate_in_memory, SceneSample};
use bevalign::encoders::Model;
use bevalign::training::{evaluate, pretrain, TrainConfig};
use bevalign::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn samples() -> (RunConfig, Vec<SceneSample>) {
    let cfg = RunConfig::micro();
    let mut m = micro_manifest();
    m.scene.camera = cfg.model.camera.clone();
    let mut all = Vec::new();
    for d in &mut m.datasets {
        d.frame_count = 16;
        all.extend(generate_in_memory(d, &m.scene, Exec::Parallel).unwrap());
    }
    (cfg, all)
}

fn generation(c: &mut Criterion) {
    let m = micro_manifest();
    let mut g = c.benchmark_group("generate_16_frames");
    for (name, exec) in MODES {
        let mut d = m.datasets[0].clone();
        d.frame_count = 16;
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_in_memory(black_box(&d), &m.scene, exec).unwrap())
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let (cfg, all) = samples();
    let model = Model::new(&cfg.model).unwrap();
    let refs: Vec<&SceneSample> = all.iter().collect();
    let mut g = c.benchmark_group("evaluate_32_frames");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, black_box(&refs), &cfg.loss, 7, exec).unwrap())
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let (cfg, all) = samples();
    let mut m = micro_manifest();
    for d in &mut m.datasets {
        d.frame_count = 16;
    }
    let train = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        ..cfg.train.clone()
    };
    let mut g = c.benchmark_group("pretrain_epoch_32_frames");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || Model::new(&cfg.model).unwrap(),
                |mut model| {
                    pretrain(&mut model, &all, &m.datasets, &train, &cfg.loss, exec).unwrap()
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, generation, evaluation, training);
criterion_main!(benches);
