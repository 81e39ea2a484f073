//! Sequential versus data-parallel execution of the three dataset-level
//! loops: pair generation, the training batch gradient, and ICP evaluation.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vrnet::data::{generate, DataConfig, PairMode, RegistrationPair, Role};
use vrnet::eval::run_icp;
use vrnet::exec::Exec;
use vrnet::icp::IcpOptions;
use vrnet::model::{Model, ModelConfig};
use vrnet::trainer::{batch_gradient, Stage, TrainConfig};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn config(mode: PairMode, base_n: usize) -> DataConfig {
    DataConfig {
        mode,
        base_n,
        keep_n: base_n * 3 / 4,
        pv_rs_intermediate: base_n * 7 / 8,
        ..DataConfig::default()
    }
}

fn bench_generate(c: &mut Criterion) {
    let cfg = config(PairMode::PV_RS, 1024);
    let mut g = c.benchmark_group("generate_16_pairs");
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate(black_box(&cfg), 1, Role::Train, 16, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_batch_gradient(c: &mut Criterion) {
    let pairs = generate(&config(PairMode::PV, 128), 2, Role::Train, 4, Exec::Sequential).unwrap().pairs;
    let batch: Vec<&RegistrationPair> = pairs.iter().collect();
    let model = Model::new(ModelConfig::desk(), 2).unwrap();
    let cfg = TrainConfig::default();
    let mut g = c.benchmark_group("batch_gradient_4_pairs");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::new("stage1", name), |b| {
            b.iter(|| batch_gradient(&model, black_box(&batch), Stage::One, &cfg, 0, exec).unwrap())
        });
        g.bench_function(BenchmarkId::new("stage2", name), |b| {
            b.iter(|| batch_gradient(&model, black_box(&batch), Stage::Two, &cfg, 0, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_icp(c: &mut Criterion) {
    let cfg = DataConfig {
        rot_range_deg: 10.0,
        trans_range: 0.1,
        ..config(PairMode::CO, 512)
    };
    let pairs = generate(&cfg, 3, Role::Test, 16, Exec::Sequential).unwrap().pairs;
    let opts = IcpOptions::default();
    let mut g = c.benchmark_group("icp_16_pairs");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_icp(black_box(&pairs), &opts, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_generate, bench_batch_gradient, bench_icp);
criterion_main!(benches);
