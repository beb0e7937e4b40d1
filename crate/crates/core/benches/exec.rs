//! Sequential against rayon execution for the data-parallel stages.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use indoorworld::{house_set, house_set_with, sample_from_houses, Domain, Split};
use jrt::agent::AgentArch;
use jrt::evalkit::{evaluate_in, EpisodeSet};
use jrt::rl::{train_baseline, TrainConfig};
use nncore::Exec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn houses(c: &mut Criterion) {
    let mut g = c.benchmark_group("house_set");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(house_set_with(Domain::Real, Split::Train, 16, 3, exec).unwrap()))
        });
    }
    g.finish();
}

fn images(c: &mut Criterion) {
    let plans = house_set(Domain::Real, Split::Train, 4, 0).unwrap();
    let mut g = c.benchmark_group("sample_images");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(sample_from_houses(&plans, Domain::Real, 256, 9, exec)))
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let arch = AgentArch::default();
    let params = arch.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let plans = house_set(Domain::Synthetic, Split::Test, 4, 0).unwrap();
    let set = EpisodeSet::sample(&plans, 4, 60, 2).unwrap();
    let map = set.houses().unwrap();
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(evaluate_in(&params, &arch, &set, &map, 0, exec).unwrap()))
        });
    }
    g.finish();
}

fn rollouts(c: &mut Criterion) {
    let arch = AgentArch::default();
    let plans: Vec<_> = house_set(Domain::Synthetic, Split::Train, 4, 0).unwrap().into_iter().map(Arc::new).collect();
    let mut g = c.benchmark_group("train_2k_steps");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            steps: 2000,
            workers: 16,
            unroll: 5,
            eval_every: 0,
            exec,
            ..TrainConfig::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(train_baseline(&arch, &cfg, &plans, None).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, houses, images, evaluation, rollouts);
criterion_main!(benches);
