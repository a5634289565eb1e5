use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use headbalance_core::{
    count_schemes, enumerate_schemes, generate_profile, select_best, sha_plan, simulate, AllocationConfig,
    EnumerationConfig, LatencyModel, SimulationConfig, SyntheticSpec, WeightDistribution,
};
use std::hint::black_box;

fn zipf_profile(layers: usize, heads: usize) -> headbalance_core::ModelProfile {
    let spec = SyntheticSpec {
        distribution: WeightDistribution::Zipf { s: 1.2 },
        total_budget_per_layer: heads as f64 * 128.0,
        seed: 2024,
    };
    generate_profile(&spec, layers, heads).expect("valid spec")
}

fn enumeration(c: &mut Criterion) {
    let mut group = c.benchmark_group("enumerate");
    for (n, ch) in [(8, 2), (16, 4), (32, 4)] {
        let cfg = EnumerationConfig::new(ch, 2).divisible_by(4);
        group.bench_with_input(BenchmarkId::new("schemes", format!("n{n}_ch{ch}")), &cfg, |b, cfg| {
            b.iter(|| enumerate_schemes(black_box(n), cfg).unwrap().len())
        });
        group.bench_with_input(BenchmarkId::new("count", format!("n{n}_ch{ch}")), &cfg, |b, cfg| {
            b.iter(|| count_schemes(black_box(n), cfg))
        });
    }
    group.finish();
}

fn search(c: &mut Criterion) {
    let profile = zipf_profile(1, 16);
    let weights = profile.layer(0).to_vec();
    let mut group = c.benchmark_group("select_best");
    group.sample_size(10);
    for (tp, ch) in [(2, 0), (2, 2), (4, 0), (4, 4)] {
        let cfg = AllocationConfig::new(ch, 2);
        group.bench_function(format!("n16_tp{tp}_ch{ch}"), |b| {
            b.iter(|| select_best(black_box(&weights), tp, &cfg).unwrap())
        });
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let profile = zipf_profile(80, 64);
    let model = LatencyModel::compute(1e-4, 1e-6, 1e-7, 1e-8).with_comm(5e-6, 1e-10, 8192.0);
    let mut group = c.benchmark_group("simulate");
    for tp in [2usize, 8] {
        let plan = sha_plan(&profile, tp).unwrap();
        let cfg = SimulationConfig::new(16, 256, tp);
        group.bench_function(format!("l80_h64_tp{tp}"), |b| {
            b.iter(|| simulate(black_box(&profile), &plan, &model, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, enumeration, search, simulation);
criterion_main!(benches);
