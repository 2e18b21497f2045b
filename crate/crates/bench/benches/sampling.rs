use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use ndpp_core::experiments::stream_rng;
use ndpp_core::samplers::{ChainConfig, Prepared, UpProposal, DEFAULT_MAX_REJECTS};
use ndpp_core::spectral::symmetrize_proposal;
use ndpp_core::{build_tree, mcmc_kndpp, synth_kernel};

const D: usize = 8;

fn tree_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("tree_build");
    group.sample_size(10);
    for n in [1_000, 10_000, 100_000] {
        let kernel = synth_kernel(n, D, 1).unwrap();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), kernel.x(), |b, x| {
            b.iter(|| build_tree(black_box(x), 8).unwrap())
        });
    }
    group.finish();
}

fn kdpp_traversal(c: &mut Criterion) {
    let mut group = c.benchmark_group("kdpp_traversal");
    for n in [1_000, 100_000] {
        let kernel = synth_kernel(n, D, 2).unwrap();
        let prep = Prepared::new(&kernel, Some(8)).unwrap();
        let proposal = prep
            .kdpp_proposal(&symmetrize_proposal(kernel.w()).unwrap())
            .unwrap();
        let mut rng = stream_rng(2, 0);
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| proposal.sample(&prep.tree, 2, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn up_operator(c: &mut Criterion) {
    let mut group = c.benchmark_group("up_operator");
    for n in [1_000, 100_000] {
        let kernel = synth_kernel(n, D, 3).unwrap();
        let prep = Prepared::new(&kernel, Some(8)).unwrap();
        let a = [0, 1, 2];
        let up = UpProposal::new(&kernel, &prep, &a).unwrap();
        let mut rng = stream_rng(3, 0);
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| {
                up.draw(&kernel, &prep.tree, &mut rng, DEFAULT_MAX_REJECTS)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn kndpp_chain(c: &mut Criterion) {
    let mut group = c.benchmark_group("kndpp_chain");
    group.sample_size(10);
    let kernel = synth_kernel(10_000, D, 4).unwrap();
    let prep = Prepared::new(&kernel, Some(8)).unwrap();
    for k in [2, 4, 6] {
        let cfg = ChainConfig::new(k);
        let mut rng = stream_rng(4, k as u64);
        group.bench_function(BenchmarkId::new("k", k), |b| {
            b.iter(|| mcmc_kndpp(&kernel, &prep, &cfg, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    tree_build,
    kdpp_traversal,
    up_operator,
    kndpp_chain
);
criterion_main!(benches);
