use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use tsvdnet_bench::{small_matrix, small_problem};
use tsvdnet_core::dataset::build_dataset;
use tsvdnet_core::network::{network_forward, pairs_loss_and_gradient, training_pairs};
use tsvdnet_core::oracle::{oracle_apply, FdConfig};
use tsvdnet_core::phantom::generate_phantom;
use tsvdnet_core::regularization::tsvd_apply;
use tsvdnet_core::svd::{svd_factorize, DEFAULT_RANK_CUTOFF};
use tsvdnet_core::system_matrix::{assemble_system_matrix, AssemblyOptions, ProfileTable};
use tsvdnet_core::{Architecture, NetworkParams, Role, SvdBackend, TruncationPolicy};

fn forward_model(c: &mut Criterion) {
    let (grid, geom) = small_problem();
    let opts = AssemblyOptions::default();
    let mut g = c.benchmark_group("forward_model");
    g.sample_size(10);
    g.bench_function("profile_table", |b| {
        b.iter(|| ProfileTable::build(black_box(&grid), &geom, &opts).unwrap())
    });
    g.bench_function("assemble", |b| {
        b.iter(|| assemble_system_matrix(black_box(&grid), &geom, &opts).unwrap())
    });
    g.finish();
}

fn factorization(c: &mut Criterion) {
    let a = small_matrix();
    let mut g = c.benchmark_group("svd");
    g.sample_size(10);
    g.bench_function("deterministic", |b| {
        b.iter(|| svd_factorize(black_box(&a), DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap())
    });
    g.bench_function("randomized_rank_64", |b| {
        b.iter(|| svd_factorize(black_box(&a), DEFAULT_RANK_CUTOFF, SvdBackend::randomized(64, 7)).unwrap())
    });
    let f = svd_factorize(&a, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
    let policy = TruncationPolicy::from_kept(&f, f.rank() / 2).unwrap();
    let data = build_dataset(1, &a.meta.grid, &a, 0.05, Role::Test, 3).unwrap();
    g.bench_function("tsvd_apply", |b| {
        b.iter(|| tsvd_apply(&f, &policy, black_box(&data.samples[0].y)).unwrap())
    });
    g.finish();
}

fn network(c: &mut Criterion) {
    let (grid, _) = small_problem();
    let a = small_matrix();
    let f = svd_factorize(&a, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
    let policy = TruncationPolicy::from_kept(&f, f.rank() / 2).unwrap();
    let params = NetworkParams::init(Architecture::unet(grid.side), 5).unwrap();
    let z = generate_phantom(11, &grid);
    let data = build_dataset(8, &grid, &a, 0.0, Role::Train, 4).unwrap();
    let pairs = training_pairs(&f, &policy, &data.samples).unwrap();
    let mut g = c.benchmark_group("network");
    g.bench_function("forward", |b| b.iter(|| network_forward(&params, black_box(&z)).unwrap()));
    g.bench_function("batch_gradient_8", |b| {
        b.iter(|| pairs_loss_and_gradient(&params, &f, &policy, black_box(&pairs), false).unwrap())
    });
    g.finish();
}

fn fd_oracle(c: &mut Criterion) {
    let (grid, geom) = small_problem();
    let cfg = FdConfig::for_geometry(0.04, &geom, 1.0 + grid.kb.support_radius);
    let x = generate_phantom(2, &grid);
    let mut g = c.benchmark_group("fd_oracle");
    g.sample_size(10);
    g.bench_function("solve_h_0.04", |b| {
        b.iter(|| oracle_apply(black_box(&x), &grid, &geom, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, forward_model, factorization, network, fd_oracle);
criterion_main!(benches);
