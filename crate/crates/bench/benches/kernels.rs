use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hscorr::correlations::equilibrium_sequence;
use hscorr::dynamics::flow_points;
use hscorr::kinetics::{dsmc_step, h_functional, HistogramSpec, MomentumEnsemble};
use hscorr::partitions::{exp_star, ln_star, partition_masks};
use hscorr::{Engine, FlowParams, PhasePoint};

fn cluster() -> Vec<PhasePoint> {
    vec![
        PhasePoint::new([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
        PhasePoint::new([1.0, 0.1, 0.0], [-1.0, 0.0, 0.0]),
        PhasePoint::new([0.0, 1.5, 0.2], [0.0, -1.0, 0.0]),
    ]
}

fn bench_flow(c: &mut Criterion) {
    let params = FlowParams::new(0.8);
    let start = cluster();
    c.bench_function("flow three spheres", |b| {
        b.iter_batched(
            || start.clone(),
            |mut pts| flow_points(&params, &mut pts, black_box(3.0)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_partitions(c: &mut Criterion) {
    c.bench_function("partition lattice m=8", |b| {
        b.iter(|| (1..=8).map(|m| partition_masks(black_box(m)).unwrap().len()).sum::<usize>())
    });
    let g = equilibrium_sequence(1.0, 5);
    let x: Vec<PhasePoint> = cluster().into_iter().chain(cluster().into_iter().take(2)).collect();
    c.bench_function("ln of exp at five points", |b| {
        b.iter(|| ln_star(&exp_star(&g).unwrap()).unwrap().eval(black_box(&x)).unwrap())
    });
}

fn bench_correlations(c: &mut Criterion) {
    let engine = Engine::new(0.8);
    let g0 = equilibrium_sequence(1.0, 3);
    let x = cluster();
    c.bench_function("evolve correlations s=3", |b| {
        b.iter(|| engine.evolve_correlations(black_box(1.5), &g0, &x).unwrap())
    });
}

fn bench_kinetics(c: &mut Criterion) {
    let ens = MomentumEnsemble::bimodal(10_000, 1.0, 0.5, 1.0, 1).unwrap();
    c.bench_function("dsmc step N=1e4", |b| b.iter(|| dsmc_step(&ens, black_box(0.004), 1.0, 1).unwrap()));
    let spec = HistogramSpec {
        bins_per_axis: 8,
        ..HistogramSpec::default()
    };
    c.bench_function("histogram H N=1e4", |b| b.iter(|| h_functional(black_box(&ens.momenta), &spec).unwrap()));
}

criterion_group!(benches, bench_flow, bench_partitions, bench_correlations, bench_kinetics);
criterion_main!(benches);
