use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use snell_core::generate::InstanceGenerator;
use snell_core::lattice::{GridSpec, Lattice, NodeId};
use snell_core::rbsde::solve_rbsde;
use snell_core::stopping::oracle_at_node;

fn bench_projection(c: &mut Criterion) {
    let lat =
        Lattice::build(GridSpec { num_steps: 4, horizon: 1.0, intensity: 0.5 }).unwrap();
    let next = [0.7, -1.3, 0.45, 2.1];
    c.bench_function("project_increment", |b| {
        b.iter(|| lat.project_increment(black_box(&next)))
    });
}

fn bench_solve_rbsde(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_rbsde");
    group.sample_size(20);
    for k in [4usize, 6, 8] {
        let mut gen = InstanceGenerator::new(7);
        let grid = gen.grid(k);
        let lat = Lattice::build(grid).unwrap();
        let obstacle = gen.obstacle(&lat);
        let driver = gen.driver(grid.intensity, false);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| solve_rbsde(&lat, black_box(&obstacle), &driver).unwrap())
        });
    }
    group.finish();
}

fn bench_oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle_root");
    group.sample_size(10);
    for k in [2usize, 3] {
        let mut gen = InstanceGenerator::new(11);
        let grid = gen.grid(k);
        let lat = Lattice::build(grid).unwrap();
        let obstacle = gen.obstacle(&lat);
        let driver = gen.driver(grid.intensity, true);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| {
                oracle_at_node(&lat, black_box(&obstacle), &driver, NodeId::root(), 3).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_projection, bench_solve_rbsde, bench_oracle);
criterion_main!(benches);
