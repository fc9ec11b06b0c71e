use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dualkf::objective::duality_check;
use dualkf::sysmodel::Simulator;
use dualkf::{initial_gain, mass_spring_model, minibatch_gradient, Exec, Trajectory, Vector};

fn minibatch(c: &mut Criterion) {
    let model = mass_spring_model(0.1, 1.0, 0.1, 0.1, 0.05).unwrap();
    let public = model.public();
    let gain = initial_gain(&public).unwrap();
    let sim = Simulator::new(&model).unwrap();
    let mut group = c.benchmark_group("minibatch_gradient");
    for &m in &[16usize, 64, 256] {
        let batch: Vec<Trajectory> = (0..m).map(|i| sim.run(50, 60, i as u64, false).unwrap()).collect();
        for (label, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, m), &batch, |b, batch| {
                b.iter(|| minibatch_gradient(&public, &gain, batch, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn duality(c: &mut Criterion) {
    let model = mass_spring_model(0.1, 1.0, 0.1, 0.1, 0.05).unwrap();
    let gain = initial_gain(&model.public()).unwrap();
    let a = Vector::from_column_slice(&[1.0, 0.0]);
    let mut group = c.benchmark_group("duality_monte_carlo");
    group.sample_size(10);
    for (label, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_function(label, |b| b.iter(|| duality_check(&model, &gain, &a, 20, 2000, 7, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, minibatch, duality);
criterion_main!(benches);
