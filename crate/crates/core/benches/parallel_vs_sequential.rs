use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use tustin_sm::ident::{compute_puis, feasibility_oracle, IdentOptions};
use tustin_sm::lti::{dt_simulate_from_rest, tustin_map, ContinuousTf, Orders};
use tustin_sm::par::{self, ExecMode};
use tustin_sm::pop::PriorSpec;
use tustin_sm::signals::{generate_signal, Dataset, DeltaBoundSpec, SignalSpec};

fn dataset(n: usize) -> Dataset {
    let h = ContinuousTf::new(vec![2.0], vec![3.0]).unwrap();
    let u = generate_signal(&SignalSpec::multisine(30, 0.2, 3)).unwrap().sample(0.1, n);
    let y = dt_simulate_from_rest(&tustin_map(&h, 0.1).unwrap(), &u);
    let zeros = DMatrix::zeros(n, 1);
    let e = DMatrix::from_element(n, 1, 0.05);
    Dataset::new(0.1, DMatrix::from_vec(n, 1, u), DMatrix::from_vec(n, 1, y), (zeros.clone(), zeros), (-e.clone(), e)).unwrap()
}

fn bench(c: &mut Criterion) {
    let ds = dataset(15);
    let orders = Orders::siso(1).unwrap();
    let delta = DeltaBoundSpec::uniform(0.0);
    let priors = PriorSpec::default();
    let thetas: Vec<Vec<f64>> = (0..64).map(|i| vec![1.5 + 0.02 * i as f64, 3.0]).collect();

    let mut g = c.benchmark_group("puis");
    g.sample_size(10);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let opts = IdentOptions { mode, theta_e: false, ..Default::default() };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &opts, |b, o| {
            b.iter(|| compute_puis(&ds, &orders, &delta, &priors, o).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("oracle_batch");
    g.sample_size(10);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| par::map(mode, &thetas, |t| feasibility_oracle(&ds, &orders, &delta, &priors, t).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
