use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mte::estimators::SampleMoments;
use mte::numerics::RngState;
use mte::par;
use mte::propensity::{fit_with_constants, select_constants, BandwidthConstants, KernelConfig};
use mte::simulation::{dgp_generate, run_replication, DgpConfig, ExperimentConfig};
use mte::targets::{estimate_all, Estimand, TargetOptions};
use mte::MteModelSpec;

fn both<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    if parallel {
        f()
    } else {
        par::sequential(f)
    }
}

fn kernel_fit(c: &mut Criterion) {
    let (data, _) = dgp_generate(&DgpConfig::new(5000, 0.6, 1)).unwrap();
    let cfg = KernelConfig::for_sample_size(data.len());
    let consts = BandwidthConstants { continuous: vec![2.0], discrete: vec![0.5] };
    let mut g = c.benchmark_group("propensity_fit_n5000");
    for parallel in [true, false] {
        g.bench_with_input(BenchmarkId::from_parameter(label(parallel)), &parallel, |b, &p| {
            b.iter(|| both(p, || fit_with_constants(&data, &cfg, &consts).unwrap()))
        });
    }
    g.finish();
}

fn bandwidth_cv(c: &mut Criterion) {
    let (data, _) = dgp_generate(&DgpConfig::new(5000, 0.6, 2)).unwrap();
    let cfg = KernelConfig::for_sample_size(data.len());
    let mut g = c.benchmark_group("bandwidth_cv_3x1000");
    g.sample_size(10);
    for parallel in [true, false] {
        g.bench_with_input(BenchmarkId::from_parameter(label(parallel)), &parallel, |b, &p| {
            b.iter(|| both(p, || select_constants(&data, &cfg, &mut RngState::with_stream(2, 10)).unwrap()))
        });
    }
    g.finish();
}

fn moments_and_targets(c: &mut Criterion) {
    let cfg = DgpConfig::new(50_000, 0.6, 3);
    let (data, truth) = dgp_generate(&cfg).unwrap();
    let fit = mte::PropensityFit::from_known(&data, truth.pi).unwrap();
    let spec = MteModelSpec::new(2, true, 1).unwrap();
    let mut g = c.benchmark_group("moments_targets_n50000");
    for parallel in [true, false] {
        g.bench_with_input(BenchmarkId::from_parameter(label(parallel)), &parallel, |b, &p| {
            b.iter(|| {
                both(p, || {
                    let m = SampleMoments::new(&data, &fit, &spec).unwrap();
                    estimate_all(&m, &Estimand::ALL, TargetOptions::default()).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn replication_batch(c: &mut Criterion) {
    let exp = ExperimentConfig { n: 2000, reps: 8, known_propensity: true, ..ExperimentConfig::default() };
    let mut g = c.benchmark_group("replications_8x2000_known_pi");
    g.sample_size(10);
    for parallel in [true, false] {
        g.bench_with_input(BenchmarkId::from_parameter(label(parallel)), &parallel, |b, &p| {
            b.iter(|| {
                both(p, || par::map_collect(exp.reps, |r| run_replication(&exp, 0.6, r).unwrap().values.len()))
            })
        });
    }
    g.finish();
}

fn label(parallel: bool) -> &'static str {
    if parallel {
        "parallel"
    } else {
        "sequential"
    }
}

criterion_group!(benches, kernel_fit, bandwidth_cv, moments_and_targets, replication_batch);
criterion_main!(benches);
