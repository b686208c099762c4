use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion as Bench};
use panelmi::analysis::{fit_each, UNIT_MODEL};
use panelmi::catalog::{run_recipe, ImputeOptions, Recipe};
use panelmi::exec::Execution;
use panelmi::fitters::{parse_formula, Criterion};
use panelmi::simulator::{reshape_map, simulate, SimConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn cohort() -> panelmi::data::Dataset {
    let cfg = SimConfig {
        n_students: 300,
        n_schools: 10,
        ..SimConfig::default()
    };
    simulate(&cfg).expect("simulation").observed
}

fn imputation(c: &mut Bench) {
    let d = cohort();
    let opts = ImputeOptions {
        m: 8,
        maxit: 5,
        ..ImputeOptions::default()
    };
    let mut g = c.benchmark_group("fcs-1l-wide chains");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_recipe(Recipe::Fcs1lWide, &d, &reshape_map(), &opts, 1, mode).unwrap())
        });
    }
    g.finish();
}

fn analysis(c: &mut Bench) {
    let d = cohort();
    let opts = ImputeOptions {
        m: 8,
        maxit: 3,
        ..ImputeOptions::default()
    };
    let stack = run_recipe(Recipe::Fcs1lWide, &d, &reshape_map(), &opts, 1, Execution::Parallel)
        .unwrap()
        .stack;
    let f = parse_formula(UNIT_MODEL).unwrap();
    let mut g = c.benchmark_group("per-imputation fits");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_each(&stack.imputations, &f, Criterion::Reml, mode).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, imputation, analysis);
criterion_main!(benches);
