//! Monte-Carlo margin evaluation on the reference feeder, run through the
//! rayon pool and sequentially. Build with `--no-default-features` to time
//! the fallback with rayon compiled out.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gridcc::exec::Execution;
use gridcc::opf::{inner_feasibility_loop, ProductKind};
use gridcc::powerflow::{solve_bfs, InjectionProfile, PfSettings};
use gridcc::reference::{self, reference_data, SUMMER_WEEK};
use gridcc::solver::ClarabelSolver;
use gridcc::uncertainty::{evaluate_margins, pv_forecast, sample_scenarios, McSettings, UncertaintyMargins};

fn margins(c: &mut Criterion) {
    let data = reference_data();
    let mut s = reference::scenario(&data, ProductKind::None, SUMMER_WEEK, SUMMER_WEEK + 1).unwrap();
    s.settings.islanding = false;
    let t = SUMMER_WEEK + 8;
    let mut state = s.initial_state();
    state.t = t;
    let input = s.horizon_input(t, &state).unwrap();
    let plan = inner_feasibility_loop(&input, &UncertaintyMargins::for_input(&input), &ClarabelSolver::default(), None)
        .unwrap()
        .plan;
    let (forecast, ratings) = pv_forecast(&input);

    let mut group = c.benchmark_group("margin_evaluation");
    group.sample_size(10);
    for n in [200, 1000] {
        for exec in [Execution::Parallel, Execution::Sequential] {
            let mc = McSettings {
                n_samples: n,
                exec,
                ..McSettings::default()
            };
            let scenarios = sample_scenarios(&s.error_model, &forecast, &ratings, input.horizon(), &mc).unwrap();
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), n), &scenarios, |b, sc| {
                b.iter(|| evaluate_margins(&input, &plan, sc, &mc).unwrap())
            });
        }
    }
    group.finish();
}

fn sweeps(c: &mut Criterion) {
    let g = reference::cigre_feeder();
    let n = g.n_buses();
    let profiles: Vec<InjectionProfile> = (0..256)
        .map(|i| {
            let mut inj = InjectionProfile::zeros(n);
            for k in 1..n {
                inj.p[k] = -0.01 * ((i + k) % 7) as f64;
            }
            inj
        })
        .collect();
    let mut group = c.benchmark_group("power_flow_batch");
    for exec in [Execution::Parallel, Execution::Sequential] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| exec.map(&profiles, |p| solve_bfs(&g, p, 0.0, &PfSettings::default()).unwrap().iterations))
        });
    }
    group.finish();
}

criterion_group!(benches, margins, sweeps);
criterion_main!(benches);
