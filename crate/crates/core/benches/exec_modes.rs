//! Sequential vs data-parallel execution on the same synthetic scene. Both
//! modes produce identical output; only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use trafficsim::egat::{ModelConfig, ModelParams};
use trafficsim::graph::GraphConfig;
use trafficsim::metrics::road_aggregates;
use trafficsim::rulebase::RuleConfig;
use trafficsim::sim::{run, Policy, SimConfig, SimulationState};
use trafficsim::synth::{generate, SynthConfig};
use trafficsim::Exec;

use rand::SeedableRng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn scene() -> trafficsim::synth::Synthetic {
    let cfg = SynthConfig {
        duration: 120.0,
        demand: 0.1,
        ..SynthConfig::default()
    };
    generate(&cfg, &RuleConfig::default(), Exec::Parallel).expect("synthetic scene")
}

fn bench(c: &mut Criterion) {
    let s = scene();
    let graph = GraphConfig::default();
    let params = ModelParams::init(
        ModelConfig::for_graph(&graph, 16, 2),
        &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
    );
    let start = s.dataset.step_range().expect("non-empty").0;

    let mut g = c.benchmark_group("egat_rollout_10_steps");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let mut st = SimulationState::from_dataset(&s.dataset, start);
                let policy = Policy::Egat {
                    params: &params,
                    graph: &graph,
                };
                run(&mut st, &policy, &s.net, &s.signals, 10, &SimConfig::default(), exec).unwrap()
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("road_aggregates");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| road_aggregates(&s.rows, &s.net, 0.4, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
