//! Compares the rayon data-parallel batch runner against the always-compiled
//! sequential fallback on the bundled scenario corpus.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use clinic_core::engine::{Engine, LoopConfig};
use clinic_core::env::EnvBackend;
use clinic_core::policy::{demo_doctor_for, DoctorBackend};
use clinic_core::runner::{run_batch_parallel, run_batch_sequential};
use clinic_core::scenario::{load_scenarios, Scenario};
use clinic_core::testing::scenarios_path;

fn episode(scenario: &Scenario) -> u32 {
    let doctor = DoctorBackend::Scripted(demo_doctor_for(scenario));
    let env = EnvBackend::Scripted;
    let engine = Engine::new(LoopConfig::default(), &doctor, &env);
    let episode = engine
        .run_episode(scenario, &mut |_| {})
        .expect("scripted run cannot fail");
    episode.trials.iter().map(|t| t.transcript.step_index()).sum()
}

fn bench_batch(c: &mut Criterion) {
    let scenarios = load_scenarios(&scenarios_path()).expect("bundled scenario file loads");
    // Repeat the corpus so each batch is large enough for the pool to matter.
    let workload: Vec<Scenario> = scenarios
        .iter()
        .cycle()
        .take(scenarios.len() * 8)
        .cloned()
        .collect();

    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| run_batch_sequential(&workload, episode))
    });
    for threads in [2usize, 4] {
        group.bench_with_input(
            BenchmarkId::new("parallel", threads),
            &threads,
            |b, &threads| b.iter(|| run_batch_parallel(&workload, threads, episode)),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_batch);
criterion_main!(benches);
