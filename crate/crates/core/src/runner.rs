//! Batch execution over scenario lists.
//!
//! The data-parallel path runs scenarios on a bounded rayon pool and is
//! compiled behind the `parallel` feature (on by default). The sequential
//! path is always compiled and produces results in the same order, so the
//! two are interchangeable and comparable under the bench suite. Output
//! order always matches input order regardless of scheduling.

use crate::engine::{Engine, EngineError, EpisodeResult, LoopConfig};
use crate::env::EnvBackend;
use crate::policy::DoctorBackend;
use crate::scenario::Scenario;

/// Run `run_one` over every scenario in order, on the current thread.
pub fn run_batch_sequential<T, F>(scenarios: &[Scenario], run_one: F) -> Vec<T>
where
    F: Fn(&Scenario) -> T,
{
    scenarios.iter().map(run_one).collect()
}

/// Run `run_one` over every scenario on a rayon pool bounded to
/// `parallelism` worker threads, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn run_batch_parallel<T, F>(scenarios: &[Scenario], parallelism: usize, run_one: F) -> Vec<T>
where
    F: Fn(&Scenario) -> T + Sync + Send,
    T: Send,
{
    use rayon::prelude::*;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("building a local rayon pool");
    pool.install(|| scenarios.par_iter().map(run_one).collect())
}

/// Run a batch with up to `parallelism` workers when the `parallel` feature
/// is enabled, falling back to the sequential path for `parallelism <= 1`
/// or when the feature is off.
pub fn run_batch<T, F>(scenarios: &[Scenario], parallelism: usize, run_one: F) -> Vec<T>
where
    F: Fn(&Scenario) -> T + Sync + Send,
    T: Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallelism > 1 {
            return run_batch_parallel(scenarios, parallelism, run_one);
        }
    }
    run_batch_sequential(scenarios, run_one)
}

/// Run one engine episode per scenario with no progress sink, building a
/// fresh doctor per scenario via `doctor_for`. Convenience wrapper used by
/// benches and determinism checks; callers that need transcripts pass their
/// own closure to [`run_batch`].
pub fn run_episodes<D>(
    config: LoopConfig,
    env: &EnvBackend,
    scenarios: &[Scenario],
    doctor_for: D,
    parallelism: usize,
) -> Vec<Result<EpisodeResult, EngineError>>
where
    D: Fn(&Scenario) -> DoctorBackend + Sync,
{
    run_batch(scenarios, parallelism, |scenario| {
        let doctor = doctor_for(scenario);
        let engine = Engine::new(config, &doctor, env);
        engine.run_episode(scenario, &mut |_event| {})
    })
}
