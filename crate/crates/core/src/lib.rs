//! Clinic: a simulated clinical consultation engine.
//!
//! A doctor agent interviews a scripted (or LLM-backed) patient, orders tests
//! from a measurement agent, and submits a diagnosis that a moderator agent
//! grades against ground truth. Failed attempts produce a textual adaptation
//! that is carried into the next attempt's system preamble while the failed
//! dialogue itself is discarded, so retries start from a compressed context.
//!
//! Module map:
//! - [`state`]: dialogue states, actions, observations, returns, rendering
//! - [`env`]: patient / measurement / moderator agents (the environment)
//! - [`scenario`]: scenario file loading and validation
//! - [`policy`]: the doctor policy (scripted plans or a remote chat model)
//! - [`llm`]: minimal chat-completion wire client with retries
//! - [`engine`]: the per-trial loop and the retry-with-adaptation episode loop
//! - [`transcript`]: line-delimited event persistence and replay
//! - [`report`]: accuracy/cost tabulation and report rendering
//! - [`runner`]: batch execution over a scenario list (rayon or sequential)
//! - [`testing`]: stub chat server and scripted fixtures for tests and benches

pub mod engine;
pub mod env;
pub mod llm;
pub mod policy;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod state;
pub mod testing;
pub mod transcript;

pub use engine::{Engine, EpisodeResult, LoopConfig, Outcome, ProgressEvent, TrialRecord};
pub use env::{EnvBackend, GroundTruth, PatientScript, SymptomRule, TestTable};
pub use policy::{DoctorBackend, RemoteDoctor, ScriptedDoctor, ScriptedDoctorPlan};
pub use scenario::Scenario;
pub use state::{
    Action, ActionKind, Adaptation, Observation, ObservationSource, Return, Role, Segment,
    SegmentKind, State, Text, Trajectory, Verdict,
};
