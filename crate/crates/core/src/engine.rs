//! The adaptive episode engine: an inner reason/act/observe loop plus an
//! outer retry loop that turns failures into adaptations.
//!
//! One trial iterates propose action, environment step, state concatenation
//! until the doctor commits to a diagnosis or the per-trial budget runs out.
//! A failed trial is handed back to the doctor backend to generate an
//! adaptation, the dialogue is discarded, and the next trial restarts from
//! the initial state plus all adaptations so far (the compression step).
//! The outer loop exits as soon as a trial's return message is exactly "OK"
//! or after `max_trials` attempts.

use thiserror::Error;

use crate::env::{EnvBackend, EnvError};
use crate::policy::{DoctorBackend, PolicyError};
use crate::scenario::Scenario;
use crate::state::{
    concat_state, ActionKind, Adaptation, Return, Role, State, Text, Trajectory, Verdict,
};

/// Hard ceiling on the per-trial step budget.
pub const ALGORITHM_STEP_CAP: u32 = 50;

/// Budgets for one episode: per-trial steps (default 20, never above the
/// hard cap of 50) and the number of trials (default 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopConfig {
    max_steps: u32,
    max_trials: u32,
    algorithm_step_cap: u32,
}

impl Default for LoopConfig {
    fn default() -> LoopConfig {
        LoopConfig {
            max_steps: 20,
            max_trials: 3,
            algorithm_step_cap: ALGORITHM_STEP_CAP,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("max_steps must be between 1 and {cap}, got {given}")]
    MaxStepsOutOfRange { given: u32, cap: u32 },
    #[error("max_trials must be at least 1")]
    MaxTrialsZero,
}

impl LoopConfig {
    pub fn new(max_steps: u32, max_trials: u32) -> Result<LoopConfig, ConfigError> {
        if max_steps == 0 || max_steps > ALGORITHM_STEP_CAP {
            return Err(ConfigError::MaxStepsOutOfRange {
                given: max_steps,
                cap: ALGORITHM_STEP_CAP,
            });
        }
        if max_trials == 0 {
            return Err(ConfigError::MaxTrialsZero);
        }
        Ok(LoopConfig {
            max_steps,
            max_trials,
            algorithm_step_cap: ALGORITHM_STEP_CAP,
        })
    }

    pub fn max_steps(&self) -> u32 {
        self.max_steps
    }

    pub fn max_trials(&self) -> u32 {
        self.max_trials
    }

    pub fn algorithm_step_cap(&self) -> u32 {
        self.algorithm_step_cap
    }
}

/// One finished trial: the final dialogue state, the adaptation it started
/// with (absent only on the first trial), its return, and its action costs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub trial_index: u32,
    pub transcript: State,
    pub adaptation_used: Option<Adaptation>,
    pub return_value: Return,
    pub question_count: u32,
    pub test_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Solved,
    Unsolved,
}

/// All trials of one scenario, plus the episode-level verdict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeResult {
    pub scenario_id: Text,
    pub trials: Vec<TrialRecord>,
    pub outcome: Outcome,
    pub solving_trial: Option<u32>,
}

impl EpisodeResult {
    /// Derive the episode verdict from its trials: solved iff some trial
    /// (by construction the last) returned Ok.
    pub fn from_trials(scenario_id: impl Into<Text>, trials: Vec<TrialRecord>) -> EpisodeResult {
        debug_assert!(trials
            .iter()
            .enumerate()
            .all(|(i, t)| t.trial_index == i as u32 + 1));
        let solving_trial = trials
            .iter()
            .find(|t| t.return_value.is_ok())
            .map(|t| t.trial_index);
        let outcome = if solving_trial.is_some() {
            Outcome::Solved
        } else {
            Outcome::Unsolved
        };
        EpisodeResult {
            scenario_id: scenario_id.into(),
            trials,
            outcome,
            solving_trial,
        }
    }
}

/// Structured progress notifications, consumed by transcript persistence
/// and the CLI's live log. Within a trial, an action and its observation
/// share a step index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProgressEvent {
    EpisodeStarted {
        scenario_id: Text,
        initial_context: Text,
    },
    TrialStarted {
        trial: u32,
    },
    Action {
        trial: u32,
        step: u32,
        content: Text,
    },
    Observation {
        trial: u32,
        step: u32,
        role: Role,
        content: Text,
    },
    Verdict {
        trial: u32,
        step: u32,
        message: Text,
    },
    Adaptation {
        trial_origin: u32,
        content: Text,
    },
}

/// A per-episode event sink. Use `&mut |_| {}` to discard events.
pub type EventSink<'s> = dyn FnMut(&ProgressEvent) + 's;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("doctor backend failed in scenario '{scenario_id}' trial {trial}")]
    Doctor {
        scenario_id: String,
        trial: u32,
        #[source]
        source: PolicyError,
        partial: EpisodeResult,
    },
    #[error("environment backend failed in scenario '{scenario_id}' trial {trial}")]
    Env {
        scenario_id: String,
        trial: u32,
        #[source]
        source: EnvError,
        partial: EpisodeResult,
    },
}

impl EngineError {
    /// The trials that completed before the failure.
    pub fn partial(&self) -> &EpisodeResult {
        match self {
            EngineError::Doctor { partial, .. } | EngineError::Env { partial, .. } => partial,
        }
    }
}

/// The compression step: restart from the pristine initial state `s0` with
/// every adaptation inserted directly after the initial context. Nothing
/// else of the failed trial survives. With no adaptations this returns `s0`
/// unchanged; otherwise the result is stamped with the next trial index.
pub fn compress(failed: &State, s0: &State, adaptations: &[Adaptation]) -> State {
    if adaptations.is_empty() {
        return s0.clone();
    }
    s0.with_adaptations(failed.trial_index() + 1, adaptations)
}

enum TrialError {
    Doctor(PolicyError),
    Env(EnvError),
}

/// Runs episodes for one doctor/environment pairing.
pub struct Engine<'a> {
    config: LoopConfig,
    doctor: &'a DoctorBackend,
    env: &'a EnvBackend,
}

impl<'a> Engine<'a> {
    pub fn new(config: LoopConfig, doctor: &'a DoctorBackend, env: &'a EnvBackend) -> Engine<'a> {
        Engine {
            config,
            doctor,
            env,
        }
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    /// Run one scenario to completion: trials, adaptation on failure,
    /// compression, retry. Stops at the first trial whose return message is
    /// "OK" or after `max_trials` trials.
    pub fn run_episode(
        &self,
        scenario: &Scenario,
        emit: &mut EventSink<'_>,
    ) -> Result<EpisodeResult, EngineError> {
        emit(&ProgressEvent::EpisodeStarted {
            scenario_id: scenario.id.clone(),
            initial_context: scenario.initial_context.clone(),
        });
        let s0 = State::initial(1, &scenario.initial_context);
        let mut adaptations: Vec<Adaptation> = Vec::new();
        let mut trials: Vec<TrialRecord> = Vec::new();
        for trial in 1..=self.config.max_trials {
            let previous = trials.last().map(|t| &t.transcript).unwrap_or(&s0);
            let start = compress(previous, &s0, &adaptations);
            let record = match self.run_trial(scenario, start, trial, &adaptations, emit) {
                Ok(record) => record,
                Err(source) => return Err(wrap(source, scenario, trial, trials)),
            };
            let solved = record.return_value.is_ok();
            trials.push(record);
            if solved {
                break;
            }
            if trial < self.config.max_trials {
                let failed = trials.last().expect("just pushed");
                let trajectory = Trajectory {
                    final_state: failed.transcript.clone(),
                    return_value: failed.return_value.clone(),
                };
                let adaptation = match self.doctor.generate_adaptation(&trajectory) {
                    Ok(adaptation) => adaptation,
                    Err(source) => {
                        return Err(wrap(TrialError::Doctor(source), scenario, trial, trials))
                    }
                };
                emit(&ProgressEvent::Adaptation {
                    trial_origin: adaptation.trial_origin,
                    content: adaptation.content.clone(),
                });
                adaptations.push(adaptation);
            }
        }
        Ok(EpisodeResult::from_trials(scenario.id.clone(), trials))
    }

    fn run_trial(
        &self,
        scenario: &Scenario,
        start: State,
        trial: u32,
        adaptations: &[Adaptation],
        emit: &mut EventSink<'_>,
    ) -> Result<TrialRecord, TrialError> {
        emit(&ProgressEvent::TrialStarted { trial });
        let mut state = start;
        let mut question_count = 0u32;
        let mut test_count = 0u32;
        let mut verdict: Option<Return> = None;
        for step in 0..self.config.max_steps {
            let action = match self.doctor.propose_action(&state, adaptations) {
                Ok(action) => action,
                Err(PolicyError::PlanExhausted { .. }) => {
                    verdict = Some(Return::plan_exhausted());
                    break;
                }
                Err(source) => return Err(TrialError::Doctor(source)),
            };
            emit(&ProgressEvent::Action {
                trial,
                step,
                content: action.raw.clone(),
            });
            let outcome = self
                .env
                .step(&state, &action, scenario)
                .map_err(TrialError::Env)?;
            emit(&ProgressEvent::Observation {
                trial,
                step,
                role: outcome.observation.source.role(),
                content: outcome.observation.content.clone(),
            });
            match action.kind {
                ActionKind::PatientQuestion => question_count += 1,
                ActionKind::TestRequest => test_count += 1,
                ActionKind::Diagnosis => {}
            }
            state = concat_state(&state, &action, &outcome.observation);
            if let Some(ret) = outcome.verdict {
                verdict = Some(ret);
                break;
            }
        }
        let return_value = verdict.unwrap_or_else(Return::budget_exhausted);
        emit(&ProgressEvent::Verdict {
            trial,
            step: state.step_index().saturating_sub(1),
            message: return_value.message().to_string(),
        });
        let diagnosed = u32::from(return_value.verdict() != Verdict::BudgetExhausted);
        debug_assert_eq!(
            question_count + test_count + diagnosed,
            state.step_index(),
            "action counts must add up to the number of exchanges"
        );
        Ok(TrialRecord {
            trial_index: trial,
            transcript: state,
            adaptation_used: adaptations.last().cloned(),
            return_value,
            question_count,
            test_count,
        })
    }
}

fn wrap(
    source: TrialError,
    scenario: &Scenario,
    trial: u32,
    trials: Vec<TrialRecord>,
) -> EngineError {
    let partial = EpisodeResult::from_trials(scenario.id.clone(), trials);
    match source {
        TrialError::Doctor(source) => EngineError::Doctor {
            scenario_id: scenario.id.clone(),
            trial,
            source,
            partial,
        },
        TrialError::Env(source) => EngineError::Env {
            scenario_id: scenario.id.clone(),
            trial,
            source,
            partial,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GroundTruth, PatientScript, SymptomRule, TestTable};
    use crate::policy::{ScriptedDoctor, ScriptedDoctorPlan};
    use crate::state::{render_prompt, SegmentKind, ADAPTATION_HEADER};
    use indexmap::IndexMap;

    fn scenario() -> Scenario {
        let mut entries = IndexMap::new();
        entries.insert(
            "antibody panel".to_string(),
            "Elevated antibody titer.".to_string(),
        );
        Scenario {
            id: "mini".to_string(),
            initial_context: "A patient with fluctuating weakness; find the cause.".to_string(),
            patient: PatientScript {
                demographics: "adult".to_string(),
                history: "previously healthy".to_string(),
                symptom_rules: vec![SymptomRule {
                    keywords: vec!["double".to_string()],
                    statement: "I see double in the evenings.".to_string(),
                }],
                fallback_reply: "Nothing like that.".to_string(),
            },
            tests: TestTable {
                entries,
                default_result: "NORMAL readings.".to_string(),
            },
            truth: GroundTruth {
                canonical_diagnosis: "Myasthenia gravis".to_string(),
                synonyms: vec![],
            },
        }
    }

    fn doctor(default: &[&str], adapted: &[&str], trigger: &str, reflection: &str) -> DoctorBackend {
        DoctorBackend::Scripted(ScriptedDoctor {
            plan: ScriptedDoctorPlan::from_texts(default, adapted, trigger).unwrap(),
            reflection: reflection.to_string(),
        })
    }

    fn fail_then_succeed() -> DoctorBackend {
        doctor(
            &["Any double vision?", "DIAGNOSIS READY: Guillain-Barré Syndrome"],
            &[
                "Any double vision?",
                "REQUEST TEST: antibody panel",
                "DIAGNOSIS READY: Myasthenia Gravis",
            ],
            "antibody",
            "Order the antibody panel before concluding.",
        )
    }

    #[test]
    fn fail_then_succeed_episode_has_two_trials() {
        let doctor = fail_then_succeed();
        let env = EnvBackend::Scripted;
        let engine = Engine::new(LoopConfig::default(), &doctor, &env);
        let result = engine.run_episode(&scenario(), &mut |_| {}).unwrap();
        assert_eq!(result.trials.len(), 2);
        assert_eq!(result.trials[0].return_value.verdict(), Verdict::Failed);
        assert_eq!(result.trials[1].return_value.verdict(), Verdict::Ok);
        assert_eq!(result.outcome, Outcome::Solved);
        assert_eq!(result.solving_trial, Some(2));
        assert!(result.trials[0].adaptation_used.is_none());
        assert_eq!(
            result.trials[1].adaptation_used.as_ref().unwrap().content,
            "Order the antibody panel before concluding."
        );
        assert_eq!(result.trials[1].question_count, 1);
        assert_eq!(result.trials[1].test_count, 1);
    }

    #[test]
    fn always_correct_plan_solves_in_one_trial() {
        let plan = &["DIAGNOSIS READY: Myasthenia gravis"];
        let doctor = doctor(plan, plan, "x", "r");
        let env = EnvBackend::Scripted;
        let engine = Engine::new(LoopConfig::default(), &doctor, &env);
        let result = engine.run_episode(&scenario(), &mut |_| {}).unwrap();
        assert_eq!(result.trials.len(), 1);
        assert_eq!(result.outcome, Outcome::Solved);
        assert_eq!(result.solving_trial, Some(1));
        assert_eq!(result.trials[0].question_count, 0);
        assert_eq!(result.trials[0].test_count, 0);
    }

    #[test]
    fn always_wrong_plan_exhausts_max_trials() {
        let plan = &["Any double vision?", "DIAGNOSIS READY: Stroke"];
        let doctor = doctor(plan, plan, "never-present", "ask more questions");
        let env = EnvBackend::Scripted;
        let engine = Engine::new(LoopConfig::default(), &doctor, &env);
        let result = engine.run_episode(&scenario(), &mut |_| {}).unwrap();
        assert_eq!(result.trials.len(), 3);
        assert_eq!(result.outcome, Outcome::Unsolved);
        assert_eq!(result.solving_trial, None);
        for (i, trial) in result.trials.iter().enumerate() {
            assert_eq!(trial.trial_index, i as u32 + 1);
            assert_eq!(trial.return_value.verdict(), Verdict::Failed);
            assert_eq!(
                trial.return_value.message(),
                "FAILED: diagnosis 'Stroke' is incorrect."
            );
        }
        // Adaptations accumulate: trial 3 starts from two of them.
        assert_eq!(
            result.trials[2].transcript.adaptation_contents().len(),
            2
        );
    }

    #[test]
    fn budget_exhaustion_fires_after_exactly_max_steps_actions() {
        let mut texts: Vec<String> = (0..30).map(|i| format!("question {i}?")).collect();
        texts.push("DIAGNOSIS READY: Myasthenia gravis".to_string());
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        let doctor = doctor(&refs, &refs, "x", "r");
        let env = EnvBackend::Scripted;
        let config = LoopConfig::new(5, 1).unwrap();
        let engine = Engine::new(config, &doctor, &env);
        let result = engine.run_episode(&scenario(), &mut |_| {}).unwrap();
        let trial = &result.trials[0];
        assert_eq!(trial.return_value.verdict(), Verdict::BudgetExhausted);
        assert_eq!(
            trial.return_value.message(),
            "FAILED: inference budget exhausted."
        );
        assert_eq!(trial.transcript.step_index(), 5);
        assert_eq!(trial.question_count, 5);
    }

    #[test]
    fn trial_two_replays_trial_one_when_adaptation_changes_nothing() {
        let plan = &["Any double vision?", "DIAGNOSIS READY: Stroke"];
        let doctor = doctor(plan, plan, "never-present", "generic advice");
        let env = EnvBackend::Scripted;
        let engine = Engine::new(LoopConfig::new(20, 2).unwrap(), &doctor, &env);
        let result = engine.run_episode(&scenario(), &mut |_| {}).unwrap();
        assert_eq!(result.trials.len(), 2);
        let dialogue = |t: &TrialRecord| {
            t.transcript
                .segments()
                .iter()
                .filter(|s| {
                    matches!(s.kind, SegmentKind::Action | SegmentKind::Observation)
                })
                .map(|s| s.content.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(dialogue(&result.trials[0]), dialogue(&result.trials[1]));
    }

    #[test]
    fn episode_never_exceeds_the_step_budget() {
        let plan = &["q?", "DIAGNOSIS READY: Stroke"];
        let doctor = doctor(plan, plan, "no-trigger", "r");
        let env = EnvBackend::Scripted;
        let config = LoopConfig::new(7, 3).unwrap();
        let engine = Engine::new(config, &doctor, &env);
        let mut env_steps = 0u32;
        let result = engine
            .run_episode(&scenario(), &mut |event| {
                if matches!(event, ProgressEvent::Observation { .. }) {
                    env_steps += 1;
                }
            })
            .unwrap();
        assert!(env_steps <= config.max_trials() * config.max_steps());
        assert_eq!(result.trials.len(), 3);
    }

    #[test]
    fn event_stream_is_ordered_and_complete() {
        let doctor = fail_then_succeed();
        let env = EnvBackend::Scripted;
        let engine = Engine::new(LoopConfig::default(), &doctor, &env);
        let mut events: Vec<ProgressEvent> = Vec::new();
        engine
            .run_episode(&scenario(), &mut |e| events.push(e.clone()))
            .unwrap();
        assert!(matches!(events[0], ProgressEvent::EpisodeStarted { .. }));
        let verdicts = events
            .iter()
            .filter(|e| matches!(e, ProgressEvent::Verdict { .. }))
            .count();
        assert_eq!(verdicts, 2);
        let adaptations = events
            .iter()
            .filter(|e| matches!(e, ProgressEvent::Adaptation { .. }))
            .count();
        assert_eq!(adaptations, 1);
        // Actions and observations come in pairs sharing a step index.
        let mut last_action_step: Option<(u32, u32)> = None;
        for event in &events {
            match event {
                ProgressEvent::Action { trial, step, .. } => {
                    assert_eq!(last_action_step, None);
                    last_action_step = Some((*trial, *step));
                }
                ProgressEvent::Observation { trial, step, .. } => {
                    assert_eq!(last_action_step, Some((*trial, *step)));
                    last_action_step = None;
                }
                _ => {}
            }
        }
    }

    #[test]
    fn compress_drops_dialogue_and_keeps_adaptations() {
        let s0 = State::initial(1, "ctx");
        assert_eq!(compress(&s0, &s0, &[]), s0);

        let q = crate::policy::classify_action("q?").unwrap();
        let obs = crate::state::Observation {
            source: crate::state::ObservationSource::Patient,
            content: "a".to_string(),
        };
        let failed = concat_state(&s0, &q, &obs);
        let adaptation = Adaptation::new(1, "try the panel").unwrap();
        let compressed = compress(&failed, &s0, std::slice::from_ref(&adaptation));
        assert_eq!(compressed.trial_index(), 2);
        assert_eq!(compressed.segments().len(), 2);
        assert_eq!(compressed.step_index(), 0);
        assert_eq!(compressed.adaptation_contents(), vec!["try the panel"]);
    }

    #[test]
    fn compressed_render_length_is_initial_render_plus_fixed_overhead() {
        let s0 = State::initial(1, "some case context here");
        let adaptation = Adaptation::new(1, "order the panel first").unwrap();
        let compressed = compress(&s0, &s0, std::slice::from_ref(&adaptation));
        let base = render_prompt(&s0, Role::Doctor).len();
        let with = render_prompt(&compressed, Role::Doctor).len();
        // Overhead: a blank line, the header line, and "- <content>\n".
        let overhead = 1 + ADAPTATION_HEADER.len() + 1 + 2 + adaptation.content.len() + 1;
        assert_eq!(with, base + overhead);
    }

    #[test]
    fn config_validation_enforces_the_hard_cap() {
        assert!(LoopConfig::new(0, 3).is_err());
        assert!(LoopConfig::new(51, 3).is_err());
        assert!(LoopConfig::new(50, 3).is_ok());
        assert!(LoopConfig::new(20, 0).is_err());
        let config = LoopConfig::default();
        assert_eq!(config.max_steps(), 20);
        assert_eq!(config.max_trials(), 3);
        assert_eq!(config.algorithm_step_cap(), 50);
    }
}
