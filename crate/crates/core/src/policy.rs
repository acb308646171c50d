//! The doctor policy: proposes the next action given the rendered state.
//!
//! Two backends share one interface. The scripted backend replays a fixed
//! action sequence and switches to an alternate sequence once an adaptation
//! mentions its trigger keyword, which makes fail-then-succeed episodes
//! exactly reproducible. The remote backend renders the doctor-perspective
//! prompt into chat messages and classifies the model's reply.
//!
//! Doctor utterances carry their intent through two case-sensitive markers,
//! "REQUEST TEST:" and "DIAGNOSIS READY:". Anything else is a question for
//! the patient.

use thiserror::Error;

use crate::llm::{ChatClient, ChatError, ChatMessage, ChatRequest, ChatRole};
use crate::scenario::Scenario;
use crate::state::{
    render_prompt, Action, ActionKind, Adaptation, Role, State, Text, Trajectory,
    ADAPTATION_HEADER, CASE_HEADER, DOCTOR_PREAMBLE,
};

/// Marker introducing a test request, matched case-sensitively.
pub const TEST_MARKER: &str = "REQUEST TEST:";

/// Marker introducing a final diagnosis, matched case-sensitively.
pub const DIAGNOSIS_MARKER: &str = "DIAGNOSIS READY:";

/// The literal the adaptation prompt must end with.
pub const ADAPTATION_CUE: &str = "New plan: ";

/// System preamble for adaptation generation on remote backends.
pub const ADAPTATION_PREAMBLE: &str = "You are reviewing a failed diagnostic consultation. \
Write one concise corrective instruction the doctor should follow on the next attempt, \
stating what to do differently. Reply with the instruction text only.";

/// Closing user message asking a remote doctor for its next move.
pub const NEXT_ACTION_CUE: &str = "Reply with your next action.";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("doctor action is empty")]
    EmptyAction,
    #[error("invalid scripted plan: {0}")]
    InvalidPlan(String),
    #[error("scripted plan has no action for step {step}")]
    PlanExhausted { step: u32 },
    #[error("doctor backend request failed")]
    Backend(#[from] ChatError),
    #[error("backend returned an empty adaptation twice")]
    EmptyAdaptation,
    #[error("cannot generate an adaptation from a successful trajectory")]
    TrajectoryNotFailed,
}

/// Classify a raw doctor utterance into an [`Action`].
///
/// "REQUEST TEST:" is checked first, then "DIAGNOSIS READY:"; the first
/// marker with a non-empty trailing payload wins. A marker with nothing
/// after it is treated as a patient question, which keeps the payload
/// non-empty for every test request and diagnosis.
pub fn classify_action(raw: &str) -> Result<Action, PolicyError> {
    if raw.trim().is_empty() {
        return Err(PolicyError::EmptyAction);
    }
    for (marker, kind) in [
        (TEST_MARKER, ActionKind::TestRequest),
        (DIAGNOSIS_MARKER, ActionKind::Diagnosis),
    ] {
        if let Some(at) = raw.find(marker) {
            let payload = raw[at + marker.len()..].trim();
            if !payload.is_empty() {
                return Ok(Action {
                    raw: raw.to_string(),
                    kind,
                    payload: payload.to_string(),
                });
            }
        }
    }
    Ok(Action {
        raw: raw.to_string(),
        kind: ActionKind::PatientQuestion,
        payload: raw.trim().to_string(),
    })
}

/// A fixed action sequence plus an alternate taken once an adaptation
/// mentions the trigger. Both sequences end in a diagnosis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedDoctorPlan {
    default_sequence: Vec<Action>,
    adapted_sequence: Vec<Action>,
    adaptation_trigger: Text,
}

impl ScriptedDoctorPlan {
    pub fn new(
        default_sequence: Vec<Action>,
        adapted_sequence: Vec<Action>,
        adaptation_trigger: impl Into<Text>,
    ) -> Result<ScriptedDoctorPlan, PolicyError> {
        for sequence in [&default_sequence, &adapted_sequence] {
            let ends_in_diagnosis = sequence
                .last()
                .is_some_and(|action| action.kind == ActionKind::Diagnosis);
            if !ends_in_diagnosis {
                return Err(PolicyError::InvalidPlan(
                    "every action sequence must end in a diagnosis".to_string(),
                ));
            }
        }
        Ok(ScriptedDoctorPlan {
            default_sequence,
            adapted_sequence,
            adaptation_trigger: adaptation_trigger.into(),
        })
    }

    /// Build a plan from raw utterance texts, classifying each one.
    pub fn from_texts(
        default_sequence: &[&str],
        adapted_sequence: &[&str],
        adaptation_trigger: &str,
    ) -> Result<ScriptedDoctorPlan, PolicyError> {
        let classify_all = |texts: &[&str]| -> Result<Vec<Action>, PolicyError> {
            texts.iter().map(|t| classify_action(t)).collect()
        };
        ScriptedDoctorPlan::new(
            classify_all(default_sequence)?,
            classify_all(adapted_sequence)?,
            adaptation_trigger,
        )
    }

    pub fn default_sequence(&self) -> &[Action] {
        &self.default_sequence
    }

    pub fn adapted_sequence(&self) -> &[Action] {
        &self.adapted_sequence
    }

    fn select(&self, adaptations: &[Adaptation]) -> &[Action] {
        let triggered = adaptations
            .iter()
            .any(|a| a.content.contains(&self.adaptation_trigger));
        if triggered {
            &self.adapted_sequence
        } else {
            &self.default_sequence
        }
    }
}

/// Deterministic doctor: replays a plan and returns a fixed reflection as
/// its adaptation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedDoctor {
    pub plan: ScriptedDoctorPlan,
    pub reflection: Text,
}

/// Chat-model doctor. `prompt_char_budget` bounds the rendered dialogue:
/// when the total message text would exceed it, the oldest action and
/// observation pairs are dropped first. The system preamble, adaptations,
/// and initial context are never dropped.
#[derive(Debug, Clone)]
pub struct RemoteDoctor {
    pub model_id: Text,
    pub temperature: f32,
    pub max_reply_tokens: u32,
    pub prompt_char_budget: Option<usize>,
    pub client: ChatClient,
}

/// The policy under evaluation.
#[derive(Debug, Clone)]
pub enum DoctorBackend {
    Scripted(ScriptedDoctor),
    Remote(RemoteDoctor),
}

impl DoctorBackend {
    /// Propose the next action for `state`. Scripted backends index their
    /// selected sequence by the state's step index; remote backends request
    /// one completion and classify it.
    pub fn propose_action(
        &self,
        state: &State,
        adaptations: &[Adaptation],
    ) -> Result<Action, PolicyError> {
        match self {
            DoctorBackend::Scripted(doctor) => {
                let sequence = doctor.plan.select(adaptations);
                sequence
                    .get(state.step_index() as usize)
                    .cloned()
                    .ok_or(PolicyError::PlanExhausted {
                        step: state.step_index(),
                    })
            }
            DoctorBackend::Remote(doctor) => {
                let reply = doctor.client.complete(&doctor.doctor_request(state)?)?;
                classify_action(&reply)
            }
        }
    }

    /// Generate a self-correction from a failed trajectory. The scripted
    /// backend returns its configured reflection; the remote backend answers
    /// the adaptation prompt, retrying once on a whitespace reply.
    pub fn generate_adaptation(&self, trajectory: &Trajectory) -> Result<Adaptation, PolicyError> {
        if trajectory.return_value.is_ok() {
            return Err(PolicyError::TrajectoryNotFailed);
        }
        let prompt = build_adaptation_prompt(trajectory);
        let trial_origin = trajectory.final_state.trial_index();
        match self {
            DoctorBackend::Scripted(doctor) => {
                debug_assert!(prompt.ends_with(ADAPTATION_CUE));
                Adaptation::new(trial_origin, doctor.reflection.clone())
                    .map_err(|_| PolicyError::EmptyAdaptation)
            }
            DoctorBackend::Remote(doctor) => {
                let request = ChatRequest::new(
                    &doctor.model_id,
                    vec![
                        ChatMessage::new(ChatRole::System, ADAPTATION_PREAMBLE),
                        ChatMessage::new(ChatRole::User, prompt),
                    ],
                    doctor.temperature,
                    doctor.max_reply_tokens,
                )?;
                for _ in 0..2 {
                    let reply = doctor.client.complete(&request)?;
                    if !reply.trim().is_empty() {
                        return Adaptation::new(trial_origin, reply)
                            .map_err(|_| PolicyError::EmptyAdaptation);
                    }
                }
                Err(PolicyError::EmptyAdaptation)
            }
        }
    }
}

/// The prompt a failed trajectory turns into: the rendered doctor view of
/// the final state, the return message, then the cue "New plan: ".
pub fn build_adaptation_prompt(trajectory: &Trajectory) -> Text {
    let mut prompt = render_prompt(&trajectory.final_state, Role::Doctor);
    prompt.push('\n');
    prompt.push_str(trajectory.return_value.message());
    prompt.push('\n');
    prompt.push_str(ADAPTATION_CUE);
    prompt
}

impl RemoteDoctor {
    fn doctor_request(&self, state: &State) -> Result<ChatRequest, ChatError> {
        let mut system = String::from(DOCTOR_PREAMBLE);
        system.push('\n');
        let adaptations = state.adaptation_contents();
        if !adaptations.is_empty() {
            system.push('\n');
            system.push_str(ADAPTATION_HEADER);
            system.push('\n');
            for content in &adaptations {
                system.push_str("- ");
                system.push_str(content);
                system.push('\n');
            }
        }
        system.push('\n');
        system.push_str(CASE_HEADER);
        system.push('\n');
        system.push_str(state.initial_context());

        let mut pairs: Vec<(String, String)> = state
            .dialogue_pairs()
            .map(|(action, observation)| (action.content.clone(), observation.content.clone()))
            .collect();
        if let Some(budget) = self.prompt_char_budget {
            let fixed = system.chars().count() + NEXT_ACTION_CUE.chars().count();
            let pair_chars =
                |p: &(String, String)| p.0.chars().count() + p.1.chars().count();
            let mut total = fixed + pairs.iter().map(pair_chars).sum::<usize>();
            while total > budget && !pairs.is_empty() {
                total -= pair_chars(&pairs.remove(0));
            }
        }

        let mut messages = vec![ChatMessage::new(ChatRole::System, system)];
        for (action, observation) in pairs {
            messages.push(ChatMessage::new(ChatRole::Assistant, action));
            messages.push(ChatMessage::new(ChatRole::User, observation));
        }
        messages.push(ChatMessage::new(ChatRole::User, NEXT_ACTION_CUE));
        ChatRequest::new(
            &self.model_id,
            messages,
            self.temperature,
            self.max_reply_tokens,
        )
    }
}

/// A scripted doctor that solves `scenario` on its first trial: one question
/// per symptom rule, one request per listed test, then the correct diagnosis.
/// Used by offline CLI runs to exercise the full pipeline deterministically.
pub fn demo_doctor_for(scenario: &Scenario) -> ScriptedDoctor {
    let mut texts: Vec<String> = Vec::new();
    for rule in &scenario.patient.symptom_rules {
        texts.push(format!("Have you experienced {}?", rule.keywords.join(" and ")));
    }
    for name in scenario.tests.entries.keys() {
        texts.push(format!("{TEST_MARKER} {name}"));
    }
    texts.push(format!(
        "{DIAGNOSIS_MARKER} {}",
        scenario.truth.canonical_diagnosis
    ));
    let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
    let plan = ScriptedDoctorPlan::from_texts(&refs, &refs, &scenario.truth.canonical_diagnosis)
        .expect("demo plan always ends in a diagnosis");
    ScriptedDoctor {
        plan,
        reflection: "Reconsider which findings discriminate between the candidate conditions."
            .to_string(),
    }
}
