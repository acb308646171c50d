//! Dialogue states and the vocabulary shared by every other module.
//!
//! A [`State`] is an ordered list of tagged text segments: the initial case
//! context, any adaptations carried over from failed trials, and strictly
//! alternating action/observation pairs. States are immutable values; each
//! step produces a new state whose segments extend the old ones, so the old
//! segments are always a prefix of the new.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Plain text: the universal currency of states, actions, and observations.
/// Granularity is characters in a string, not model tokenizer tokens.
pub type Text = String;

/// Who a segment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    System,
    Doctor,
    Patient,
    Measurement,
    Moderator,
    Adaptation,
}

impl Role {
    /// Label used when rendering transcripts and persisting events.
    pub fn label(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::Doctor => "doctor",
            Role::Patient => "patient",
            Role::Measurement => "measurement",
            Role::Moderator => "moderator",
            Role::Adaptation => "adaptation",
        }
    }

    /// Inverse of [`Role::label`].
    pub fn from_label(label: &str) -> Option<Role> {
        match label {
            "system" => Some(Role::System),
            "doctor" => Some(Role::Doctor),
            "patient" => Some(Role::Patient),
            "measurement" => Some(Role::Measurement),
            "moderator" => Some(Role::Moderator),
            "adaptation" => Some(Role::Adaptation),
            _ => None,
        }
    }
}

/// What a segment is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    InitialContext,
    Action,
    Observation,
    Return,
    Adaptation,
}

/// One tagged piece of dialogue text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub role: Role,
    pub kind: SegmentKind,
    pub content: Text,
}

impl Segment {
    pub fn new(role: Role, kind: SegmentKind, content: impl Into<Text>) -> Result<Self, StateError> {
        let ok = match kind {
            SegmentKind::InitialContext => role == Role::System,
            SegmentKind::Action => role == Role::Doctor,
            SegmentKind::Observation => {
                matches!(role, Role::Patient | Role::Measurement | Role::Moderator)
            }
            SegmentKind::Return => role == Role::Moderator,
            SegmentKind::Adaptation => role == Role::Adaptation,
        };
        if !ok {
            return Err(StateError::InvalidSegment { role, kind });
        }
        Ok(Segment {
            role,
            kind,
            content: content.into(),
        })
    }
}

/// How a doctor utterance is classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    PatientQuestion,
    TestRequest,
    Diagnosis,
}

/// A classified doctor utterance.
///
/// `raw` is the full utterance; `payload` is the question text, test name, or
/// diagnosis text after marker stripping. `payload` is always a substring of
/// `raw` and is non-empty for `TestRequest` and `Diagnosis`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub raw: Text,
    pub kind: ActionKind,
    pub payload: Text,
}

/// Where an observation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObservationSource {
    Patient,
    Measurement,
    Moderator,
}

impl ObservationSource {
    pub fn role(self) -> Role {
        match self {
            ObservationSource::Patient => Role::Patient,
            ObservationSource::Measurement => Role::Measurement,
            ObservationSource::Moderator => Role::Moderator,
        }
    }
}

/// An environment reply to a doctor action. Content is never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub source: ObservationSource,
    pub content: Text,
}

/// Structured verdict of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Ok,
    Failed,
    NoAnswer,
    BudgetExhausted,
}

/// The string a trial ends with, plus its structured verdict.
///
/// The verdict is `Ok` if and only if the message is exactly `"OK"`; the
/// retry loop's guard compares the message string, so both views must agree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Return {
    verdict: Verdict,
    message: Text,
}

/// The exact success message the retry loop tests for.
pub const RETURN_OK: &str = "OK";

impl Return {
    pub fn ok() -> Return {
        Return {
            verdict: Verdict::Ok,
            message: RETURN_OK.to_string(),
        }
    }

    /// An incorrect diagnosis. The message embeds the wrong diagnosis text so
    /// the adaptation prompt has material to correct.
    pub fn failed(diagnosis: &str) -> Return {
        Return {
            verdict: Verdict::Failed,
            message: format!("FAILED: diagnosis '{diagnosis}' is incorrect."),
        }
    }

    pub fn no_answer() -> Return {
        Return {
            verdict: Verdict::NoAnswer,
            message: "FAILED: no diagnosis provided.".to_string(),
        }
    }

    pub fn budget_exhausted() -> Return {
        Return {
            verdict: Verdict::BudgetExhausted,
            message: "FAILED: inference budget exhausted.".to_string(),
        }
    }

    /// Budget exhaustion with a distinct message for a scripted plan that ran
    /// out of actions before diagnosing.
    pub fn plan_exhausted() -> Return {
        Return {
            verdict: Verdict::BudgetExhausted,
            message: "FAILED: inference budget exhausted (doctor plan exhausted).".to_string(),
        }
    }

    pub fn verdict(&self) -> Verdict {
        self.verdict
    }

    pub fn message(&self) -> &str {
        &self.message
    }

    pub fn is_ok(&self) -> bool {
        self.message == RETURN_OK
    }

    /// The wrong diagnosis embedded in a `Failed` message, if any.
    pub fn incorrect_diagnosis(&self) -> Option<&str> {
        if self.verdict != Verdict::Failed {
            return None;
        }
        let rest = self.message.strip_prefix("FAILED: diagnosis '")?;
        rest.strip_suffix("' is incorrect.")
    }

    /// Rebuild a return from a persisted message string.
    pub fn from_message(message: &str) -> Option<Return> {
        let verdict = if message == RETURN_OK {
            Verdict::Ok
        } else if message == "FAILED: no diagnosis provided." {
            Verdict::NoAnswer
        } else if message.starts_with("FAILED: inference budget exhausted") {
            Verdict::BudgetExhausted
        } else if message.starts_with("FAILED: diagnosis '") {
            Verdict::Failed
        } else {
            return None;
        };
        Some(Return {
            verdict,
            message: message.to_string(),
        })
    }
}

/// A self-correction generated from a failed trial, injected into the
/// doctor's system preamble for subsequent trials. `trial_origin` is the
/// failed trial it corrects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adaptation {
    pub trial_origin: u32,
    pub content: Text,
}

impl Adaptation {
    pub fn new(trial_origin: u32, content: impl Into<Text>) -> Result<Adaptation, StateError> {
        let content = content.into();
        if trial_origin == 0 {
            return Err(StateError::MalformedState(
                "adaptation trial_origin must be >= 1".to_string(),
            ));
        }
        if content.trim().is_empty() {
            return Err(StateError::MalformedState(
                "adaptation content must be non-empty".to_string(),
            ));
        }
        Ok(Adaptation {
            trial_origin,
            content,
        })
    }
}

/// A finished trial: its final state and the return that ended it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub final_state: State,
    pub return_value: Return,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("malformed state: {0}")]
    MalformedState(String),
    #[error("segment kind {kind:?} cannot carry role {role:?}")]
    InvalidSegment { role: Role, kind: SegmentKind },
}

/// An ordered list of tagged dialogue segments.
///
/// Invariants, enforced by construction:
/// - the first segment is the initial context;
/// - adaptation segments, if any, sit directly after the initial context;
/// - the remaining segments strictly alternate action, observation;
/// - `step_index` equals the number of action segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct State {
    segments: Vec<Segment>,
    trial_index: u32,
    step_index: u32,
}

impl State {
    /// A fresh state holding only the scenario's initial context.
    pub fn initial(trial_index: u32, initial_context: impl Into<Text>) -> State {
        State {
            segments: vec![Segment {
                role: Role::System,
                kind: SegmentKind::InitialContext,
                content: initial_context.into(),
            }],
            trial_index,
            step_index: 0,
        }
    }

    /// Validate and adopt an arbitrary segment list (used by transcript replay).
    pub fn from_segments(trial_index: u32, segments: Vec<Segment>) -> Result<State, StateError> {
        let mut steps = 0u32;
        if segments.is_empty() || segments[0].kind != SegmentKind::InitialContext {
            return Err(StateError::MalformedState(
                "first segment must be the initial context".to_string(),
            ));
        }
        let mut rest = &segments[1..];
        while let Some(seg) = rest.first() {
            if seg.kind != SegmentKind::Adaptation {
                break;
            }
            rest = &rest[1..];
        }
        while !rest.is_empty() {
            if rest[0].kind != SegmentKind::Action {
                return Err(StateError::MalformedState(format!(
                    "expected an action segment, found {:?}",
                    rest[0].kind
                )));
            }
            let Some(obs) = rest.get(1) else {
                return Err(StateError::MalformedState(
                    "action segment without a following observation".to_string(),
                ));
            };
            if obs.kind != SegmentKind::Observation {
                return Err(StateError::MalformedState(format!(
                    "expected an observation segment, found {:?}",
                    obs.kind
                )));
            }
            steps += 1;
            rest = &rest[2..];
        }
        for seg in &segments {
            Segment::new(seg.role, seg.kind, seg.content.clone())?;
        }
        Ok(State {
            segments,
            trial_index,
            step_index: steps,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn trial_index(&self) -> u32 {
        self.trial_index
    }

    pub fn step_index(&self) -> u32 {
        self.step_index
    }

    pub fn initial_context(&self) -> &str {
        &self.segments[0].content
    }

    /// Contents of the adaptation segments, in order.
    pub fn adaptation_contents(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Adaptation)
            .map(|s| s.content.as_str())
            .collect()
    }

    /// The action/observation pairs after the initial context and adaptations.
    pub fn dialogue_pairs(&self) -> impl Iterator<Item = (&Segment, &Segment)> {
        let first_action = self
            .segments
            .iter()
            .position(|s| s.kind == SegmentKind::Action)
            .unwrap_or(self.segments.len());
        self.segments[first_action..]
            .chunks(2)
            .filter(|c| c.len() == 2)
            .map(|c| (&c[0], &c[1]))
    }

    /// A state with `adaptations` inserted directly after the initial context.
    /// Existing dialogue is not carried over; only the first segment survives.
    pub fn with_adaptations(&self, trial_index: u32, adaptations: &[Adaptation]) -> State {
        let mut segments = vec![self.segments[0].clone()];
        for adaptation in adaptations {
            segments.push(Segment {
                role: Role::Adaptation,
                kind: SegmentKind::Adaptation,
                content: adaptation.content.clone(),
            });
        }
        State {
            segments,
            trial_index,
            step_index: 0,
        }
    }
}

/// Concatenate an action and its observation onto a state.
///
/// The input state is unmodified; the result has exactly two more segments
/// and a step index one higher. Old segments are a prefix of the new ones.
pub fn concat_state(state: &State, action: &Action, observation: &Observation) -> State {
    let mut segments = state.segments.clone();
    segments.push(Segment {
        role: Role::Doctor,
        kind: SegmentKind::Action,
        content: action.raw.clone(),
    });
    segments.push(Segment {
        role: observation.source.role(),
        kind: SegmentKind::Observation,
        content: observation.content.clone(),
    });
    State {
        segments,
        trial_index: state.trial_index,
        step_index: state.step_index + 1,
    }
}

/// Fixed system preamble for the doctor agent: objective, budget, and the
/// action marker grammar remote models must comply with.
pub const DOCTOR_PREAMBLE: &str = "You are a doctor interviewing a patient in order to reach a diagnosis.\n\
Objective: gather information with focused questions, order tests when they would discriminate between candidate conditions, and commit to a diagnosis within the inference budget (20 actions unless configured otherwise).\n\
On each turn reply with exactly one of the following:\n\
- a single question addressed to the patient (plain text);\n\
- REQUEST TEST: <test name> to ask the measurement agent for a result;\n\
- DIAGNOSIS READY: <diagnosis> to commit to your final diagnosis.\n\
The REQUEST TEST: and DIAGNOSIS READY: markers are case-sensitive and must appear verbatim.";

/// Fixed system preamble for the patient agent.
pub const PATIENT_PREAMBLE: &str = "You are a patient in a consultation. Answer the doctor's questions truthfully from your own experience. You do not know your diagnosis and must never guess or reveal one.";

/// Fixed system preamble for the measurement agent.
pub const MEASUREMENT_PREAMBLE: &str = "You are a measurement agent reporting diagnostic test results. Reply with the result of the requested test and nothing else.";

/// Fixed system preamble for the moderator agent.
pub const MODERATOR_PREAMBLE: &str = "You are a moderator grading a doctor's final diagnosis against the true condition.";

/// Header line introducing adaptations in the doctor's system preamble.
pub const ADAPTATION_HEADER: &str = "Guidance from previous attempts:";

/// Header line introducing the case context.
pub const CASE_HEADER: &str = "Case information:";

/// Header line introducing the dialogue turns.
pub const DIALOGUE_HEADER: &str = "Dialogue so far:";

fn preamble_for(perspective: Role) -> &'static str {
    match perspective {
        Role::Doctor | Role::Adaptation => DOCTOR_PREAMBLE,
        Role::Patient => PATIENT_PREAMBLE,
        Role::Measurement => MEASUREMENT_PREAMBLE,
        Role::Moderator | Role::System => MODERATOR_PREAMBLE,
    }
}

/// Speaker label for one dialogue segment as shown in rendered transcripts.
pub fn segment_speaker(segment: &Segment) -> &'static str {
    match segment.role {
        Role::System => "System",
        Role::Doctor => "Doctor",
        Role::Patient => "Patient",
        Role::Measurement => "Measurement",
        Role::Moderator => "Moderator",
        Role::Adaptation => "Adaptation",
    }
}

/// Render only the dialogue turns (and any return segments), one speaker-
/// prefixed line per segment. Shared by prompt rendering and transcript
/// display.
pub fn render_dialogue(state: &State) -> Text {
    let mut out = String::new();
    for segment in state.segments() {
        match segment.kind {
            SegmentKind::Action | SegmentKind::Observation | SegmentKind::Return => {
                out.push_str(segment_speaker(segment));
                out.push_str(": ");
                out.push_str(&segment.content);
                out.push('\n');
            }
            SegmentKind::InitialContext | SegmentKind::Adaptation => {}
        }
    }
    out
}

/// Render a state as the prompt text seen from one agent's perspective.
///
/// Pure and deterministic: equal inputs yield byte-identical output. Every
/// segment's content appears in the output in segment order, except that
/// adaptation segments are lifted into the system preamble for the doctor
/// perspective.
pub fn render_prompt(state: &State, perspective: Role) -> Text {
    let mut out = String::new();
    out.push_str(preamble_for(perspective));
    out.push('\n');
    let adaptations = state.adaptation_contents();
    if perspective == Role::Doctor && !adaptations.is_empty() {
        out.push('\n');
        out.push_str(ADAPTATION_HEADER);
        out.push('\n');
        for content in &adaptations {
            out.push_str("- ");
            out.push_str(content);
            out.push('\n');
        }
    }
    out.push('\n');
    out.push_str(CASE_HEADER);
    out.push('\n');
    out.push_str(state.initial_context());
    out.push('\n');
    if perspective != Role::Doctor && !adaptations.is_empty() {
        for content in &adaptations {
            out.push_str("Adaptation: ");
            out.push_str(content);
            out.push('\n');
        }
    }
    let dialogue = render_dialogue(state);
    if !dialogue.is_empty() {
        out.push('\n');
        out.push_str(DIALOGUE_HEADER);
        out.push('\n');
        out.push_str(&dialogue);
    }
    out
}
