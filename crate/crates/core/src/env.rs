//! The environment: patient, measurement, and moderator agents.
//!
//! The environment turns a doctor action into an observation. The scripted
//! backend is a pure function of (action, scenario): the patient answers from
//! a keyword rule table, the measurement agent from a test-name table, and
//! the moderator by normalized comparison against ground truth. The remote
//! backend swaps the patient and measurement agents for a chat model while
//! the moderator stays deterministic, so verdicts are reproducible either way.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::llm::{ChatClient, ChatError, ChatMessage, ChatRequest, ChatRole};
use crate::scenario::Scenario;
use crate::state::{
    Action, ActionKind, Observation, ObservationSource, Return, Role, State, Text,
    MEASUREMENT_PREAMBLE, PATIENT_PREAMBLE,
};

/// One keyword rule of a patient script: if every keyword appears in the
/// doctor's question, the patient replies with this statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymptomRule {
    pub keywords: Vec<Text>,
    pub statement: Text,
}

/// A scripted patient: demographics and history for context, keyword rules
/// for answering questions, and a fallback for questions no rule covers.
/// The script never contains the diagnosis; the patient does not know it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientScript {
    pub demographics: Text,
    pub history: Text,
    pub symptom_rules: Vec<SymptomRule>,
    pub fallback_reply: Text,
}

/// Test-name to result table for the measurement agent. Keys are stored in
/// normalized form (lowercase, trimmed, whitespace collapsed); unlisted tests
/// get `default_result`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestTable {
    pub entries: IndexMap<Text, Text>,
    pub default_result: Text,
}

/// The correct diagnosis and its accepted spellings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub canonical_diagnosis: Text,
    pub synonyms: Vec<Text>,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("the patient cannot answer an empty question")]
    EmptyQuestion,
    #[error("environment backend request failed")]
    Backend(#[from] ChatError),
}

/// Canonical form used to compare diagnoses: NFC Unicode normalization,
/// lowercase, apostrophe variants unified, possessive "'s" dropped, remaining
/// punctuation mapped to spaces, whitespace collapsed. Idempotent.
pub fn normalize_diagnosis(text: &str) -> Text {
    let mut chars: Vec<char> = Vec::with_capacity(text.len());
    for ch in text.nfc() {
        let ch = match ch {
            '\u{2019}' | '\u{02BC}' | '`' | '\u{00B4}' => '\'',
            other => other,
        };
        chars.extend(ch.to_lowercase());
    }
    let mut spaced = String::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '\'' && chars.get(i + 1) == Some(&'s') {
            let boundary = chars.get(i + 2).is_none_or(|c| !c.is_alphanumeric());
            if boundary {
                i += 2;
                continue;
            }
        }
        if chars[i].is_alphanumeric() {
            spaced.push(chars[i]);
        } else {
            spaced.push(' ');
        }
        i += 1;
    }
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Canonical form for test-table keys: lowercase, trimmed, internal
/// whitespace collapsed. Idempotent.
pub fn normalize_test_name(text: &str) -> Text {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Answer a doctor question from the patient script: the concatenated
/// statements of every rule whose keywords all appear in the question
/// (case-insensitive substring), in rule order, or the fallback reply when
/// no rule matches.
pub fn patient_respond(question: &str, script: &PatientScript) -> Result<Text, EnvError> {
    if question.trim().is_empty() {
        return Err(EnvError::EmptyQuestion);
    }
    let question_lower = question.to_lowercase();
    let mut statements: Vec<&str> = Vec::new();
    for rule in &script.symptom_rules {
        if rule.keywords.iter().all(|kw| question_lower.contains(kw)) {
            statements.push(&rule.statement);
        }
    }
    if statements.is_empty() {
        Ok(script.fallback_reply.clone())
    } else {
        Ok(statements.join(" "))
    }
}

/// Look up a test result, falling back to the table's default. Total for
/// every test name; lookup is under key normalization.
pub fn measurement_respond(test_name: &str, table: &TestTable) -> Text {
    table
        .entries
        .get(&normalize_test_name(test_name))
        .unwrap_or(&table.default_result)
        .clone()
}

/// Grade a submitted diagnosis: Ok iff its normalized form equals the
/// normalized canonical diagnosis or any normalized synonym; NoAnswer for an
/// empty or whitespace submission; Failed otherwise.
pub fn moderator_evaluate(diagnosis: &str, truth: &GroundTruth) -> Return {
    if diagnosis.trim().is_empty() {
        return Return::no_answer();
    }
    let candidate = normalize_diagnosis(diagnosis);
    let correct = std::iter::once(truth.canonical_diagnosis.as_str())
        .chain(truth.synonyms.iter().map(|s| s.as_str()))
        .any(|accepted| normalize_diagnosis(accepted) == candidate);
    if correct {
        Return::ok()
    } else {
        Return::failed(diagnosis)
    }
}

/// An observation plus, for diagnosis actions, the moderator's return.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub verdict: Option<Return>,
}

/// Remote environment configuration: a chat model stands in for the patient
/// and measurement agents. The moderator always grades deterministically so
/// verdicts stay comparable across backends.
#[derive(Debug, Clone)]
pub struct RemoteEnv {
    pub model_id: Text,
    pub temperature: f32,
    pub max_reply_tokens: u32,
    pub client: ChatClient,
}

/// The environment function: scripted (pure, deterministic) or remote.
#[derive(Debug, Clone)]
pub enum EnvBackend {
    Scripted,
    Remote(RemoteEnv),
}

impl EnvBackend {
    /// Turn one doctor action into an observation, and a verdict when the
    /// action is a diagnosis. Dispatches on the action kind.
    pub fn step(
        &self,
        state: &State,
        action: &Action,
        scenario: &Scenario,
    ) -> Result<StepOutcome, EnvError> {
        match action.kind {
            ActionKind::PatientQuestion => {
                let content = match self {
                    EnvBackend::Scripted => patient_respond(&action.payload, &scenario.patient)?,
                    EnvBackend::Remote(remote) => {
                        remote.patient_reply(state, &action.payload, &scenario.patient)?
                    }
                };
                Ok(StepOutcome {
                    observation: Observation {
                        source: ObservationSource::Patient,
                        content,
                    },
                    verdict: None,
                })
            }
            ActionKind::TestRequest => {
                let content = match self {
                    EnvBackend::Scripted => measurement_respond(&action.payload, &scenario.tests),
                    EnvBackend::Remote(remote) => {
                        remote.measurement_reply(&action.payload, &scenario.tests)?
                    }
                };
                Ok(StepOutcome {
                    observation: Observation {
                        source: ObservationSource::Measurement,
                        content,
                    },
                    verdict: None,
                })
            }
            ActionKind::Diagnosis => {
                let verdict = moderator_evaluate(&action.payload, &scenario.truth);
                Ok(StepOutcome {
                    observation: Observation {
                        source: ObservationSource::Moderator,
                        content: verdict.message().to_string(),
                    },
                    verdict: Some(verdict),
                })
            }
        }
    }
}

/// The environment function as a plain observation. Diagnosis actions yield
/// the moderator's verdict text as the observation content.
pub fn env_step(
    state: &State,
    action: &Action,
    scenario: &Scenario,
) -> Result<Observation, EnvError> {
    EnvBackend::Scripted
        .step(state, action, scenario)
        .map(|outcome| outcome.observation)
}

impl RemoteEnv {
    fn complete(&self, messages: Vec<ChatMessage>) -> Result<Text, ChatError> {
        let request = ChatRequest::new(
            &self.model_id,
            messages,
            self.temperature,
            self.max_reply_tokens,
        )?;
        self.client.complete(&request)
    }

    fn patient_reply(
        &self,
        state: &State,
        question: &str,
        script: &PatientScript,
    ) -> Result<Text, EnvError> {
        if question.trim().is_empty() {
            return Err(EnvError::EmptyQuestion);
        }
        let mut system = String::from(PATIENT_PREAMBLE);
        system.push_str("\n\nYour demographics: ");
        system.push_str(&script.demographics);
        system.push_str("\nYour history: ");
        system.push_str(&script.history);
        if !script.symptom_rules.is_empty() {
            system.push_str("\nThings that are true of you:\n");
            for rule in &script.symptom_rules {
                system.push_str("- ");
                system.push_str(&rule.statement);
                system.push('\n');
            }
        }
        let mut messages = vec![ChatMessage::new(ChatRole::System, system)];
        for (action, observation) in state.dialogue_pairs() {
            if observation.role == Role::Patient {
                messages.push(ChatMessage::new(ChatRole::User, action.content.clone()));
                messages.push(ChatMessage::new(
                    ChatRole::Assistant,
                    observation.content.clone(),
                ));
            }
        }
        messages.push(ChatMessage::new(ChatRole::User, question.to_string()));
        Ok(self.complete(messages)?)
    }

    fn measurement_reply(&self, test_name: &str, table: &TestTable) -> Result<Text, EnvError> {
        let mut system = String::from(MEASUREMENT_PREAMBLE);
        system.push_str("\n\nKnown results:\n");
        for (name, result) in &table.entries {
            system.push_str("- ");
            system.push_str(name);
            system.push_str(": ");
            system.push_str(result);
            system.push('\n');
        }
        system.push_str("For any other test report: ");
        system.push_str(&table.default_result);
        let messages = vec![
            ChatMessage::new(ChatRole::System, system),
            ChatMessage::new(ChatRole::User, test_name.to_string()),
        ];
        Ok(self.complete(messages)?)
    }
}
