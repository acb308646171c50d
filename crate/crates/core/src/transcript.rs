//! Line-delimited transcript persistence and replay.
//!
//! Every progress event becomes one JSON line with exactly the keys
//! episode_id, trial, step, role, kind, content, ts (RFC 3339). Files are
//! flushed whenever a verdict is written, so a crash loses at most the tail
//! of the current trial. [`replay_episode`] reconstructs the full
//! [`EpisodeResult`] from persisted events without touching any backend;
//! everything except timestamps is recoverable.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::SecondsFormat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EpisodeResult, ProgressEvent, TrialRecord};
use crate::policy::classify_action;
use crate::state::{
    concat_state, Adaptation, Observation, ObservationSource, Return, Role, State, Text,
};

/// One persisted line. `trial` counts from 1; within a trial an action and
/// its observation share a `step`, and events are ordered by
/// (trial, step, kind rank).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEvent {
    pub episode_id: Text,
    pub trial: u32,
    pub step: u32,
    pub role: Text,
    pub kind: Text,
    pub content: Text,
    pub ts: Text,
}

const KIND_EPISODE_START: &str = "episode_start";
const KIND_TRIAL_START: &str = "trial_start";
const KIND_ACTION: &str = "action";
const KIND_OBSERVATION: &str = "observation";
const KIND_VERDICT: &str = "verdict";
const KIND_ADAPTATION: &str = "adaptation";

fn kind_rank(kind: &str) -> Option<u8> {
    match kind {
        KIND_EPISODE_START => Some(0),
        KIND_TRIAL_START => Some(1),
        KIND_ACTION => Some(2),
        KIND_OBSERVATION => Some(3),
        KIND_VERDICT => Some(4),
        KIND_ADAPTATION => Some(5),
        _ => None,
    }
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("cannot access transcript {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed transcript event at line {line}: {detail}")]
    MalformedEvent { line: usize, detail: String },
    #[error("incomplete transcript: {0}")]
    IncompleteTranscript(String),
    #[error("transcript events out of order: {0}")]
    OutOfOrderEvents(String),
}

/// Writes one episode's events to a sink as they happen.
///
/// The writing interface is infallible so it can sit behind the engine's
/// event sink; the first I/O error is held and surfaced by [`finish`].
///
/// [`finish`]: TranscriptWriter::finish
pub struct TranscriptWriter<W: Write> {
    episode_id: Text,
    sink: W,
    deterministic_ts: bool,
    counter: u64,
    last_step: u32,
    error: Option<io::Error>,
}

impl TranscriptWriter<BufWriter<File>> {
    /// Open a buffered transcript file, truncating any previous content.
    pub fn to_path(
        episode_id: impl Into<Text>,
        path: &Path,
        deterministic_ts: bool,
    ) -> io::Result<TranscriptWriter<BufWriter<File>>> {
        let file = File::create(path)?;
        Ok(TranscriptWriter::new(
            episode_id,
            BufWriter::new(file),
            deterministic_ts,
        ))
    }
}

impl<W: Write> TranscriptWriter<W> {
    /// With `deterministic_ts`, timestamps are a per-file counter of seconds
    /// since the epoch instead of wall-clock time.
    pub fn new(episode_id: impl Into<Text>, sink: W, deterministic_ts: bool) -> TranscriptWriter<W> {
        TranscriptWriter {
            episode_id: episode_id.into(),
            sink,
            deterministic_ts,
            counter: 0,
            last_step: 0,
            error: None,
        }
    }

    fn timestamp(&mut self) -> Text {
        if self.deterministic_ts {
            let ts = chrono::DateTime::from_timestamp(self.counter as i64, 0)
                .expect("counter timestamps stay in range")
                .to_rfc3339_opts(SecondsFormat::Secs, true);
            self.counter += 1;
            ts
        } else {
            chrono::Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true)
        }
    }

    /// Persist one event. Errors are held; check [`finish`](Self::finish).
    pub fn record(&mut self, event: &ProgressEvent) {
        if self.error.is_some() {
            return;
        }
        let (trial, step, role, kind, content) = match event {
            ProgressEvent::EpisodeStarted {
                initial_context, ..
            } => (1, 0, Role::System, KIND_EPISODE_START, initial_context.clone()),
            ProgressEvent::TrialStarted { trial } => (
                *trial,
                0,
                Role::System,
                KIND_TRIAL_START,
                format!("trial {trial}"),
            ),
            ProgressEvent::Action { trial, step, content } => {
                (*trial, *step, Role::Doctor, KIND_ACTION, content.clone())
            }
            ProgressEvent::Observation {
                trial,
                step,
                role,
                content,
            } => (*trial, *step, *role, KIND_OBSERVATION, content.clone()),
            ProgressEvent::Verdict { trial, step, message } => {
                (*trial, *step, Role::Moderator, KIND_VERDICT, message.clone())
            }
            ProgressEvent::Adaptation { trial_origin, content } => (
                *trial_origin,
                self.last_step + 1,
                Role::Adaptation,
                KIND_ADAPTATION,
                content.clone(),
            ),
        };
        self.last_step = step;
        let record = TranscriptEvent {
            episode_id: self.episode_id.clone(),
            trial,
            step,
            role: role.label().to_string(),
            kind: kind.to_string(),
            content,
            ts: self.timestamp(),
        };
        let result = write_line(&mut self.sink, &record).and_then(|()| {
            if record.kind == KIND_VERDICT {
                self.sink.flush()
            } else {
                Ok(())
            }
        });
        if let Err(error) = result {
            self.error = Some(error);
        }
    }

    /// Flush and hand back the sink, surfacing any deferred write error.
    pub fn finish(mut self) -> io::Result<W> {
        if let Some(error) = self.error.take() {
            return Err(error);
        }
        self.sink.flush()?;
        Ok(self.sink)
    }
}

fn write_line<W: Write>(sink: &mut W, event: &TranscriptEvent) -> io::Result<()> {
    let line = serde_json::to_string(event).map_err(io::Error::other)?;
    sink.write_all(line.as_bytes())?;
    sink.write_all(b"\n")
}

/// Parse a transcript from a reader, one JSON event per line.
pub fn read_events<R: BufRead>(reader: R) -> Result<Vec<TranscriptEvent>, TranscriptError> {
    let mut events = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| TranscriptError::Io {
            path: "<reader>".to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let event: TranscriptEvent =
            serde_json::from_str(&line).map_err(|e| TranscriptError::MalformedEvent {
                line: index + 1,
                detail: e.to_string(),
            })?;
        events.push(event);
    }
    Ok(events)
}

/// Read all events of the transcript file at `path`.
pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptEvent>, TranscriptError> {
    let file = File::open(path).map_err(|source| TranscriptError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_events(BufReader::new(file))
}

fn out_of_order(detail: impl Into<String>) -> TranscriptError {
    TranscriptError::OutOfOrderEvents(detail.into())
}

fn incomplete(detail: impl Into<String>) -> TranscriptError {
    TranscriptError::IncompleteTranscript(detail.into())
}

/// Reconstruct the episode a transcript records: every trial's state,
/// return, adaptation, and counts, and the episode outcome. Equal to the
/// live result on all non-timestamp fields.
pub fn replay_episode(events: &[TranscriptEvent]) -> Result<EpisodeResult, TranscriptError> {
    let first = events
        .first()
        .ok_or_else(|| incomplete("transcript has no events"))?;
    if first.kind != KIND_EPISODE_START {
        return Err(incomplete("transcript does not begin with episode_start"));
    }
    let episode_id = &first.episode_id;
    let initial_context = &first.content;

    let mut previous_key: Option<(u32, u32, u8)> = None;
    for event in events {
        if event.episode_id != *episode_id {
            return Err(out_of_order(format!(
                "mixed episode ids '{}' and '{}'",
                episode_id, event.episode_id
            )));
        }
        let rank = kind_rank(&event.kind).ok_or_else(|| TranscriptError::MalformedEvent {
            line: 0,
            detail: format!("unknown event kind '{}'", event.kind),
        })?;
        let key = (event.trial, event.step, rank);
        if let Some(previous) = previous_key {
            if key < previous {
                return Err(out_of_order(format!(
                    "event (trial {}, step {}, kind {}) appears after (trial {}, step {}, rank {})",
                    event.trial, event.step, event.kind, previous.0, previous.1, previous.2
                )));
            }
        }
        previous_key = Some(key);
    }

    let s0 = State::initial(1, initial_context.clone());
    let mut adaptations: Vec<Adaptation> = Vec::new();
    let mut trials: Vec<TrialRecord> = Vec::new();
    let mut rest = &events[1..];

    while !rest.is_empty() {
        let header = &rest[0];
        if header.kind != KIND_TRIAL_START {
            return Err(out_of_order(format!(
                "expected trial_start, found {}",
                header.kind
            )));
        }
        let trial = header.trial;
        if trial != trials.len() as u32 + 1 {
            return Err(out_of_order(format!(
                "expected trial {}, found trial {}",
                trials.len() + 1,
                trial
            )));
        }
        rest = &rest[1..];

        let mut state = if adaptations.is_empty() {
            s0.clone()
        } else {
            s0.with_adaptations(trial, &adaptations)
        };
        let mut question_count = 0u32;
        let mut test_count = 0u32;

        let return_value = loop {
            let Some(event) = rest.first() else {
                return Err(incomplete(format!("trial {trial} has no verdict")));
            };
            match event.kind.as_str() {
                KIND_ACTION => {
                    let Some(observation_event) = rest.get(1) else {
                        return Err(incomplete(format!(
                            "trial {trial} ends with an unanswered action"
                        )));
                    };
                    if observation_event.kind != KIND_OBSERVATION {
                        return Err(out_of_order(format!(
                            "action at trial {trial} step {} is followed by {}",
                            event.step, observation_event.kind
                        )));
                    }
                    if event.step != state.step_index() {
                        return Err(out_of_order(format!(
                            "expected step {}, found action step {}",
                            state.step_index(),
                            event.step
                        )));
                    }
                    let action = classify_action(&event.content).map_err(|e| {
                        TranscriptError::MalformedEvent {
                            line: 0,
                            detail: format!("unclassifiable action: {e}"),
                        }
                    })?;
                    let source = match Role::from_label(&observation_event.role) {
                        Some(Role::Patient) => ObservationSource::Patient,
                        Some(Role::Measurement) => ObservationSource::Measurement,
                        Some(Role::Moderator) => ObservationSource::Moderator,
                        _ => {
                            return Err(TranscriptError::MalformedEvent {
                                line: 0,
                                detail: format!(
                                    "observation role '{}' is not an environment agent",
                                    observation_event.role
                                ),
                            })
                        }
                    };
                    match action.kind {
                        crate::state::ActionKind::PatientQuestion => question_count += 1,
                        crate::state::ActionKind::TestRequest => test_count += 1,
                        crate::state::ActionKind::Diagnosis => {}
                    }
                    state = concat_state(
                        &state,
                        &action,
                        &Observation {
                            source,
                            content: observation_event.content.clone(),
                        },
                    );
                    rest = &rest[2..];
                }
                KIND_VERDICT => {
                    let parsed = Return::from_message(&event.content).ok_or_else(|| {
                        TranscriptError::MalformedEvent {
                            line: 0,
                            detail: format!("unrecognized verdict message '{}'", event.content),
                        }
                    })?;
                    rest = &rest[1..];
                    break parsed;
                }
                other => {
                    return Err(out_of_order(format!(
                        "unexpected {other} event inside trial {trial}"
                    )));
                }
            }
        };

        trials.push(TrialRecord {
            trial_index: trial,
            transcript: state,
            adaptation_used: adaptations.last().cloned(),
            return_value,
            question_count,
            test_count,
        });

        if let Some(event) = rest.first() {
            if event.kind == KIND_ADAPTATION {
                if event.trial != trial {
                    return Err(out_of_order(format!(
                        "adaptation for trial {} appears after trial {trial}",
                        event.trial
                    )));
                }
                let adaptation = Adaptation::new(event.trial, event.content.clone()).map_err(
                    |e| TranscriptError::MalformedEvent {
                        line: 0,
                        detail: format!("invalid adaptation: {e}"),
                    },
                )?;
                adaptations.push(adaptation);
                rest = &rest[1..];
            }
        }
    }

    if trials.is_empty() {
        return Err(incomplete("transcript has no trials"));
    }
    Ok(EpisodeResult::from_trials(episode_id.clone(), trials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::Verdict;

    fn sample_events() -> Vec<ProgressEvent> {
        vec![
            ProgressEvent::EpisodeStarted {
                scenario_id: "case-x".to_string(),
                initial_context: "ctx".to_string(),
            },
            ProgressEvent::TrialStarted { trial: 1 },
            ProgressEvent::Action {
                trial: 1,
                step: 0,
                content: "Any double vision?".to_string(),
            },
            ProgressEvent::Observation {
                trial: 1,
                step: 0,
                role: Role::Patient,
                content: "Yes.".to_string(),
            },
            ProgressEvent::Action {
                trial: 1,
                step: 1,
                content: "DIAGNOSIS READY: Stroke".to_string(),
            },
            ProgressEvent::Observation {
                trial: 1,
                step: 1,
                role: Role::Moderator,
                content: "FAILED: diagnosis 'Stroke' is incorrect.".to_string(),
            },
            ProgressEvent::Verdict {
                trial: 1,
                step: 1,
                message: "FAILED: diagnosis 'Stroke' is incorrect.".to_string(),
            },
            ProgressEvent::Adaptation {
                trial_origin: 1,
                content: "Check the antibody panel.".to_string(),
            },
            ProgressEvent::TrialStarted { trial: 2 },
            ProgressEvent::Action {
                trial: 2,
                step: 0,
                content: "DIAGNOSIS READY: Myasthenia gravis".to_string(),
            },
            ProgressEvent::Observation {
                trial: 2,
                step: 0,
                role: Role::Moderator,
                content: "OK".to_string(),
            },
            ProgressEvent::Verdict {
                trial: 2,
                step: 0,
                message: "OK".to_string(),
            },
        ]
    }

    fn write_all(events: &[ProgressEvent]) -> Vec<TranscriptEvent> {
        let mut buffer: Vec<u8> = Vec::new();
        {
            let mut writer = TranscriptWriter::new("case-x", &mut buffer, true);
            for event in events {
                writer.record(event);
            }
            writer.finish().unwrap();
        }
        read_events(BufReader::new(&buffer[..])).unwrap()
    }

    #[test]
    fn events_round_trip_through_json_lines() {
        let events = write_all(&sample_events());
        assert_eq!(events.len(), 12);
        assert_eq!(events[0].kind, "episode_start");
        assert_eq!(events[0].content, "ctx");
        assert_eq!(events[0].ts, "1970-01-01T00:00:00Z");
        assert_eq!(events[1].ts, "1970-01-01T00:00:01Z");
        let line = serde_json::to_string(&events[0]).unwrap();
        let back: TranscriptEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(back, events[0]);
    }

    #[test]
    fn written_lines_carry_exactly_the_expected_keys() {
        let mut buffer: Vec<u8> = Vec::new();
        {
            let mut writer = TranscriptWriter::new("case-x", &mut buffer, true);
            writer.record(&sample_events()[0]);
            writer.finish().unwrap();
        }
        let text = String::from_utf8(buffer).unwrap();
        let value: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        let object = value.as_object().unwrap();
        let mut keys: Vec<&str> = object.keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            vec!["content", "episode_id", "kind", "role", "step", "trial", "ts"]
        );
    }

    #[test]
    fn replay_reconstructs_trials_and_counts() {
        let events = write_all(&sample_events());
        let result = replay_episode(&events).unwrap();
        assert_eq!(result.scenario_id, "case-x");
        assert_eq!(result.trials.len(), 2);
        assert_eq!(result.trials[0].question_count, 1);
        assert_eq!(result.trials[0].test_count, 0);
        assert_eq!(result.trials[0].return_value.verdict(), Verdict::Failed);
        assert_eq!(result.trials[1].return_value.verdict(), Verdict::Ok);
        assert_eq!(result.solving_trial, Some(2));
        assert_eq!(
            result.trials[1].adaptation_used.as_ref().unwrap().content,
            "Check the antibody panel."
        );
        assert_eq!(
            result.trials[1].transcript.adaptation_contents(),
            vec!["Check the antibody panel."]
        );
    }

    #[test]
    fn replay_rejects_missing_verdict() {
        let mut events = write_all(&sample_events());
        events.pop();
        let err = replay_episode(&events).unwrap_err();
        assert!(matches!(err, TranscriptError::IncompleteTranscript(_)));
    }

    #[test]
    fn replay_rejects_reordered_events() {
        let mut events = write_all(&sample_events());
        events.swap(2, 3);
        let err = replay_episode(&events).unwrap_err();
        assert!(matches!(err, TranscriptError::OutOfOrderEvents(_)));
    }

    #[test]
    fn replay_rejects_malformed_lines() {
        let text = "{\"this is\": \"not an event\"}\n";
        let err = read_events(BufReader::new(text.as_bytes())).unwrap_err();
        assert!(matches!(err, TranscriptError::MalformedEvent { line: 1, .. }));
    }

    #[test]
    fn verdicts_flush_the_sink() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episode.jsonl");
        let mut writer = TranscriptWriter::to_path("case-x", &path, true).unwrap();
        let events = sample_events();
        for event in &events[..7] {
            writer.record(event);
        }
        // The writer is still open and unflushed, but the verdict forced
        // everything so far onto disk.
        let persisted = load_transcript(&path).unwrap();
        assert_eq!(persisted.len(), 7);
        assert_eq!(persisted.last().unwrap().kind, "verdict");
        writer.finish().unwrap();
    }

    #[test]
    fn wall_clock_timestamps_parse_as_rfc3339() {
        let mut buffer: Vec<u8> = Vec::new();
        {
            let mut writer = TranscriptWriter::new("case-x", &mut buffer, false);
            writer.record(&sample_events()[0]);
            writer.finish().unwrap();
        }
        let events = read_events(BufReader::new(&buffer[..])).unwrap();
        assert!(chrono::DateTime::parse_from_rfc3339(&events[0].ts).is_ok());
    }
}
