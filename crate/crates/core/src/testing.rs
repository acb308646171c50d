//! Deterministic fixtures shared by unit, integration, and acceptance tests.
//!
//! Everything here is test support that ships in the library so downstream
//! test targets can drive the engine and the wire client without network
//! access: a scripted localhost HTTP stub, canned doctors for the first
//! bundled scenario, and builders for synthetic recorded outcomes.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::engine::{EpisodeResult, TrialRecord};
use crate::policy::{classify_action, DoctorBackend, ScriptedDoctor, ScriptedDoctorPlan};
use crate::state::{concat_state, Observation, ObservationSource, Return, State, Text};

/// The guidance the canned fail-then-succeed doctor emits after its first
/// wrong diagnosis. Trial two selects the adapted plan because this text
/// contains the plan's trigger word.
pub const CASE1_REFLECTION: &str = "If the patient has symptoms such as double vision, difficulty climbing stairs, and upper limb weakness, perform an Acetylcholine Receptor Antibody Test instead of an MRI of the brain and spine.";

/// Path to the bundled scenario file, resolved relative to this crate so
/// tests work from any working directory.
pub fn scenarios_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/scenarios.json")
}

fn diagnosis(text: &str) -> Text {
    format!("DIAGNOSIS READY: {text}")
}

/// Doctor for the first bundled scenario that submits a wrong diagnosis on
/// its default plan and the correct one on its adapted plan.
///
/// The default plan asks 6 questions and orders an MRI before concluding
/// Guillain-Barré Syndrome; the adapted plan asks 12 questions, orders the
/// antibody test, and concludes Myasthenia Gravis.
pub fn case1_fail_then_succeed_doctor() -> DoctorBackend {
    let default_sequence = [
        "Have you noticed any double vision?",
        "Do you have trouble when you climb stairs?",
        "Do your arms feel weak?",
        "Any numbness or tingling in your feet?",
        "Did you have a recent infection or diarrhea?",
        "Is the weakness spreading upward from your legs?",
        "REQUEST TEST: MRI of the brain and spine",
        "DIAGNOSIS READY: Guillain-Barré Syndrome",
    ];
    let adapted_sequence = [
        "Have you noticed any double vision?",
        "Does your eyelid droop?",
        "Do symptoms get worse in the evening?",
        "Do you have trouble when you climb stairs?",
        "Do your arms feel weak?",
        "Does chewing tire you out?",
        "Is swallowing difficult?",
        "Does rest improve the weakness?",
        "Any trouble breathing when lying flat?",
        "Any numbness or tingling?",
        "Any recent infections?",
        "Has your voice changed by nightfall?",
        "REQUEST TEST: Acetylcholine Receptor Antibody Test",
        "DIAGNOSIS READY: Myasthenia Gravis",
    ];
    let plan = ScriptedDoctorPlan::from_texts(&default_sequence, &adapted_sequence, "Acetylcholine")
        .expect("canned plan is valid");
    DoctorBackend::Scripted(ScriptedDoctor {
        plan,
        reflection: CASE1_REFLECTION.to_string(),
    })
}

/// Doctor modelling the unguided workflow on the first bundled scenario:
/// 19 questions and one test before the correct diagnosis. Solves in a
/// single trial but needs `max_steps >= 21`.
pub fn case1_baseline_doctor() -> DoctorBackend {
    let sequence = [
        "Have you noticed any double vision?",
        "Do you have trouble when you climb stairs?",
        "Do your arms feel weak?",
        "Any numbness or tingling in your feet?",
        "Did you have a recent infection or diarrhea?",
        "Is the weakness spreading upward from your legs?",
        "Does your eyelid droop?",
        "Do symptoms get worse in the evening?",
        "Does chewing tire you out?",
        "Is swallowing difficult?",
        "Does rest improve the weakness?",
        "Any trouble breathing when lying flat?",
        "Any recent fevers?",
        "Any weight loss?",
        "Any back pain?",
        "Any bladder or bowel changes?",
        "Any family history of neurologic disease?",
        "Do you take any regular medications?",
        "Has your voice changed by nightfall?",
        "REQUEST TEST: Acetylcholine Receptor Antibody Test",
        "DIAGNOSIS READY: Myasthenia Gravis",
    ];
    let plan = ScriptedDoctorPlan::from_texts(&sequence, &sequence, "unused-trigger")
        .expect("canned plan is valid");
    DoctorBackend::Scripted(ScriptedDoctor {
        plan,
        reflection: "Reconsider which findings discriminate between the candidate conditions."
            .to_string(),
    })
}

/// Shape of a synthetic recorded outcome for report fixtures.
#[derive(Debug, Clone, Copy)]
pub enum RecordedOutcome<'a> {
    Correct { diagnosis: &'a str },
    Wrong { submitted: &'a str },
    NoAnswer,
}

/// Build a one-trial episode whose outcome cell matches `outcome`, without
/// running the engine. Used to reconstruct previously recorded results.
pub fn recorded_episode(scenario_id: &str, outcome: RecordedOutcome) -> EpisodeResult {
    let mut state = State::initial(1, "Recorded outcome replay.");
    let return_value = match outcome {
        RecordedOutcome::Correct { diagnosis: d } => {
            let ret = Return::ok();
            state = diagnose(state, d, ret.message());
            ret
        }
        RecordedOutcome::Wrong { submitted } => {
            let ret = Return::failed(submitted);
            state = diagnose(state, submitted, ret.message());
            ret
        }
        RecordedOutcome::NoAnswer => Return::no_answer(),
    };
    let record = TrialRecord {
        trial_index: 1,
        transcript: state,
        adaptation_used: None,
        return_value,
        question_count: 0,
        test_count: 0,
    };
    EpisodeResult::from_trials(scenario_id, vec![record])
}

fn diagnose(state: State, submitted: &str, verdict_message: &str) -> State {
    let action = classify_action(&diagnosis(submitted)).expect("non-empty action");
    let observation = Observation {
        source: ObservationSource::Moderator,
        content: verdict_message.to_string(),
    };
    concat_state(&state, &action, &observation)
}

/// One scripted reply from the stub server.
#[derive(Debug, Clone)]
pub enum StubReply {
    /// Respond with this HTTP status and JSON body.
    Json { status: u16, body: Text },
    /// Accept the request, then close the socket without responding, which
    /// the client sees as a transport failure.
    CloseAbruptly,
}

impl StubReply {
    pub fn ok(body: impl Into<Text>) -> Self {
        StubReply::Json { status: 200, body: body.into() }
    }

    pub fn status(status: u16, body: impl Into<Text>) -> Self {
        StubReply::Json { status, body: body.into() }
    }
}

/// A well-formed chat completion body with the given assistant content.
pub fn chat_ok_body(content: &str) -> Text {
    serde_json::json!({
        "choices": [
            {"message": {"role": "assistant", "content": content}}
        ]
    })
    .to_string()
}

/// One request as received by the stub server.
#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub method: Text,
    pub path: Text,
    pub headers: Vec<(Text, Text)>,
    pub body: Text,
}

impl RecordedRequest {
    /// Case-insensitive header lookup.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// A scripted localhost HTTP server for exercising the wire client without
/// a network. Replies are served in order; requests are recorded verbatim.
pub struct StubServer {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Bind to an ephemeral localhost port and serve `script` in order.
    /// Requests past the end of the script get status 500.
    pub fn start(script: Vec<StubReply>) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("binding stub listener");
        let addr = listener.local_addr().expect("stub listener address");
        let requests = Arc::new(Mutex::new(Vec::new()));
        let shutdown = Arc::new(AtomicBool::new(false));
        let thread_requests = Arc::clone(&requests);
        let thread_shutdown = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            let mut remaining: VecDeque<StubReply> = script.into();
            for stream in listener.incoming() {
                if thread_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let reply = remaining.pop_front().unwrap_or(StubReply::Json {
                    status: 500,
                    body: "{\"error\":\"stub script exhausted\"}".to_string(),
                });
                let _ = serve_one(stream, reply, &thread_requests);
            }
        });
        StubServer { addr, requests, shutdown, handle: Some(handle) }
    }

    /// Base URL of the stub, suitable as a client endpoint.
    pub fn url(&self) -> Text {
        format!("http://{}", self.addr)
    }

    /// Snapshot of every request received so far.
    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().expect("stub request log").clone()
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().expect("stub request log").len()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_one(
    stream: TcpStream,
    reply: StubReply,
    requests: &Mutex<Vec<RecordedRequest>>,
) -> io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    stream.set_write_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);

    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();

    let mut headers = Vec::new();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            let name = name.trim().to_string();
            let value = value.trim().to_string();
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.parse().unwrap_or(0);
            }
            headers.push((name, value));
        }
    }

    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let body = String::from_utf8_lossy(&body).into_owned();

    requests
        .lock()
        .expect("stub request log")
        .push(RecordedRequest { method, path, headers, body });

    match reply {
        StubReply::CloseAbruptly => Ok(()),
        StubReply::Json { status, body } => {
            let reason = match status {
                200 => "OK",
                401 => "Unauthorized",
                403 => "Forbidden",
                404 => "Not Found",
                429 => "Too Many Requests",
                500 => "Internal Server Error",
                503 => "Service Unavailable",
                _ => "Status",
            };
            let mut stream = reader.into_inner();
            let response = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes())?;
            stream.flush()
        }
    }
}
