use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, BackendError, ChatBackend, ChatRequest, Completion};

/// Recorded reply keyed by `(thread digest, message digest)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub thread_digest: String,
    pub message_digest: String,
    pub reply: String,
}

/// Scripted fallback for requests with no recorded fixture.
///
/// `seed` is derived from the request digests so replies stay deterministic.
pub trait Responder: Send + Sync {
    fn respond(&self, request: &ChatRequest, seed: u64) -> Option<String>;
}

/// Offline backend replaying fixtures, then consulting an optional responder.
#[derive(Default)]
pub struct MockBackend {
    fixtures: HashMap<(String, String), String>,
    responder: Option<Arc<dyn Responder>>,
    max_context_tokens: Option<u64>,
    scripted_failures: Mutex<VecDeque<BackendError>>,
    calls: Mutex<u64>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixture(mut self, thread_digest: &str, message_digest: &str, reply: impl Into<String>) -> Self {
        self.fixtures
            .insert((thread_digest.to_string(), message_digest.to_string()), reply.into());
        self
    }

    pub fn with_fixtures(mut self, records: impl IntoIterator<Item = FixtureRecord>) -> Self {
        for r in records {
            self.fixtures.insert((r.thread_digest, r.message_digest), r.reply);
        }
        self
    }

    pub fn with_responder(mut self, responder: Arc<dyn Responder>) -> Self {
        self.responder = Some(responder);
        self
    }

    pub fn with_context_limit(mut self, tokens: u64) -> Self {
        self.max_context_tokens = Some(tokens);
        self
    }

    /// Errors returned, in order, by the next calls before normal replies resume.
    pub fn with_failures(self, failures: impl IntoIterator<Item = BackendError>) -> Self {
        self.scripted_failures.lock().unwrap().extend(failures);
        self
    }

    pub fn load_fixtures(path: &Path) -> std::io::Result<Vec<FixtureRecord>> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
            );
        }
        Ok(out)
    }

    pub fn calls(&self) -> u64 {
        *self.calls.lock().unwrap()
    }
}

fn seed_from(request: &ChatRequest) -> u64 {
    let h = crate::types::sha256_hex(format!("{}:{}", request.thread_digest, request.message_digest));
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        *self.calls.lock().unwrap() += 1;
        if let Some(err) = self.scripted_failures.lock().unwrap().pop_front() {
            return Err(err);
        }
        let prompt_tokens: u64 = request.messages.iter().map(|m| estimate_tokens(&m.content)).sum();
        if let Some(limit) = self.max_context_tokens {
            if prompt_tokens > limit {
                return Err(BackendError::ContextLength { prompt_tokens, limit });
            }
        }
        let key = (request.thread_digest.clone(), request.message_digest.clone());
        let text = match self.fixtures.get(&key) {
            Some(t) => t.clone(),
            None => self
                .responder
                .as_ref()
                .and_then(|r| r.respond(request, seed_from(request)))
                .ok_or_else(|| {
                    BackendError::Unavailable(format!(
                        "no fixture for thread {} (thread digest {}, message digest {})",
                        request.thread_id, request.thread_digest, request.message_digest
                    ))
                })?,
        };
        Ok(Completion {
            completion_tokens: estimate_tokens(&text),
            prompt_tokens,
            text,
        })
    }
}

/// Wraps a backend and captures every successful exchange as a fixture.
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<Vec<FixtureRecord>>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    pub fn fixtures(&self) -> Vec<FixtureRecord> {
        self.recorded.lock().unwrap().clone()
    }

    pub fn write_fixtures(&self, path: &Path) -> std::io::Result<()> {
        let mut f = File::create(path)?;
        for r in self.recorded.lock().unwrap().iter() {
            writeln!(f, "{}", serde_json::to_string(r).expect("serializable"))?;
        }
        Ok(())
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let c = self.inner.complete(request)?;
        self.recorded.lock().unwrap().push(FixtureRecord {
            thread_digest: request.thread_digest.clone(),
            message_digest: request.message_digest.clone(),
            reply: c.text.clone(),
        });
        Ok(c)
    }
}
