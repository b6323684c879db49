//! Chat-completion client: dialogue threads, pluggable backends, retries, journaling
//! and usage accounting.

mod mock;
mod openai;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::SeedStyle;
use crate::types::sha256_hex;

pub use mock::{FixtureRecord, MockBackend, RecordingBackend, Responder};
pub use openai::{OpenAiCompatBackend, ENV_API_BASE, ENV_API_KEY, ENV_MODEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ThreadError {
    #[error("thread {thread}: expected a {expected} message next, got {got}")]
    RoleOrder {
        thread: String,
        expected: &'static str,
        got: &'static str,
    },
}

/// An append-only conversation. After an optional leading system message, roles
/// alternate user / assistant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueThread {
    thread_id: String,
    messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    style_tag: Option<SeedStyle>,
}

impl DialogueThread {
    pub fn new(thread_id: impl Into<String>, style_tag: Option<SeedStyle>) -> Self {
        DialogueThread {
            thread_id: thread_id.into(),
            messages: Vec::new(),
            style_tag,
        }
    }

    pub fn thread_id(&self) -> &str {
        &self.thread_id
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn style_tag(&self) -> Option<SeedStyle> {
        self.style_tag
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    fn expected_next(&self) -> Role {
        match self.messages.last().map(|m| m.role) {
            None | Some(Role::System) | Some(Role::Assistant) => Role::User,
            Some(Role::User) => Role::Assistant,
        }
    }

    pub fn push(&mut self, message: ChatMessage) -> Result<(), ThreadError> {
        let ok = match message.role {
            Role::System => self.messages.is_empty(),
            r => r == self.expected_next(),
        };
        if !ok {
            let expected = if self.messages.is_empty() { "system or user" } else { self.expected_next().as_str() };
            return Err(ThreadError::RoleOrder {
                thread: self.thread_id.clone(),
                expected,
                got: message.role.as_str(),
            });
        }
        self.messages.push(message);
        Ok(())
    }

    /// Digest of the thread id and its full history.
    pub fn digest(&self) -> String {
        let mut buf = String::new();
        buf.push_str(&self.thread_id);
        for m in &self.messages {
            buf.push('\u{1e}');
            buf.push_str(m.role.as_str());
            buf.push('\u{1f}');
            buf.push_str(&m.content);
        }
        sha256_hex(buf)
    }

    /// Copy of the history under a new id.
    pub fn fork(&self, new_id: impl Into<String>) -> Self {
        DialogueThread {
            thread_id: new_id.into(),
            messages: self.messages.clone(),
            style_tag: self.style_tag,
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Sampling parameters sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub presence_penalty: f64,
}

impl Default for ChatParams {
    fn default() -> Self {
        ChatParams {
            model: "gpt-4o-2024-05-13".into(),
            temperature: 0.6,
            max_tokens: 4096,
            presence_penalty: 0.0,
        }
    }
}

impl ChatParams {
    /// Greedy decoding used by the LLM baselines.
    pub fn baseline(model: impl Into<String>) -> Self {
        ChatParams {
            model: model.into(),
            temperature: 0.0,
            ..ChatParams::default()
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidParams(format!("temperature {} < 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidParams("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// One request as seen by a backend.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub thread_id: String,
    /// Digest of the thread before the new user message was appended.
    pub thread_digest: String,
    pub message_digest: String,
    /// Full history including the new user message.
    pub messages: Vec<ChatMessage>,
    pub params: ChatParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("context length exceeded: prompt has {prompt_tokens} tokens, limit is {limit}")]
    ContextLength { prompt_tokens: u64, limit: u64 },
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError>;
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("giving up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: BackendError },
    #[error("context length exceeded: prompt has {prompt_tokens} tokens, limit is {limit}")]
    ContextLength { prompt_tokens: u64, limit: u64 },
    #[error("backend returned an empty completion for thread {0}")]
    EmptyCompletion(String),
    #[error(transparent)]
    Backend(BackendError),
    #[error(transparent)]
    Thread(#[from] ThreadError),
    #[error("invalid chat parameters: {0}")]
    InvalidParams(String),
    #[error("journal: {0}")]
    Journal(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1), capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// USD per million tokens (input, output) for known models; unknown models cost 0.
pub fn price_per_million(model: &str) -> (f64, f64) {
    if model.starts_with("gpt-4o-mini") {
        (0.15, 0.60)
    } else if model.starts_with("gpt-4o") {
        (5.0, 15.0)
    } else if model.starts_with("gpt-3.5-turbo") {
        (0.5, 1.5)
    } else if model.starts_with("gpt-4") {
        (30.0, 60.0)
    } else {
        (0.0, 0.0)
    }
}

/// Rough token estimate used when a backend reports no usage (4 chars per token).
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub thread_id: String,
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageLedger {
    records: Vec<UsageRecord>,
    totals: UsageTotals,
}

impl UsageLedger {
    pub fn record(&mut self, rec: UsageRecord) {
        self.totals.calls += 1;
        self.totals.prompt_tokens += rec.prompt_tokens;
        self.totals.completion_tokens += rec.completion_tokens;
        self.totals.cost_usd += rec.cost_usd;
        self.records.push(rec);
    }

    pub fn records(&self) -> &[UsageRecord] {
        &self.records
    }

    pub fn totals(&self) -> &UsageTotals {
        &self.totals
    }
}

/// One journal line per completed call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub thread_id: String,
    pub thread_digest: String,
    pub message_digest: String,
    pub request: JournalRequest,
    pub response: String,
    pub usage: UsageRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub presence_penalty: f64,
}

pub fn read_journal(path: &Path) -> std::io::Result<Vec<JournalRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Pool {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Pool {
    fn new(size: usize) -> Self {
        Pool {
            free: Mutex::new(size.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PoolGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PoolGuard(self)
    }
}

struct PoolGuard<'a>(&'a Pool);

impl Drop for PoolGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub const DEFAULT_POOL_SIZE: usize = 4;

/// Client driving dialogue threads against a backend.
///
/// Clones share the backend and request pool; [`LlmClient::scoped`] yields a client
/// with its own journal file and usage ledger.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    pool: Arc<Pool>,
    retry: RetryPolicy,
    ledger: Arc<Mutex<UsageLedger>>,
    journal: Option<Arc<Mutex<PathBuf>>>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        LlmClient {
            backend,
            pool: Arc::new(Pool::new(DEFAULT_POOL_SIZE)),
            retry: RetryPolicy::default(),
            ledger: Arc::new(Mutex::new(UsageLedger::default())),
            journal: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_pool_size(mut self, size: usize) -> Self {
        self.pool = Arc::new(Pool::new(size));
        self
    }

    pub fn with_journal(mut self, path: impl Into<PathBuf>) -> Self {
        self.journal = Some(Arc::new(Mutex::new(path.into())));
        self
    }

    /// Shares backend and pool; fresh ledger; journal at `journal`.
    pub fn scoped(&self, journal: impl Into<PathBuf>) -> Self {
        LlmClient {
            backend: Arc::clone(&self.backend),
            pool: Arc::clone(&self.pool),
            retry: self.retry,
            ledger: Arc::new(Mutex::new(UsageLedger::default())),
            journal: Some(Arc::new(Mutex::new(journal.into()))),
        }
    }

    pub fn ledger(&self) -> UsageLedger {
        self.ledger.lock().unwrap().clone()
    }

    /// Sends `user_message` with the full thread history, appends both turns and
    /// returns the reply. The thread is left untouched on error.
    pub fn chat(&self, thread: &mut DialogueThread, user_message: &str, params: &ChatParams) -> Result<String, LlmError> {
        params.validate()?;
        let mut next = thread.clone();
        next.push(ChatMessage::new(Role::User, user_message))?;
        let request = ChatRequest {
            thread_id: thread.thread_id().to_string(),
            thread_digest: thread.digest(),
            message_digest: sha256_hex(user_message),
            messages: next.messages().to_vec(),
            params: params.clone(),
        };
        let completion = self.complete_with_retry(&request)?;
        if completion.text.trim().is_empty() {
            return Err(LlmError::EmptyCompletion(request.thread_id));
        }
        let (pin, pout) = price_per_million(&params.model);
        let usage = UsageRecord {
            thread_id: request.thread_id.clone(),
            model: params.model.clone(),
            prompt_tokens: completion.prompt_tokens,
            completion_tokens: completion.completion_tokens,
            cost_usd: (completion.prompt_tokens as f64 * pin + completion.completion_tokens as f64 * pout) / 1e6,
        };
        if let Some(journal) = &self.journal {
            let record = JournalRecord {
                thread_id: request.thread_id.clone(),
                thread_digest: request.thread_digest.clone(),
                message_digest: request.message_digest.clone(),
                request: JournalRequest {
                    model: params.model.clone(),
                    messages: request.messages.clone(),
                    temperature: params.temperature,
                    max_tokens: params.max_tokens,
                    presence_penalty: params.presence_penalty,
                },
                response: completion.text.clone(),
                usage: usage.clone(),
            };
            let path = journal.lock().unwrap();
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(&*path)?;
            writeln!(f, "{}", serde_json::to_string(&record).expect("serializable"))?;
        }
        self.ledger.lock().unwrap().record(usage);
        next.push(ChatMessage::new(Role::Assistant, completion.text.clone()))?;
        *thread = next;
        Ok(completion.text)
    }

    fn complete_with_retry(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _slot = self.pool.acquire();
                self.backend.complete(request)
            };
            match result {
                Ok(c) => return Ok(c),
                Err(BackendError::ContextLength { prompt_tokens, limit }) => {
                    return Err(LlmError::ContextLength { prompt_tokens, limit })
                }
                Err(e) if e.is_retryable() => {
                    if attempt >= attempts {
                        return Err(LlmError::RetriesExhausted { attempts, last: e });
                    }
                    log::warn!("thread {}: attempt {attempt} failed: {e}", request.thread_id);
                    std::thread::sleep(self.retry.delay(attempt));
                }
                Err(e) => return Err(LlmError::Backend(e)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_role_order() {
        let mut t = DialogueThread::new("t", None);
        assert!(t.push(ChatMessage::new(Role::Assistant, "x")).is_err());
        t.push(ChatMessage::new(Role::System, "sys")).unwrap();
        assert!(t.push(ChatMessage::new(Role::System, "again")).is_err());
        t.push(ChatMessage::new(Role::User, "u")).unwrap();
        assert!(t.push(ChatMessage::new(Role::User, "u2")).is_err());
        t.push(ChatMessage::new(Role::Assistant, "a")).unwrap();
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn digest_depends_on_id_and_history() {
        let a = DialogueThread::new("a", None);
        let b = DialogueThread::new("b", None);
        assert_ne!(a.digest(), b.digest());
        let mut a2 = a.clone();
        a2.push(ChatMessage::new(Role::User, "hi")).unwrap();
        assert_ne!(a.digest(), a2.digest());
        assert_eq!(a2.fork("a").digest(), a2.digest());
    }

    #[test]
    fn params_validation_and_defaults() {
        let p = ChatParams::default();
        assert_eq!(p.temperature, 0.6);
        assert_eq!(p.max_tokens, 4096);
        assert_eq!(p.presence_penalty, 0.0);
        assert_eq!(ChatParams::baseline("m").temperature, 0.0);
        assert!(ChatParams { temperature: -0.1, ..p.clone() }.validate().is_err());
        assert!(ChatParams { max_tokens: 0, ..p }.validate().is_err());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let r = RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 100,
            max_delay_ms: 350,
        };
        assert_eq!(r.delay(1), Duration::from_millis(100));
        assert_eq!(r.delay(2), Duration::from_millis(200));
        assert_eq!(r.delay(3), Duration::from_millis(350));
        assert_eq!(r.delay(64), Duration::from_millis(350));
    }

    #[test]
    fn ledger_totals_are_sums() {
        let mut l = UsageLedger::default();
        for i in 0..5u64 {
            l.record(UsageRecord {
                thread_id: "t".into(),
                model: "gpt-4o".into(),
                prompt_tokens: i,
                completion_tokens: 2 * i,
                cost_usd: i as f64 * 0.5,
            });
        }
        assert_eq!(l.totals().calls, 5);
        assert_eq!(l.totals().prompt_tokens, 10);
        assert_eq!(l.totals().completion_tokens, 20);
        assert_eq!(l.totals().cost_usd, 5.0);
    }
}
