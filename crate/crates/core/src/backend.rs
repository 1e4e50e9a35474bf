//! Model backends: an OpenAI-compatible chat-completions client and a
//! deterministic scripted backend for tests and offline runs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 131_072;
pub const DEFAULT_TEMPERATURE: f64 = 0.6;

pub const ENV_BACKEND_URL: &str = "BACKEND_URL";
pub const ENV_BACKEND_API_KEY: &str = "BACKEND_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("provider unavailable after {attempts} attempts: {last}")]
    ProviderUnavailable { attempts: usize, last: String },
    #[error("prompt needs ~{estimated} tokens, context holds {limit}")]
    ContextOverflow { estimated: usize, limit: usize },
    #[error("authentication rejected: {0}")]
    AuthError(String),
    #[error("no scripted response for prompt fingerprint {0}")]
    ScriptMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    InvalidResponse(String),
    #[error("script: {0}")]
    Script(String),
    #[error("request log: {0}")]
    Io(#[from] std::io::Error),
}

impl BackendError {
    /// Errors that mean the backend cannot be reached at all.
    pub fn is_unreachable(&self) -> bool {
        matches!(
            self,
            BackendError::ProviderUnavailable { .. } | BackendError::AuthError(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_context_tokens: usize,
}

impl CompletionRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    /// Rough token count: four characters per token.
    pub fn estimated_tokens(&self) -> usize {
        let chars = self.system_prompt.chars().count() + self.user_prompt.chars().count();
        chars.div_ceil(4)
    }

    pub fn fingerprint(&self) -> String {
        prompt_fingerprint(&self.system_prompt, &self.user_prompt)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        let estimated = self.estimated_tokens();
        if estimated > self.max_context_tokens {
            return Err(BackendError::ContextOverflow {
                estimated,
                limit: self.max_context_tokens,
            });
        }
        Ok(())
    }
}

/// SHA-256 (hex) of a system/user prompt pair.
pub fn prompt_fingerprint(system_prompt: &str, user_prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(system_prompt.as_bytes());
    h.update([0u8]);
    h.update(user_prompt.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub latency_s: f64,
    /// Set only when the provider stopped on the length limit.
    pub truncated: bool,
}

pub trait Backend: Send + Sync {
    /// Sends an already validated request.
    fn send(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError>;

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        self.send(req)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn send(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).send(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn send(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).send(req)
    }
}

// ---------------------------------------------------------------------------
// Scripted backend

/// How a script entry recognizes a prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptMatcher {
    /// Exact prompt fingerprint.
    Fingerprint(String),
    /// Every fragment occurs in the system or user prompt.
    Contains(Vec<String>),
}

impl PromptMatcher {
    fn matches(&self, req: &CompletionRequest, fingerprint: &str) -> bool {
        match self {
            PromptMatcher::Fingerprint(fp) => fp == fingerprint,
            PromptMatcher::Contains(parts) => parts
                .iter()
                .all(|p| req.system_prompt.contains(p.as_str()) || req.user_prompt.contains(p.as_str())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    pub matcher: PromptMatcher,
    pub responses: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ScriptEntryFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    contains: Vec<String>,
    responses: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ScriptFile {
    version: u32,
    entries: Vec<ScriptEntryFile>,
}

/// Ordered prompt-to-response table; the first matching entry wins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Script {
    entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>, response: impl Into<String>) -> Self {
        self.entries.push(ScriptEntry {
            matcher: PromptMatcher::Fingerprint(fingerprint.into()),
            responses: vec![response.into()],
        });
        self
    }

    pub fn with_contains<S: Into<String>>(
        mut self,
        fragments: impl IntoIterator<Item = S>,
        response: impl Into<String>,
    ) -> Self {
        self.entries.push(ScriptEntry {
            matcher: PromptMatcher::Contains(fragments.into_iter().map(Into::into).collect()),
            responses: vec![response.into()],
        });
        self
    }

    pub fn push(&mut self, entry: ScriptEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        let file: ScriptFile =
            serde_json::from_str(text).map_err(|e| BackendError::Script(e.to_string()))?;
        let mut script = Script::new();
        for (i, e) in file.entries.into_iter().enumerate() {
            let matcher = match (e.fingerprint, e.contains.is_empty()) {
                (Some(fp), true) => PromptMatcher::Fingerprint(fp),
                (None, false) => PromptMatcher::Contains(e.contains),
                _ => {
                    return Err(BackendError::Script(format!(
                        "entry {i}: give exactly one of `fingerprint` or `contains`"
                    )))
                }
            };
            if e.responses.is_empty() {
                return Err(BackendError::Script(format!("entry {i}: no responses")));
            }
            script.push(ScriptEntry {
                matcher,
                responses: e.responses,
            });
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = ScriptFile {
            version: 1,
            entries: self
                .entries
                .iter()
                .map(|e| match &e.matcher {
                    PromptMatcher::Fingerprint(fp) => ScriptEntryFile {
                        fingerprint: Some(fp.clone()),
                        contains: vec![],
                        responses: e.responses.clone(),
                    },
                    PromptMatcher::Contains(c) => ScriptEntryFile {
                        fingerprint: None,
                        contains: c.clone(),
                        responses: e.responses.clone(),
                    },
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("script serializes")
    }
}

/// Replays scripted responses. When an entry holds several responses the
/// choice is a pure function of (seed, prompt fingerprint).
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: Arc<Script>,
    seed: u64,
}

impl ScriptedBackend {
    pub fn new(script: Script, seed: u64) -> Result<Self, BackendError> {
        if script.is_empty() {
            return Err(BackendError::Script("script is empty".into()));
        }
        Ok(Self {
            script: Arc::new(script),
            seed,
        })
    }

    pub fn script(&self) -> &Script {
        &self.script
    }
}

impl Backend for ScriptedBackend {
    fn send(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let fp = req.fingerprint();
        let entry = self
            .script
            .entries
            .iter()
            .find(|e| e.matcher.matches(req, &fp))
            .ok_or_else(|| BackendError::ScriptMiss(fp.clone()))?;
        let pick = if entry.responses.len() == 1 {
            0
        } else {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(fp.as_bytes());
            let digest = h.finalize();
            let v = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            (v % entry.responses.len() as u64) as usize
        };
        Ok(CompletionResult {
            text: entry.responses[pick].clone(),
            latency_s: 0.0,
            truncated: false,
        })
    }
}

// ---------------------------------------------------------------------------
// Remote backend

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay: Duration,
    /// Relative jitter applied to each delay, e.g. 0.2 for +/-20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Nominal delay after the `attempt`-th failure (0-based): 1s, 2s, 4s, ...
    pub fn nominal_delay(&self, attempt: usize) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt as u32)
    }

    fn jittered_delay(&self, attempt: usize) -> Duration {
        let factor = 1.0 + self.jitter * rand::rng().random_range(-1.0..=1.0);
        self.nominal_delay(attempt).mul_f64(factor.max(0.0))
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatPayload<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

enum AttemptError {
    Transient(String),
    Fatal(BackendError),
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    model: String,
    retry: RetryPolicy,
}

impl RemoteBackend {
    pub fn new(base_url: &str, api_key: Option<String>, model: impl Into<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(900))
            .build()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            model: model.into(),
            retry: RetryPolicy::default(),
        })
    }

    /// Reads `BACKEND_URL` and `BACKEND_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, BackendError> {
        let url = std::env::var(ENV_BACKEND_URL)
            .map_err(|_| BackendError::InvalidRequest(format!("{ENV_BACKEND_URL} is not set")))?;
        Self::new(&url, std::env::var(ENV_BACKEND_API_KEY).ok(), model)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, req: &CompletionRequest) -> Result<CompletionResult, AttemptError> {
        let payload = ChatPayload {
            model: &self.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &req.system_prompt,
                },
                ChatMessage {
                    role: "user",
                    content: &req.user_prompt,
                },
            ],
            temperature: req.temperature,
        };
        let started = Instant::now();
        let mut builder = self.client.post(&self.endpoint).json(&payload);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            let body = resp.text().unwrap_or_default();
            return Err(AttemptError::Fatal(BackendError::AuthError(body)));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Transient(format!("HTTP {}", status.as_u16())));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(AttemptError::Fatal(BackendError::Rejected {
                status: status.as_u16(),
                body,
            }));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| AttemptError::Fatal(BackendError::InvalidResponse(e.to_string())))?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            AttemptError::Fatal(BackendError::InvalidResponse("no choices".into()))
        })?;
        Ok(CompletionResult {
            text: choice.message.content.unwrap_or_default(),
            latency_s: started.elapsed().as_secs_f64(),
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }
}

impl Backend for RemoteBackend {
    fn send(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            match self.attempt(req) {
                Ok(r) => return Ok(r),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(msg)) => {
                    tracing::warn!(attempt = attempt + 1, error = %msg, "completion failed");
                    last = msg;
                    if attempt + 1 < self.retry.max_attempts {
                        std::thread::sleep(self.retry.jittered_delay(attempt));
                    }
                }
            }
        }
        Err(BackendError::ProviderUnavailable {
            attempts: self.retry.max_attempts,
            last,
        })
    }
}

// ---------------------------------------------------------------------------
// Configuration and request logging

/// Backend section of an experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Scripted {
        script: PathBuf,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
    Remote {
        model: String,
        #[serde(default = "default_temperature")]
        temperature: f64,
        /// Overrides `BACKEND_URL`.
        #[serde(default)]
        url: Option<String>,
        /// First retry wait; later waits double.
        #[serde(default = "default_retry_delay")]
        retry_base_delay_s: f64,
    },
}

fn default_retry_delay() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl BackendSpec {
    pub fn temperature(&self) -> f64 {
        match self {
            BackendSpec::Scripted { temperature, .. } | BackendSpec::Remote { temperature, .. } => {
                *temperature
            }
        }
    }

    /// Relative script paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path, seed: u64) -> Result<Box<dyn Backend>, BackendError> {
        match self {
            BackendSpec::Scripted { script, .. } => {
                let path = if script.is_absolute() {
                    script.clone()
                } else {
                    base_dir.join(script)
                };
                Ok(Box::new(ScriptedBackend::new(Script::load(&path)?, seed)?))
            }
            BackendSpec::Remote {
                model,
                url,
                retry_base_delay_s,
                ..
            } => {
                if !(*retry_base_delay_s >= 0.0 && retry_base_delay_s.is_finite()) {
                    return Err(BackendError::InvalidRequest(format!(
                        "retry_base_delay_s {retry_base_delay_s} must be >= 0"
                    )));
                }
                let backend = match url {
                    Some(u) => {
                        RemoteBackend::new(u, std::env::var(ENV_BACKEND_API_KEY).ok(), model.clone())?
                    }
                    None => RemoteBackend::from_env(model.clone())?,
                };
                let retry = RetryPolicy {
                    base_delay: Duration::from_secs_f64(*retry_base_delay_s),
                    ..RetryPolicy::default()
                };
                Ok(Box::new(backend.with_retry(retry)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub run_id: String,
    pub node_id: String,
    pub temperature: f64,
    pub prompt_sha256: String,
    pub latency_s: f64,
}

/// Append-only JSON-lines log of completion requests.
#[derive(Debug)]
pub struct RequestLog {
    out: Mutex<BufWriter<File>>,
}

impl RequestLog {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn record(&self, entry: &RequestLogEntry) -> Result<(), BackendError> {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        let mut out = self.out.lock().expect("request log poisoned");
        writeln!(out, "{line}")?;
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_lookup_and_miss() {
        let a = CompletionRequest::new("sys", "A");
        let script = Script::new().with_fingerprint(a.fingerprint(), "x");
        let backend = ScriptedBackend::new(script, 7).unwrap();
        assert_eq!(backend.complete(&a).unwrap().text, "x");
        let b = CompletionRequest::new("sys", "B");
        assert!(matches!(backend.complete(&b), Err(BackendError::ScriptMiss(_))));
    }

    #[test]
    fn scripted_is_deterministic_per_seed() {
        let mut script = Script::new();
        script.push(ScriptEntry {
            matcher: PromptMatcher::Contains(vec!["task".into()]),
            responses: (0..16).map(|i| format!("r{i}")).collect(),
        });
        let req = CompletionRequest::new("sys", "task P");
        let a = ScriptedBackend::new(script.clone(), 7).unwrap();
        let b = ScriptedBackend::new(script.clone(), 7).unwrap();
        let first = a.complete(&req).unwrap();
        assert_eq!(first, a.complete(&req).unwrap());
        assert_eq!(first, b.complete(&req).unwrap());
        assert_eq!(a.script(), &script);
    }

    #[test]
    fn empty_script_rejected() {
        assert!(ScriptedBackend::new(Script::new(), 0).is_err());
    }

    #[test]
    fn context_overflow_is_prechecked() {
        let long = "x".repeat(4 * DEFAULT_MAX_CONTEXT_TOKENS + 4);
        let req = CompletionRequest::new("", long);
        let backend = ScriptedBackend::new(Script::new().with_contains(["x"], "y"), 0).unwrap();
        assert!(matches!(
            backend.complete(&req),
            Err(BackendError::ContextOverflow { .. })
        ));
        let fits = CompletionRequest::new("", "x".repeat(4 * DEFAULT_MAX_CONTEXT_TOKENS));
        assert!(backend.complete(&fits).is_ok());
    }

    #[test]
    fn non_finite_temperature_rejected() {
        let req = CompletionRequest::new("a", "b").with_temperature(f64::NAN);
        assert!(matches!(req.validate(), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn script_json_round_trip() {
        let script = Script::new()
            .with_fingerprint("abc", "one")
            .with_contains(["x", "y"], "two");
        assert_eq!(Script::from_json(&script.to_json()).unwrap(), script);
        assert!(Script::from_json(r#"{"version":1,"entries":[{"responses":["a"]}]}"#).is_err());
    }

    #[test]
    fn backoff_schedule_doubles() {
        let p = RetryPolicy::default();
        let secs: Vec<u64> = (0..5).map(|i| p.nominal_delay(i).as_secs()).collect();
        assert_eq!(secs, vec![1, 2, 4, 8, 16]);
        for _ in 0..100 {
            let d = p.jittered_delay(1).as_secs_f64();
            assert!((1.6..=2.4).contains(&d));
        }
    }
}
