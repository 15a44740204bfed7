//! Chat-completion clients: a retrying HTTP client, a scripted mock, and a
//! record/replay layer so experiments can be regenerated offline.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{post_with_retry, HttpTransport, RequestError, RetryPolicy};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Request(#[from] RequestError),
    #[error("malformed chat response: {0}")]
    BadResponse(String),
    #[error("no replay entry for prompt hash {0}")]
    ReplayMiss(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Script {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_tag: String,
}

impl ChatRequest {
    /// Single user-turn request at temperature 0.
    pub fn user(
        model_id: impl Into<String>,
        prompt: impl Into<String>,
        tag: impl Into<String>,
    ) -> Self {
        Self {
            messages: vec![ChatMessage {
                role: Role::User,
                content: prompt.into(),
            }],
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: 256,
            request_tag: tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.messages.last() {
            None => Err(LlmError::InvalidRequest("no messages".into())),
            Some(m) if m.role != Role::User => {
                Err(LlmError::InvalidRequest("last message must be from the user".into()))
            }
            _ if self.temperature.is_nan() || self.temperature < 0.0 => {
                Err(LlmError::InvalidRequest("temperature must be >= 0".into()))
            }
            _ if self.max_tokens == 0 => {
                Err(LlmError::InvalidRequest("max_tokens must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Concatenated message contents, which is what mock scripts match against.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Hash of everything that affects the completion (the tag is excluded).
    pub fn prompt_hash(&self) -> String {
        let canonical = json!({
            "model": self.model_id,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        sha256_hex(canonical.to_string())
    }
}

/// Model and decoding parameters shared by every call a pipeline stage makes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSettings {
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    256
}

impl CallSettings {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }

    pub fn request(&self, prompt: impl Into<String>, tag: impl Into<String>) -> ChatRequest {
        ChatRequest {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            ..ChatRequest::user(self.model_id.clone(), prompt, tag)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    ContentFilter,
    Other,
}

impl FinishReason {
    fn parse(s: Option<&str>) -> Self {
        match s {
            Some("stop") | None => Self::Stop,
            Some("length") => Self::Length,
            Some("content_filter") => Self::ContentFilter,
            Some(_) => Self::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    #[serde(default)]
    pub retries: u32,
}

pub trait ChatModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<T: ChatModel + ?Sized> ChatModel for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

/// Runs `requests` with at most `concurrency` in flight; results keep input order.
pub fn complete_all(
    model: &dyn ChatModel,
    requests: &[ChatRequest],
    concurrency: usize,
) -> Vec<Result<ChatResponse, LlmError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| requests.par_iter().map(|r| model.complete(r)).collect())
}

/// OpenAI-style `/chat/completions` client.
pub struct HttpChatClient {
    pub endpoint: String,
    pub token: Option<String>,
    pub policy: RetryPolicy,
    transport: Arc<dyn HttpTransport>,
}

impl HttpChatClient {
    pub fn new(
        endpoint: impl Into<String>,
        token: Option<String>,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            token,
            policy: RetryPolicy::default(),
            transport,
        }
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatModel for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let body = json!({
            "model": request.model_id,
            "messages": request.messages.iter().map(|m| json!({"role": m.role, "content": m.content})).collect::<Vec<_>>(),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let started = Instant::now();
        let reply = post_with_retry(
            self.transport.as_ref(),
            &self.endpoint,
            self.token.as_deref(),
            &body,
            &self.policy,
        )?;
        let parsed: CompletionBody = serde_json::from_str(&reply.reply.body)
            .map_err(|e| LlmError::BadResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::BadResponse("no choices".into()))?;
        let text = choice.message.content.unwrap_or_default();
        let finish_reason = FinishReason::parse(choice.finish_reason.as_deref());
        if text.is_empty() && finish_reason == FinishReason::Stop {
            return Err(LlmError::BadResponse("empty completion with normal finish".into()));
        }
        Ok(ChatResponse {
            text,
            finish_reason,
            latency_ms: started.elapsed().as_millis() as u64,
            retries: reply.retries,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Pattern {
    Substring(String),
    Regex(Regex),
}

impl Pattern {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            Pattern::Substring(s) => prompt.contains(s.as_str()),
            Pattern::Regex(r) => r.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub pattern: Pattern,
    pub response: String,
}

/// Ordered pattern → response rules; the first match wins.
#[derive(Debug, Clone)]
pub struct MockScript {
    pub rules: Vec<ScriptRule>,
    pub default: String,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default: "None".into(),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum ScriptLine {
    Rule {
        #[serde(rename = "match")]
        pattern: String,
        response: String,
        #[serde(default)]
        regex: bool,
    },
    Default {
        default: String,
    },
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn substring(mut self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            pattern: Pattern::Substring(pattern.into()),
            response: response.into(),
        });
        self
    }

    pub fn regex(mut self, pattern: &str, response: impl Into<String>) -> Result<Self, regex::Error> {
        self.rules.push(ScriptRule {
            pattern: Pattern::Regex(Regex::new(pattern)?),
            response: response.into(),
        });
        Ok(self)
    }

    pub fn with_default(mut self, default: impl Into<String>) -> Self {
        self.default = default.into();
        self
    }

    /// Reads a JSONL script: `{"match": .., "response": .., "regex": bool}` rules,
    /// optionally a `{"default": ..}` line.
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|source| LlmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut script = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| LlmError::Script {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            match serde_json::from_str::<ScriptLine>(line).map_err(|e| err(e.to_string()))? {
                ScriptLine::Rule {
                    pattern,
                    response,
                    regex: true,
                } => {
                    script = script
                        .regex(&pattern, response)
                        .map_err(|e| err(e.to_string()))?
                }
                ScriptLine::Rule {
                    pattern, response, ..
                } => script = script.substring(pattern, response),
                ScriptLine::Default { default } => script.default = default,
            }
        }
        Ok(script)
    }

    pub fn respond(&self, prompt: &str) -> &str {
        self.rules
            .iter()
            .find(|r| r.pattern.matches(prompt))
            .map_or(self.default.as_str(), |r| r.response.as_str())
    }
}

/// Deterministic scripted chat model.
#[derive(Debug, Clone)]
pub struct MockChat {
    pub script: MockScript,
}

impl MockChat {
    pub fn new(script: MockScript) -> Self {
        Self { script }
    }
}

impl ChatModel for MockChat {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        Ok(ChatResponse {
            text: self.script.respond(&request.prompt_text()).to_string(),
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
            retries: 0,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub request_tag: String,
    pub prompt_hash: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
    pub timestamp: u64,
}

/// Wraps a model and appends every successful request/response pair to a JSONL log.
pub struct Recorder<M> {
    inner: M,
    log: Mutex<BufWriter<fs::File>>,
    path: PathBuf,
}

impl<M: ChatModel> Recorder<M> {
    pub fn new(inner: M, path: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let path = path.into();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| LlmError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self {
            inner,
            log: Mutex::new(BufWriter::new(file)),
            path,
        })
    }
}

impl<M: ChatModel> ChatModel for Recorder<M> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let response = self.inner.complete(request)?;
        let entry = ReplayEntry {
            request_tag: request.request_tag.clone(),
            prompt_hash: request.prompt_hash(),
            request: request.clone(),
            response: response.clone(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        let line = serde_json::to_string(&entry).expect("serializable");
        let mut log = self.log.lock().unwrap();
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|source| LlmError::Io {
                path: self.path.clone(),
                source,
            })?;
        Ok(response)
    }
}

/// Answers from a replay log by prompt hash; never touches the network.
#[derive(Debug, Clone, Default)]
pub struct ReplayChat {
    entries: HashMap<String, ChatResponse>,
}

impl ReplayChat {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let file = fs::File::open(path).map_err(|source| LlmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| LlmError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(&line).map_err(|e| LlmError::Script {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.entry(e.prompt_hash).or_insert(e.response);
        }
        Ok(Self { entries })
    }

    /// Merges several logs; on hash collisions the earliest file wins.
    pub fn load_many(paths: &[PathBuf]) -> Result<Self, LlmError> {
        let mut entries = HashMap::new();
        for p in paths {
            for (k, v) in Self::load(p)?.entries {
                entries.entry(k).or_insert(v);
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatModel for ReplayChat {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let hash = request.prompt_hash();
        self.entries
            .get(&hash)
            .cloned()
            .ok_or(LlmError::ReplayMiss(hash))
    }
}
