//! Chat-completion clients.
//!
//! [`ChatClient`] is the only way the pipeline talks to a language model.
//! Two implementations ship: [`LiveClient`], which speaks the common
//! `/chat/completions` HTTP protocol, and [`DeterministicDouble`], an
//! in-process stand-in driven by a [`Rulebook`] so the whole pipeline can run
//! offline and reproducibly.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub const ENV_BASE_URL: &str = "EXPLAINER_LLM_BASE_URL";
pub const ENV_MODEL: &str = "EXPLAINER_LLM_MODEL";
pub const ENV_API_KEY: &str = "EXPLAINER_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseFormat {
    FreeText,
    StructuredObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system_prompt: String,
    pub user_message: String,
    pub temperature: f32,
    pub max_tokens: u32,
    pub response_format: ResponseFormat,
}

impl ChatRequest {
    fn check(&self) -> Result<(), LlmError> {
        if self.model.trim().is_empty() {
            return Err(LlmError::InvalidRequest("model is empty".into()));
        }
        if self.user_message.trim().is_empty() {
            return Err(LlmError::InvalidRequest("user message is empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    pub fn code(&self) -> &'static str {
        match self {
            LlmError::AuthFailure(_) => "AuthFailure",
            LlmError::RateLimited { .. } => "RateLimited",
            LlmError::Timeout => "Timeout",
            LlmError::MalformedResponse(_) => "MalformedResponse",
            LlmError::Transport(_) => "Transport",
            LlmError::InvalidRequest(_) => "InvalidRequest",
        }
    }

    fn is_transient(&self) -> bool {
        matches!(self, LlmError::RateLimited { .. } | LlmError::Timeout | LlmError::Transport(_))
    }
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;

    /// Model identifier reported in explanation metadata.
    fn model(&self) -> &str;
}

impl<C: ChatClient + ?Sized> ChatClient for Arc<C> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn model(&self) -> &str {
        (**self).model()
    }
}

/// Minimal HTTP surface the live client needs; swapped out in tests.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, LlmError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub retry_after: Option<Duration>,
    pub body: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, initial_backoff: Duration::from_secs(1) }
    }
}

#[derive(Clone)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl fmt::Debug for LiveConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LiveConfig")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &"<redacted>")
            .field("timeout", &self.timeout)
            .field("retry", &self.retry)
            .finish()
    }
}

impl LiveConfig {
    /// Reads the endpoint settings from the environment. A missing key is an
    /// auth failure, reported before any network activity.
    pub fn from_env() -> Result<Self, LlmError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, LlmError> {
        let api_key = get(ENV_API_KEY)
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LlmError::AuthFailure(format!("{ENV_API_KEY} is not set")))?;
        let base_url = get(ENV_BASE_URL)
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LlmError::InvalidRequest(format!("{ENV_BASE_URL} is not set")))?;
        let model = get(ENV_MODEL)
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LlmError::InvalidRequest(format!("{ENV_MODEL} is not set")))?;
        Ok(LiveConfig {
            base_url,
            model,
            api_key,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        })
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Client for an OpenAI-style chat-completion endpoint.
pub struct LiveClient {
    config: LiveConfig,
    transport: Arc<dyn HttpTransport>,
    sleep: Sleeper,
}

impl LiveClient {
    #[cfg(feature = "live-llm")]
    pub fn from_env() -> Result<Self, LlmError> {
        Ok(Self::new(LiveConfig::from_env()?, Arc::new(ReqwestTransport::default())))
    }

    pub fn new(config: LiveConfig, transport: Arc<dyn HttpTransport>) -> Self {
        LiveClient { config, transport, sleep: Arc::new(std::thread::sleep) }
    }

    /// Replaces the backoff sleep (tests use a recorder).
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut body = json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_message},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.response_format == ResponseFormat::StructuredObject {
            body["response_format"] = json!({"type": "json_object"});
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<(String, Usage), LlmError> {
        let reply = self
            .transport
            .post_json(&self.endpoint(), &self.config.api_key, body, self.config.timeout)?;
        match reply.status {
            200..=299 => parse_completion(&reply.body),
            401 | 403 => Err(LlmError::AuthFailure(format!("HTTP {}", reply.status))),
            429 => Err(LlmError::RateLimited { retry_after: reply.retry_after }),
            408 | 504 => Err(LlmError::Timeout),
            s if s >= 500 => Err(LlmError::Transport(format!("HTTP {s}"))),
            s => Err(LlmError::InvalidRequest(format!("HTTP {s}: {}", truncate(&reply.body, 200)))),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<CompletionUsage>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct CompletionUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

fn parse_completion(body: &str) -> Result<(String, Usage), LlmError> {
    let parsed: CompletionBody =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| LlmError::MalformedResponse("no assistant content".into()))?;
    let usage = parsed
        .usage
        .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
        .unwrap_or_default();
    Ok((text, usage))
}

impl ChatClient for LiveClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.check()?;
        let body = self.body(request);
        let started = Instant::now();
        let mut backoff = self.config.retry.initial_backoff;
        let attempts = self.config.retry.attempts.max(1);
        for attempt in 1..=attempts {
            tracing::debug!(
                endpoint = %self.endpoint(),
                model = %request.model,
                attempt,
                authorization = "Bearer <redacted>",
                "chat completion request"
            );
            match self.attempt(&body) {
                Ok((text, usage)) => {
                    tracing::debug!(chars = text.len(), ?usage, "chat completion response");
                    return Ok(ChatResponse {
                        text,
                        usage,
                        latency_ms: started.elapsed().as_millis() as u64,
                    });
                }
                Err(e) if e.is_transient() && attempt < attempts => {
                    let wait = match &e {
                        LlmError::RateLimited { retry_after: Some(d) } => *d,
                        _ => backoff,
                    };
                    tracing::warn!(error = %e, ?wait, attempt, "retrying chat completion");
                    (self.sleep)(wait);
                    backoff *= 2;
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("the final attempt always returns")
    }

    fn model(&self) -> &str {
        &self.config.model
    }
}

#[cfg(feature = "live-llm")]
#[derive(Default)]
pub struct ReqwestTransport {
    client: std::sync::OnceLock<reqwest::blocking::Client>,
}

#[cfg(feature = "live-llm")]
impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, LlmError> {
        let client = self.client.get_or_init(reqwest::blocking::Client::new);
        let resp = client
            .post(url)
            .bearer_auth(bearer)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(|e| if e.is_timeout() { LlmError::Timeout } else { LlmError::Transport(e.to_string()) })?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let body = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpReply { status, retry_after, body })
    }
}

/// Marker line that starts the question in every prompt the pipeline builds.
pub const QUESTION_PREFIX: &str = "Question: ";

/// Canned intent payload and explanation template for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub question: String,
    pub intent_payload: String,
    pub explanation_template: String,
}

/// Question-keyed canned answers for [`DeterministicDouble`].
///
/// Templates may use `{chosen}`, `{asked}`, `{state}` and `{risks}`, which are
/// filled from the evidence block of the explanation prompt.
#[derive(Debug, Clone, Default)]
pub struct Rulebook {
    rules: HashMap<String, Rule>,
}

pub const DEFAULT_EXPLANATION_TEMPLATE: &str = "The agent chose {chosen} at state {state}. {asked}\
Across the simulations, the estimated risk of falling into a hole was {risks}.";

pub const FALLBACK_INTENT_PAYLOAD: &str = r#"{"matched": false, "question_type": "general", "target_state": null, "target_action": null, "target_path": null}"#;

/// Lower-cased with whitespace collapsed and trailing punctuation removed.
pub fn normalize_question(q: &str) -> String {
    q.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches(['?', '.', '!'])
        .to_lowercase()
}

impl Rulebook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, question: &str, intent_payload: String, explanation_template: Option<String>) {
        self.rules.insert(
            normalize_question(question),
            Rule {
                question: question.to_string(),
                intent_payload,
                explanation_template: explanation_template
                    .unwrap_or_else(|| DEFAULT_EXPLANATION_TEMPLATE.to_string()),
            },
        );
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn lookup(&self, question: &str) -> Option<&Rule> {
        self.rules.get(&normalize_question(question))
    }
}

/// Offline client returning canned payloads; same request, same response.
#[derive(Debug, Clone)]
pub struct DeterministicDouble {
    rulebook: Rulebook,
    model: String,
}

pub fn deterministic_double(rulebook: Rulebook) -> DeterministicDouble {
    DeterministicDouble { rulebook, model: "deterministic-double".to_string() }
}

impl DeterministicDouble {
    pub fn rulebook(&self) -> &Rulebook {
        &self.rulebook
    }
}

fn question_of(user_message: &str) -> Option<&str> {
    user_message
        .lines()
        .find_map(|l| l.strip_prefix(QUESTION_PREFIX))
        .map(str::trim)
}

fn field<'a>(user_message: &'a str, key: &str) -> Option<&'a str> {
    user_message
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .map(str::trim)
}

/// Pulls `action | visits | mean | risk | ...` rows out of the evidence table.
fn risk_rows(user_message: &str) -> Vec<String> {
    user_message
        .lines()
        .filter_map(|l| {
            let cols: Vec<&str> = l.split('|').map(str::trim).collect();
            if cols.len() < 4 || crate::env::Action::from_name(cols[0]).is_none() {
                return None;
            }
            Some(match cols[3] {
                "-" | "" => format!("{} unexplored", cols[0]),
                risk => format!("{} {}", cols[0], risk),
            })
        })
        .collect()
}

impl DeterministicDouble {
    fn intent_reply(&self, question: Option<&str>) -> String {
        match question.and_then(|q| self.rulebook.lookup(q)) {
            Some(rule) => rule.intent_payload.clone(),
            None => FALLBACK_INTENT_PAYLOAD.to_string(),
        }
    }

    fn explanation_reply(&self, question: Option<&str>, user_message: &str) -> String {
        let template = question
            .and_then(|q| self.rulebook.lookup(q))
            .map(|r| r.explanation_template.as_str())
            .unwrap_or(DEFAULT_EXPLANATION_TEMPLATE);
        let chosen = field(user_message, "Agent's chosen action: ").unwrap_or("no action");
        let state = field(user_message, "Target state: ")
            .and_then(|s| s.split_whitespace().next())
            .unwrap_or("the current state");
        let asked = match field(user_message, "User-referenced actions: ") {
            Some(a) if a != "none" => format!("You asked about {a}. "),
            _ => String::new(),
        };
        let rows = risk_rows(user_message);
        let risks = if rows.is_empty() { "not recorded".to_string() } else { rows.join(", ") };
        template
            .replace("{chosen}", chosen)
            .replace("{state}", state)
            .replace("{asked}", &asked)
            .replace("{risks}", &risks)
    }
}

impl ChatClient for DeterministicDouble {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.check()?;
        let question = question_of(&request.user_message);
        let text = match request.response_format {
            ResponseFormat::StructuredObject => self.intent_reply(question),
            ResponseFormat::FreeText => self.explanation_reply(question, &request.user_message),
        };
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: (request.system_prompt.len() + request.user_message.len()) as u32 / 4,
                completion_tokens: text.len() as u32 / 4,
            },
            text,
            latency_ms: 0,
        })
    }

    fn model(&self) -> &str {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn req(format: ResponseFormat, user: &str) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            system_prompt: "sys".into(),
            user_message: user.into(),
            temperature: 0.0,
            max_tokens: 256,
            response_format: format,
        }
    }

    struct Scripted {
        replies: Mutex<Vec<Result<HttpReply, LlmError>>>,
        calls: Mutex<Vec<serde_json::Value>>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<HttpReply, LlmError>>) -> Arc<Self> {
            Arc::new(Scripted { replies: Mutex::new(replies), calls: Mutex::new(Vec::new()) })
        }
    }

    impl HttpTransport for Scripted {
        fn post_json(&self, _url: &str, _bearer: &str, body: &serde_json::Value, _t: Duration) -> Result<HttpReply, LlmError> {
            self.calls.lock().unwrap().push(body.clone());
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn ok_body(text: &str) -> HttpReply {
        HttpReply {
            status: 200,
            retry_after: None,
            body: json!({"choices": [{"message": {"role": "assistant", "content": text}}],
                         "usage": {"prompt_tokens": 10, "completion_tokens": 3}})
            .to_string(),
        }
    }

    fn config() -> LiveConfig {
        LiveConfig {
            base_url: "http://llm.invalid/v1/".into(),
            model: "m".into(),
            api_key: "secret".into(),
            timeout: Duration::from_secs(1),
            retry: RetryPolicy::default(),
        }
    }

    fn status(code: u16, retry_after: Option<u64>) -> Result<HttpReply, LlmError> {
        Ok(HttpReply { status: code, retry_after: retry_after.map(Duration::from_secs), body: String::new() })
    }

    #[test]
    fn missing_key_fails_before_network() {
        let err = LiveConfig::from_lookup(|k| (k != ENV_API_KEY).then(|| "x".to_string())).unwrap_err();
        assert!(matches!(err, LlmError::AuthFailure(_)));
    }

    #[test]
    fn debug_output_redacts_key() {
        assert!(!format!("{:?}", config()).contains("secret"));
    }

    #[test]
    fn retries_transient_failures_with_backoff() {
        let transport = Scripted::new(vec![status(503, None), status(429, Some(7)), Ok(ok_body("hi"))]);
        let waits = Arc::new(Mutex::new(Vec::new()));
        let w = waits.clone();
        let client = LiveClient::new(config(), transport.clone()).with_sleeper(move |d| w.lock().unwrap().push(d));
        let resp = client.complete(&req(ResponseFormat::StructuredObject, "q")).unwrap();
        assert_eq!(resp.text, "hi");
        assert_eq!(resp.usage, Usage { prompt_tokens: 10, completion_tokens: 3 });
        assert_eq!(*waits.lock().unwrap(), vec![Duration::from_secs(1), Duration::from_secs(7)]);
        let calls = transport.calls.lock().unwrap();
        assert_eq!(calls.len(), 3);
        assert_eq!(calls[0]["response_format"]["type"], "json_object");
        assert_eq!(calls[0]["messages"][1]["content"], "q");
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let transport = Scripted::new(vec![Err(LlmError::Timeout), Err(LlmError::Timeout), Err(LlmError::Timeout)]);
        let waits = Arc::new(Mutex::new(Vec::new()));
        let w = waits.clone();
        let client = LiveClient::new(config(), transport).with_sleeper(move |d| w.lock().unwrap().push(d));
        assert_eq!(client.complete(&req(ResponseFormat::FreeText, "q")), Err(LlmError::Timeout));
        assert_eq!(*waits.lock().unwrap(), vec![Duration::from_secs(1), Duration::from_secs(2)]);
    }

    #[test]
    fn auth_and_malformed_are_not_retried() {
        let client = LiveClient::new(config(), Scripted::new(vec![status(401, None)])).with_sleeper(|_| panic!("no retry"));
        assert!(matches!(client.complete(&req(ResponseFormat::FreeText, "q")), Err(LlmError::AuthFailure(_))));
        let bad = Ok(HttpReply { status: 200, retry_after: None, body: "{not json".into() });
        let client = LiveClient::new(config(), Scripted::new(vec![bad])).with_sleeper(|_| panic!("no retry"));
        assert!(matches!(client.complete(&req(ResponseFormat::FreeText, "q")), Err(LlmError::MalformedResponse(_))));
    }

    #[test]
    fn empty_message_is_rejected() {
        let double = deterministic_double(Rulebook::new());
        assert!(matches!(double.complete(&req(ResponseFormat::FreeText, "  ")), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn double_returns_canned_and_fallback_payloads() {
        let mut book = Rulebook::new();
        book.insert("Why did the agent choose Up at the current state?", "{\"x\":1}".into(), None);
        let double = deterministic_double(book);
        let hit = double
            .complete(&req(ResponseFormat::StructuredObject, "Question: why did the agent choose up at the current state\n"))
            .unwrap();
        assert_eq!(hit.text, "{\"x\":1}");
        assert_eq!(hit.latency_ms, 0);
        let miss = double.complete(&req(ResponseFormat::StructuredObject, "Question: qwzx blorp")).unwrap();
        assert_eq!(miss.text, FALLBACK_INTENT_PAYLOAD);
        assert!(miss.text.contains("\"matched\": false"));
    }

    #[test]
    fn double_fills_explanation_from_evidence() {
        let double = deterministic_double(Rulebook::new());
        let msg = "Question: why?\nTarget state: 4 (node #0)\nAgent's chosen action: Left\nUser-referenced actions: Up\n\
                   action | visits | mean return | hole risk | top outcomes\nLeft | 10 | 0.100 | 0.300 | 4 x 6\nUp | 0 | - | - | -\n";
        let a = double.complete(&req(ResponseFormat::FreeText, msg)).unwrap().text;
        let b = double.complete(&req(ResponseFormat::FreeText, msg)).unwrap().text;
        assert_eq!(a, b);
        assert!(a.contains("chose Left at state 4"), "{a}");
        assert!(a.contains("You asked about Up."), "{a}");
        assert!(a.contains("Left 0.300, Up unexplored"), "{a}");
    }
}
