//! Chat-completion client contract, an HTTP implementation and deterministic mocks.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::ContentHash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

impl ContentPart {
    /// Inline image as a `data:` URL.
    pub fn image(media_type: &str, bytes: &[u8]) -> Self {
        use base64::Engine;
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        ContentPart::ImageUrl {
            image_url: ImageUrl {
                url: format!("data:{media_type};base64,{b64}"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: MessageContent,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: MessageContent::Text(text.into()),
        }
    }

    pub fn user_parts(parts: Vec<ContentPart>) -> Self {
        ChatMessage {
            role: Role::User,
            content: MessageContent::Parts(parts),
        }
    }

    /// Concatenated text of the message, ignoring images.
    pub fn text(&self) -> String {
        match &self.content {
            MessageContent::Text(t) => t.clone(),
            MessageContent::Parts(parts) => parts
                .iter()
                .filter_map(|p| match p {
                    ContentPart::Text { text } => Some(text.as_str()),
                    ContentPart::ImageUrl { .. } => None,
                })
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }

    pub fn images(&self) -> Vec<&str> {
        match &self.content {
            MessageContent::Text(_) => Vec::new(),
            MessageContent::Parts(parts) => parts
                .iter()
                .filter_map(|p| match p {
                    ContentPart::ImageUrl { image_url } => Some(image_url.url.as_str()),
                    ContentPart::Text { .. } => None,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// Digest of the canonical JSON form; keys replay transcripts.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("request serializes");
        ContentHash::of(&json).to_hex()
    }

    pub fn last_user_message(&self) -> Option<&ChatMessage> {
        self.messages.iter().rev().find(|m| m.role == Role::User)
    }
}

/// Thread-safe completion endpoint.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    /// `None` leaves the endpoint default.
    pub temperature: Option<f64>,
    pub max_output_tokens: u32,
    pub request_timeout_s: f64,
    pub max_retries: u32,
    pub concurrency_limit: usize,
    pub backoff_base_ms: u64,
}

impl Default for ChatEndpointConfig {
    fn default() -> Self {
        ChatEndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "default".into(),
            api_key_env: None,
            temperature: None,
            max_output_tokens: 2048,
            request_timeout_s: 120.0,
            max_retries: 3,
            concurrency_limit: 4,
            backoff_base_ms: 500,
        }
    }
}

impl ChatEndpointConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut problems = Vec::new();
        if self.concurrency_limit < 1 {
            problems.push(format!("{prefix}.concurrency_limit must be >= 1"));
        }
        if !(self.request_timeout_s > 0.0) {
            problems.push(format!("{prefix}.request_timeout_s must be > 0"));
        }
        if self.model_name.is_empty() {
            problems.push(format!("{prefix}.model_name is empty"));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            problems.push(format!("{prefix}.base_url must be an http(s) URL"));
        }
        if let Some(t) = self.temperature {
            if !(0.0..=2.0).contains(&t) {
                problems.push(format!("{prefix}.temperature must be within [0, 2]"));
            }
        }
        problems
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems("endpoint");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.model_name.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: Some(self.max_output_tokens),
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.backoff_base_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl RetryPolicy {
    /// Delay before retry `n` (0-based): `base * 2^n`.
    pub fn delay(&self, n: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << n.min(16))
    }
}

/// Outcome of a single try; only `Retryable` failures are attempted again.
pub enum TryError {
    Retryable(String),
    Fatal(String),
}

/// Runs `op` until it succeeds, fails fatally, or `max_retries` retries are used up.
pub fn with_retries<T>(policy: RetryPolicy, mut op: impl FnMut() -> Result<T, TryError>) -> Result<T> {
    let mut retry = 0;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(TryError::Fatal(msg)) => return Err(Error::Transport(msg)),
            Err(TryError::Retryable(msg)) => {
                if retry >= policy.max_retries {
                    return Err(Error::Transport(format!("{msg} (after {} retries)", policy.max_retries)));
                }
                std::thread::sleep(policy.delay(retry));
                retry += 1;
            }
        }
    }
}

/// Counting semaphore bounding in-flight requests.
pub struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpChatClient {
    cfg: ChatEndpointConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    limiter: Limiter,
}

impl HttpChatClient {
    pub fn new(cfg: ChatEndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::config(format!("environment variable {var} (api key) is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.request_timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpChatClient {
            limiter: Limiter::new(cfg.concurrency_limit),
            cfg,
            agent,
            api_key,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn try_once(&self, request: &ChatRequest) -> Result<String, TryError> {
        let mut call = self.agent.post(self.url());
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(request)
            .map_err(|e| TryError::Retryable(format!("request failed: {e}")))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TryError::Retryable(format!("reading response: {e}")))?;
        if status == 429 || status >= 500 {
            return Err(TryError::Retryable(format!("HTTP {status}: {}", truncate(&body, 300))));
        }
        if status >= 400 {
            return Err(TryError::Fatal(format!("HTTP {status}: {}", truncate(&body, 300))));
        }
        parse_completion(&body).map_err(TryError::Fatal)
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Extracts `choices[0].message.content` from a completion response body.
pub fn parse_completion(body: &str) -> Result<String, String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| format!("malformed response: {e}"))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| format!("response lacks choices[0].message.content: {}", truncate(body, 300)))
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let _permit = self.limiter.acquire();
        with_retries(self.cfg.retry_policy(), || self.try_once(request))
    }
}

/// Returns canned responses in order; `Err` entries simulate endpoint failures.
pub struct ScriptedClient {
    script: Mutex<VecDeque<Result<String, String>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedClient {
    pub fn new(script: impl IntoIterator<Item = Result<String, String>>) -> Self {
        ScriptedClient {
            script: Mutex::new(script.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("lock").clone()
    }
}

impl ChatClient for ScriptedClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.requests.lock().expect("lock").push(request.clone());
        match self.script.lock().expect("lock").pop_front() {
            Some(Ok(text)) => Ok(text),
            Some(Err(msg)) => Err(Error::Transport(msg)),
            None => Err(Error::Transport("script exhausted".into())),
        }
    }
}

/// Wraps a closure as a client.
pub struct FnClient<F>(pub F);

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (self.0)(request)
    }
}

/// One persisted request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request_digest: String,
    pub request: ChatRequest,
    pub response: String,
}

/// Serves responses recorded in transcript files, keyed by request digest.
pub struct ReplayClient {
    responses: HashMap<String, String>,
}

impl ReplayClient {
    pub fn new(exchanges: impl IntoIterator<Item = Exchange>) -> Self {
        ReplayClient {
            responses: exchanges
                .into_iter()
                .map(|e| (e.request_digest, e.response))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let out = crate::store::read_jsonl::<Exchange>(path, crate::store::Strictness::Strict)?;
        Ok(Self::new(out.items))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.responses
            .get(&request.digest())
            .cloned()
            .ok_or_else(|| Error::Transport(format!("no recorded response for request {}", request.digest())))
    }
}

pub mod mock {
    //! Offline stand-in for both endpoints, used by `--mock-endpoints`.
    //!
    //! Repair requests: the line named by the log's `l.<n>` marker is deleted from the
    //! code, which fixes single-line faults. Description requests: a fixed-style
    //! paragraph chosen by the image digest.

    use super::*;
    use crate::prompts::{REPAIR_CODE_HEADER, REPAIR_LOG_HEADER};

    const SHAPES: [&str; 4] = ["circle", "rectangle", "triangle", "diamond"];
    const COLORS: [&str; 4] = ["black", "blue", "red", "green"];

    #[derive(Debug, Default)]
    pub struct HeuristicEndpoint;

    impl HeuristicEndpoint {
        pub fn new() -> Self {
            HeuristicEndpoint
        }
    }

    /// Splits a repair prompt back into (code, log).
    pub fn parse_repair_prompt(prompt: &str) -> Option<(&str, &str)> {
        let code_start = prompt.find(&format!("{REPAIR_CODE_HEADER}\n"))? + REPAIR_CODE_HEADER.len() + 1;
        let log_marker = format!("\n\n{REPAIR_LOG_HEADER}\n");
        let log_at = prompt.rfind(&log_marker)?;
        (code_start <= log_at).then(|| (&prompt[code_start..log_at], &prompt[log_at + log_marker.len()..]))
    }

    fn error_line(log: &str) -> Option<usize> {
        log.lines().find_map(|l| {
            let rest = l.strip_prefix("l.")?;
            let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
            digits.parse().ok()
        })
    }

    pub fn repair(code: &str, log: &str) -> String {
        let lines: Vec<&str> = code.lines().collect();
        let kept: Vec<&str> = match error_line(log) {
            Some(n) if n >= 1 && n <= lines.len() => {
                let line = lines[n - 1].trim_start();
                if line.starts_with("\\begin{document}") || line.starts_with("\\end{") || line.starts_with("\\documentclass") {
                    lines.clone()
                } else {
                    lines.iter().enumerate().filter(|(i, _)| *i != n - 1).map(|(_, l)| *l).collect()
                }
            }
            _ => lines.clone(),
        };
        format!("```latex\n{}\n```", kept.join("\n"))
    }

    pub fn describe(image_url: &str) -> String {
        let h = ContentHash::of(image_url.as_bytes()).0;
        let a = SHAPES[h[0] as usize % 4];
        let b = SHAPES[h[1] as usize % 4];
        let ca = COLORS[h[2] as usize % 4];
        let cb = COLORS[h[3] as usize % 4];
        let n = 2 + h[4] % 5;
        format!(
            "A {ca} {a} labeled $A$ sits at the left of the canvas, and a {cb} {b} labeled $B$ sits {n} units to its right at the same height. \
             A thin black arrow runs horizontally from the right edge of {a} A to the left edge of {b} B, with the label $f$ placed just above its midpoint. \
             Both shapes have equal height, and their labels are centered inside them."
        )
    }

    impl ChatClient for HeuristicEndpoint {
        fn complete(&self, request: &ChatRequest) -> Result<String> {
            let msg = request
                .last_user_message()
                .ok_or_else(|| Error::invalid("request has no user message"))?;
            if let Some(url) = msg.images().first() {
                return Ok(describe(url));
            }
            let text = msg.text();
            match parse_repair_prompt(&text) {
                Some((code, log)) => Ok(repair(code, log)),
                None => Err(Error::invalid("mock endpoint does not recognize the prompt")),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn wire_format_matches_chat_api() {
        let req = ChatRequest {
            model: "m".into(),
            messages: vec![ChatMessage::user_parts(vec![
                ContentPart::Text { text: "hi".into() },
                ContentPart::image("image/png", b"\x89PNG"),
            ])],
            temperature: Some(0.0),
            max_tokens: None,
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"][0]["type"], "text");
        assert_eq!(v["messages"][0]["content"][1]["type"], "image_url");
        assert_eq!(v["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,iVBORw==");
        assert!(v.get("max_tokens").is_none());
        let plain = serde_json::to_value(ChatMessage::user("x")).unwrap();
        assert_eq!(plain["content"], "x");
    }

    #[test]
    fn completion_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"ok"}}]}"#;
        assert_eq!(parse_completion(body).unwrap(), "ok");
        assert!(parse_completion("{}").is_err());
        assert!(parse_completion("nope").is_err());
    }

    #[test]
    fn retries_back_off_then_give_up() {
        let policy = RetryPolicy { max_retries: 2, base_delay: Duration::from_millis(1) };
        assert_eq!(policy.delay(3), Duration::from_millis(8));
        let calls = AtomicU32::new(0);
        let r: Result<()> = with_retries(policy, || {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(TryError::Retryable("busy".into()))
        });
        assert!(matches!(r, Err(Error::Transport(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let calls = AtomicU32::new(0);
        let r = with_retries(policy, || {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(TryError::Retryable("busy".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r.unwrap(), 7);

        let calls = AtomicU32::new(0);
        let r: Result<()> = with_retries(policy, || {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(TryError::Fatal("401".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Limiter::new(2);
        let inflight = AtomicU32::new(0);
        let peak = AtomicU32::new(0);
        std::thread::scope(|s| {
            for _ in 0..6 {
                s.spawn(|| {
                    let _p = limiter.acquire();
                    let now = inflight.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    inflight.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn endpoint_config_validation() {
        let bad = ChatEndpointConfig {
            concurrency_limit: 0,
            base_url: "ftp://x".into(),
            ..Default::default()
        };
        assert_eq!(bad.problems("repair").len(), 2);
        assert!(ChatEndpointConfig::default().validate().is_ok());
    }

    #[test]
    fn missing_api_key_variable_is_config_error() {
        let cfg = ChatEndpointConfig {
            api_key_env: Some("TIKZKIT_TEST_SURELY_UNSET_KEY".into()),
            ..Default::default()
        };
        assert!(matches!(HttpChatClient::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn replay_by_digest() {
        let req = ChatEndpointConfig::default().request(vec![ChatMessage::user("q")]);
        let client = ReplayClient::new([Exchange {
            request_digest: req.digest(),
            request: req.clone(),
            response: "a".into(),
        }]);
        assert_eq!(client.complete(&req).unwrap(), "a");
        let other = ChatEndpointConfig::default().request(vec![ChatMessage::user("z")]);
        assert!(client.complete(&other).is_err());
    }

    #[test]
    fn heuristic_repair_drops_failing_line() {
        let code = "\\documentclass[tikz]{standalone}\n\\begin{document}\n\\begin{tikzpicture}\n\\bad\n\\end{tikzpicture}\n\\end{document}";
        let prompt = crate::prompts::repair_prompt(code, "! Undefined control sequence.\nl.4 \\bad\n");
        let (c, l) = mock::parse_repair_prompt(&prompt).unwrap();
        assert_eq!(c, code);
        assert!(l.starts_with("! Undefined"));
        let fixed = mock::HeuristicEndpoint.complete(&ChatEndpointConfig::default().request(vec![ChatMessage::user(prompt)])).unwrap();
        assert!(!fixed.contains("\\bad"));
        assert!(fixed.contains("\\end{tikzpicture}"));
    }

    #[test]
    fn heuristic_description_is_stable_prose() {
        let d = mock::describe("data:image/png;base64,AAAA");
        assert_eq!(d, mock::describe("data:image/png;base64,AAAA"));
        assert!(d.len() >= 200 && !d.contains('\n'));
    }
}
