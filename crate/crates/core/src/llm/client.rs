//! Chat and rerank clients.
//!
//! Live clients speak JSON over HTTP. The scripted replayer serves recorded
//! responses from a JSON-lines fixture file so LLM runs can be replayed
//! offline and byte-for-byte.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{ClientError, Error, Result};

pub const LLM_API_KEY_ENV: &str = "LLM_API_KEY";
pub const RERANK_API_KEY_ENV: &str = "RERANK_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

pub trait ChatClient: Send {
    fn send(&mut self, messages: &[ChatMessage], temperature: f64) -> Result<String, ClientError>;
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn send(&mut self, messages: &[ChatMessage], temperature: f64) -> Result<String, ClientError> {
        (**self).send(messages, temperature)
    }
}

/// SHA-256 (hex) of the canonical JSON `{"messages": [...], "temperature": t}`.
pub fn request_digest(messages: &[ChatMessage], temperature: f64) -> String {
    let body = json!({ "messages": messages, "temperature": temperature });
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

/// One recorded exchange. An empty or absent digest matches any request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default)]
    pub request_digest: Option<String>,
    pub response_text: String,
}

pub fn read_fixtures<R: BufRead>(input: R) -> Result<Vec<Fixture>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_fixtures<W: Write>(mut out: W, fixtures: &[Fixture]) -> Result<()> {
    for f in fixtures {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Replays fixtures in order; errors once they run out.
#[derive(Debug, Clone)]
pub struct ScriptedClient {
    fixtures: Vec<Fixture>,
    cursor: usize,
}

impl ScriptedClient {
    pub fn new(fixtures: Vec<Fixture>) -> Self {
        ScriptedClient { fixtures, cursor: 0 }
    }

    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            responses
                .into_iter()
                .map(|r| Fixture {
                    request_digest: None,
                    response_text: r.into(),
                })
                .collect(),
        )
    }

    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(Self::new(read_fixtures(std::io::BufReader::new(file))?))
    }

    pub fn remaining(&self) -> usize {
        self.fixtures.len() - self.cursor
    }
}

impl ChatClient for ScriptedClient {
    fn send(&mut self, messages: &[ChatMessage], temperature: f64) -> Result<String, ClientError> {
        let Some(fixture) = self.fixtures.get(self.cursor) else {
            return Err(ClientError::Exhausted(self.fixtures.len()));
        };
        if let Some(expected) = fixture.request_digest.as_deref().filter(|d| !d.is_empty()) {
            let actual = request_digest(messages, temperature);
            if actual != expected {
                return Err(ClientError::DigestMismatch {
                    index: self.cursor,
                    expected: expected.to_owned(),
                    actual,
                });
            }
        }
        self.cursor += 1;
        Ok(fixture.response_text.clone())
    }
}

/// Always answers with the same text. Counts calls.
#[derive(Debug, Clone, Default)]
pub struct ConstantClient {
    pub text: String,
    calls: Arc<AtomicUsize>,
}

impl ConstantClient {
    pub fn new(text: impl Into<String>) -> Self {
        ConstantClient {
            text: text.into(),
            calls: Arc::default(),
        }
    }

    /// Shared call counter, readable after the client has been moved.
    pub fn counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.calls)
    }
}

impl ChatClient for ConstantClient {
    fn send(&mut self, _messages: &[ChatMessage], _temperature: f64) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.text.clone())
    }
}

/// Wraps a client and records every exchange as a fixture.
pub struct RecordingClient<C> {
    pub inner: C,
    records: Arc<Mutex<Vec<Fixture>>>,
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        RecordingClient {
            inner,
            records: Arc::default(),
        }
    }

    pub fn records(&self) -> Arc<Mutex<Vec<Fixture>>> {
        Arc::clone(&self.records)
    }
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn send(&mut self, messages: &[ChatMessage], temperature: f64) -> Result<String, ClientError> {
        let text = self.inner.send(messages, temperature)?;
        self.records.lock().expect("recorder lock").push(Fixture {
            request_digest: Some(request_digest(messages, temperature)),
            response_text: text.clone(),
        });
        Ok(text)
    }
}

/// Retry settings shared by chat and rerank calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Runs `op`, retrying transport failures with exponential backoff.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let wait = self.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("{e}; retry {} of {} in {wait} ms", attempt + 1, self.max_retries);
                    if wait > 0 {
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Token bucket: `capacity` requests, refilled continuously over one minute.
#[derive(Debug)]
pub struct RateLimiter {
    per_minute: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: u32) -> Self {
        let cap = f64::from(requests_per_minute.max(1));
        RateLimiter {
            per_minute: cap,
            state: Mutex::new((cap, Instant::now())),
        }
    }

    /// Process-wide limiter shared by every live client. The first caller
    /// fixes the rate.
    pub fn global(requests_per_minute: u32) -> Arc<RateLimiter> {
        static GLOBAL: OnceLock<Arc<RateLimiter>> = OnceLock::new();
        Arc::clone(GLOBAL.get_or_init(|| Arc::new(RateLimiter::new(requests_per_minute))))
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter lock");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_minute / 60.0;
                state.0 = (state.0 + refill).min(self.per_minute);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) * 60.0 / self.per_minute
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }

    pub fn available(&self) -> f64 {
        self.state.lock().expect("rate limiter lock").0
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn api_key(var: &str) -> Result<String, ClientError> {
    std::env::var(var).map_err(|_| ClientError::MissingCredential(var.to_owned()))
}

fn post_json(agent: &ureq::Agent, url: &str, key: &str, body: &serde_json::Value) -> Result<serde_json::Value, ClientError> {
    let mut resp = agent
        .post(url)
        .header("Authorization", &format!("Bearer {key}"))
        .header("Content-Type", "application/json")
        .send(body.to_string())
        .map_err(|e| ClientError::Transport(e.to_string()))?;
    let text = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| ClientError::Transport(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| ClientError::Malformed(e.to_string()))
}

/// Chat-completions style endpoint: `{model, messages, temperature}` in,
/// `choices[0].message.content` (or `content[0].text`) out.
pub struct HttpChatClient {
    pub endpoint: String,
    pub model: String,
    api_key: String,
    agent: ureq::Agent,
    limiter: Option<Arc<RateLimiter>>,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key_env: &str) -> Result<Self> {
        Ok(HttpChatClient {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key(api_key_env).map_err(Error::Client)?,
            agent: agent(Duration::from_secs(120)),
            limiter: None,
        })
    }

    pub fn with_limiter(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }
}

impl ChatClient for HttpChatClient {
    fn send(&mut self, messages: &[ChatMessage], temperature: f64) -> Result<String, ClientError> {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": temperature,
        });
        let v = post_json(&self.agent, &self.endpoint, &self.api_key, &body)?;
        v.pointer("/choices/0/message/content")
            .or_else(|| v.pointer("/content/0/text"))
            .and_then(|c| c.as_str())
            .map(str::to_owned)
            .ok_or_else(|| ClientError::Malformed(format!("no message content in {v}")))
    }
}

/// Scores documents against a query; returns the top index and its relevance.
pub trait Reranker: Send {
    fn top_match(&mut self, query: &str, documents: &[String]) -> Result<(usize, f64), ClientError>;
}

/// Rerank endpoint: `{model, query, documents, top_n: 1}` in,
/// `results[0].{index, relevance_score}` out.
pub struct HttpReranker {
    pub endpoint: String,
    pub model: String,
    api_key: String,
    agent: ureq::Agent,
    limiter: Option<Arc<RateLimiter>>,
}

impl HttpReranker {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key_env: &str) -> Result<Self> {
        Ok(HttpReranker {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: api_key(api_key_env).map_err(Error::Client)?,
            agent: agent(Duration::from_secs(60)),
            limiter: None,
        })
    }

    pub fn with_limiter(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }
}

/// Builds the rerank request body.
pub fn rerank_request(model: &str, query: &str, documents: &[String]) -> serde_json::Value {
    json!({ "model": model, "query": query, "documents": documents, "top_n": 1 })
}

/// Extracts `(index, relevance_score)` of the first result.
pub fn parse_rerank_response(v: &serde_json::Value, n_documents: usize) -> Result<(usize, f64), ClientError> {
    let top = v
        .pointer("/results/0")
        .ok_or_else(|| ClientError::Malformed(format!("no results in {v}")))?;
    let index = top
        .get("index")
        .and_then(|i| i.as_u64())
        .ok_or_else(|| ClientError::Malformed("result without index".into()))? as usize;
    let score = top
        .get("relevance_score")
        .and_then(|s| s.as_f64())
        .ok_or_else(|| ClientError::Malformed("result without relevance_score".into()))?;
    if index >= n_documents {
        return Err(ClientError::Malformed(format!(
            "index {index} out of range for {n_documents} documents"
        )));
    }
    Ok((index, score.clamp(0.0, 1.0)))
}

impl Reranker for HttpReranker {
    fn top_match(&mut self, query: &str, documents: &[String]) -> Result<(usize, f64), ClientError> {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let body = rerank_request(&self.model, query, documents);
        let v = post_json(&self.agent, &self.endpoint, &self.api_key, &body)?;
        parse_rerank_response(&v, documents.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replayer_serves_in_order_then_exhausts() {
        let mut c = ScriptedClient::from_responses(["one", "two"]);
        let m = [ChatMessage::user("hi")];
        assert_eq!(c.send(&m, 0.0).unwrap(), "one");
        assert_eq!(c.send(&m, 0.0).unwrap(), "two");
        assert_eq!(c.send(&m, 0.0), Err(ClientError::Exhausted(2)));
    }

    #[test]
    fn replayer_checks_digests() {
        let m = [ChatMessage::user("hi")];
        let good = Fixture { request_digest: Some(request_digest(&m, 0.0)), response_text: "ok".into() };
        let mut c = ScriptedClient::new(vec![good.clone(), good]);
        assert_eq!(c.send(&m, 0.0).unwrap(), "ok");
        let err = c.send(&[ChatMessage::user("other")], 0.0).unwrap_err();
        assert!(matches!(err, ClientError::DigestMismatch { index: 1, .. }));
    }

    #[test]
    fn constant_client_counts() {
        let mut c = ConstantClient::new("R");
        let n = c.counter();
        c.send(&[], 0.0).unwrap();
        c.send(&[], 0.0).unwrap();
        assert_eq!(n.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn recording_round_trips_through_jsonl() {
        let mut rec = RecordingClient::new(ConstantClient::new("x: 1"));
        let records = rec.records();
        let m = [ChatMessage::system("s"), ChatMessage::user("u")];
        rec.send(&m, 0.0).unwrap();
        let mut buf = Vec::new();
        write_fixtures(&mut buf, &records.lock().unwrap()).unwrap();
        let fixtures = read_fixtures(std::io::Cursor::new(buf)).unwrap();
        let mut replay = ScriptedClient::new(fixtures);
        assert_eq!(replay.send(&m, 0.0).unwrap(), "x: 1");
    }

    struct Flaky {
        failures: u32,
        calls: u32,
    }

    impl ChatClient for Flaky {
        fn send(&mut self, _m: &[ChatMessage], _t: f64) -> Result<String, ClientError> {
            self.calls += 1;
            if self.calls <= self.failures {
                Err(ClientError::Transport("down".into()))
            } else {
                Ok("up".into())
            }
        }
    }

    #[test]
    fn retry_policy_limits() {
        let policy = RetryPolicy { max_retries: 3, backoff_ms: 0 };
        let mut ok = Flaky { failures: 3, calls: 0 };
        assert_eq!(policy.run(|| ok.send(&[], 0.0)).unwrap(), "up");
        assert_eq!(ok.calls, 4);
        let mut bad = Flaky { failures: 4, calls: 0 };
        assert!(policy.run(|| bad.send(&[], 0.0)).is_err());
        assert_eq!(bad.calls, 4);
        // non-transport errors are not retried
        let mut c = ScriptedClient::from_responses(Vec::<String>::new());
        let mut calls = 0;
        let r = policy.run(|| {
            calls += 1;
            c.send(&[], 0.0)
        });
        assert!(r.is_err());
        assert_eq!(calls, 1);
    }

    #[test]
    fn rate_limiter_spends_tokens() {
        let l = RateLimiter::new(600);
        for _ in 0..5 {
            l.acquire();
        }
        assert!(l.available() <= 596.0);
    }

    #[test]
    fn rerank_wire_format() {
        let docs = vec!["a=1".to_string(), "a=2".to_string()];
        let body = rerank_request("rerank-v3.5", "a=2", &docs);
        assert_eq!(body["top_n"], 1);
        assert_eq!(body["documents"][1], "a=2");
        let resp = json!({"results": [{"index": 1, "relevance_score": 0.93}]});
        assert_eq!(parse_rerank_response(&resp, 2).unwrap(), (1, 0.93));
        let bad = json!({"results": [{"index": 5, "relevance_score": 0.1}]});
        assert!(parse_rerank_response(&bad, 2).is_err());
        assert!(parse_rerank_response(&json!({}), 2).is_err());
    }

    #[test]
    fn missing_credentials_are_reported() {
        let err = HttpChatClient::new("http://localhost:1", "m", "POOLAL_TEST_UNSET_KEY").err().unwrap();
        assert!(err.to_string().contains("POOLAL_TEST_UNSET_KEY"));
    }
}
