//! Chat-completion gateway.
//!
//! Owns the only concurrency in the engine: an order-preserving fan-out with
//! a hard cap on in-flight requests and a per-query deadline. Every completed
//! call is appended to a usage ledger, priced later from a config-supplied
//! table.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::time::Instant;

pub const DEFAULT_MAX_CONTEXT: usize = 20_480;
pub const DEFAULT_PARALLELISM: usize = 10;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("prompt needs ~{tokens} tokens, context limit is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("query exceeded its {0:?} timeout")]
    Timeout(Duration),
    #[error("mock script has no response left for request `{0}`")]
    MockExhausted(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("no price configured for model `{0}`")]
    UnknownModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_context_tokens: usize,
    pub parallelism: usize,
    pub timeout: Duration,
    /// Extra attempts after a transport failure.
    pub retries: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "mock".into(),
            temperature: 0.0,
            max_context_tokens: DEFAULT_MAX_CONTEXT,
            parallelism: DEFAULT_PARALLELISM,
            timeout: DEFAULT_TIMEOUT,
            retries: 1,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.parallelism == 0 {
            return Err(GatewayError::InvalidConfig(
                "parallelism must be at least 1".into(),
            ));
        }
        if self.timeout.is_zero() {
            return Err(GatewayError::InvalidConfig(
                "timeout must be positive".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidConfig(
                "temperature must be non-negative".into(),
            ));
        }
        if self.max_context_tokens == 0 {
            return Err(GatewayError::InvalidConfig(
                "context length must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trace label attached to every request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTag {
    pub op: String,
    pub variant: String,
    /// Source-order ids of the elements carried by the prompt.
    pub elements: Vec<usize>,
}

impl fmt::Display for RequestTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.op, self.variant)?;
        match self.elements.as_slice() {
            [] => {}
            [first, .., last] if self.elements.len() > 8 => {
                write!(f, "[{first}..{last}; {} elements]", self.elements.len())?;
            }
            ids => {
                let ids: Vec<String> = ids.iter().map(|e| e.to_string()).collect();
                write!(f, "[{}]", ids.join(","))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub tag: RequestTag,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>, tag: RequestTag) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            tag,
        }
    }

    pub fn estimated_tokens(&self) -> usize {
        estimate_tokens(&self.system) + estimate_tokens(&self.user)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency: Duration,
}

/// Character-ratio token estimate: `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub tag: String,
    pub model: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub records: Vec<UsageRecord>,
}

impl UsageLedger {
    pub fn calls(&self) -> usize {
        self.records.len()
    }

    pub fn input_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.input_tokens).sum()
    }

    pub fn output_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.output_tokens).sum()
    }

    pub fn append(&mut self, other: &UsageLedger) {
        self.records.extend(other.records.iter().cloned());
    }

    /// Token totals per model, in model-name order.
    pub fn by_model(&self) -> BTreeMap<String, (u64, u64)> {
        let mut out: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for r in &self.records {
            let e = out.entry(r.model.clone()).or_default();
            e.0 += r.input_tokens;
            e.1 += r.output_tokens;
        }
        out
    }
}

/// Dollars per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub input: f64,
    pub output: f64,
}

pub type PriceTable = BTreeMap<String, Price>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub per_model: BTreeMap<String, f64>,
    pub total: f64,
}

pub fn cost(ledger: &UsageLedger, prices: &PriceTable) -> Result<CostSummary, GatewayError> {
    let mut summary = CostSummary::default();
    for (model, (input, output)) in ledger.by_model() {
        let p = prices
            .get(&model)
            .ok_or_else(|| GatewayError::UnknownModel(model.clone()))?;
        let dollars = (input as f64 * p.input + output as f64 * p.output) / 1_000_000.0;
        summary.total += dollars;
        summary.per_model.insert(model, dollars);
    }
    Ok(summary)
}

/// What a backend hands back before accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawReply {
    pub text: String,
    /// `(prompt, completion)` token counts when the endpoint reports them.
    pub usage: Option<(u64, u64)>,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn model(&self) -> &str;

    async fn send(&self, cfg: &BackendConfig, req: &ChatRequest) -> Result<RawReply, GatewayError>;
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cfg: Arc<BackendConfig>,
    permits: Arc<Semaphore>,
    ledger: Arc<Mutex<UsageLedger>>,
    deadline: Option<Instant>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.backend.model())
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cfg: BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        Ok(Self {
            backend,
            permits: Arc::new(Semaphore::new(cfg.parallelism)),
            cfg: Arc::new(cfg),
            ledger: Arc::default(),
            deadline: None,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn model(&self) -> &str {
        self.backend.model()
    }

    /// A gateway sharing this one's backend and parallelism cap, with a fresh
    /// ledger and no deadline.
    pub fn fork(&self) -> Self {
        Self {
            backend: Arc::clone(&self.backend),
            cfg: Arc::clone(&self.cfg),
            permits: Arc::clone(&self.permits),
            ledger: Arc::default(),
            deadline: None,
        }
    }

    /// Forks and starts the per-query clock.
    pub fn begin_query(&self) -> Self {
        let mut g = self.fork();
        g.deadline = Some(Instant::now() + self.cfg.timeout);
        g
    }

    pub fn deadline(&self) -> Option<Instant> {
        self.deadline
    }

    pub fn ledger(&self) -> UsageLedger {
        self.ledger.lock().expect("ledger lock").clone()
    }

    pub fn calls(&self) -> usize {
        self.ledger.lock().expect("ledger lock").calls()
    }

    pub fn fits(&self, req: &ChatRequest) -> bool {
        req.estimated_tokens() <= self.cfg.max_context_tokens
    }

    fn check_context(&self, req: &ChatRequest) -> Result<(), GatewayError> {
        let tokens = req.estimated_tokens();
        if tokens > self.cfg.max_context_tokens {
            return Err(GatewayError::ContextOverflow {
                tokens,
                limit: self.cfg.max_context_tokens,
            });
        }
        Ok(())
    }

    fn effective_deadline(&self) -> Instant {
        self.deadline
            .unwrap_or_else(|| Instant::now() + self.cfg.timeout)
    }

    async fn send_with_retry(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| GatewayError::Transport("gateway closed".into()))?;
        let started = Instant::now();
        let mut attempt = 0;
        let reply = loop {
            match self.backend.send(&self.cfg, req).await {
                Ok(r) => break r,
                Err(GatewayError::Transport(msg)) if attempt < self.cfg.retries => {
                    log::warn!(
                        "transport failure on {} (attempt {}): {msg}",
                        req.tag,
                        attempt + 1
                    );
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let (input_tokens, output_tokens) = reply.usage.unwrap_or_else(|| {
            (
                req.estimated_tokens() as u64,
                estimate_tokens(&reply.text) as u64,
            )
        });
        Ok(ChatResponse {
            text: reply.text,
            input_tokens,
            output_tokens,
            latency: started.elapsed(),
        })
    }

    fn record(&self, ledger: &mut UsageLedger, req: &ChatRequest, resp: &ChatResponse) {
        ledger.records.push(UsageRecord {
            tag: req.tag.to_string(),
            model: self.backend.model().to_string(),
            input_tokens: resp.input_tokens,
            output_tokens: resp.output_tokens,
        });
    }

    pub async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.check_context(req)?;
        let resp = tokio::time::timeout_at(self.effective_deadline(), self.send_with_retry(req))
            .await
            .map_err(|_| GatewayError::Timeout(self.cfg.timeout))??;
        let mut ledger = self.ledger.lock().expect("ledger lock");
        self.record(&mut ledger, req, &resp);
        Ok(resp)
    }

    /// Order-preserving fan-out. At most `parallelism` requests are in flight
    /// at any instant. If the deadline passes, the whole batch fails with
    /// [`GatewayError::Timeout`]; calls that had already completed are still
    /// charged to the ledger.
    pub async fn complete_many(
        &self,
        reqs: &[ChatRequest],
    ) -> Result<Vec<ChatResponse>, GatewayError> {
        if reqs.is_empty() {
            return Ok(Vec::new());
        }
        for r in reqs {
            self.check_context(r)?;
        }
        let done: Mutex<Vec<Option<ChatResponse>>> = Mutex::new(vec![None; reqs.len()]);
        let run = futures::stream::iter(reqs.iter().enumerate())
            .map(|(i, req)| {
                let done = &done;
                async move {
                    let resp = self.send_with_retry(req).await?;
                    done.lock().expect("results lock")[i] = Some(resp.clone());
                    Ok::<_, GatewayError>(resp)
                }
            })
            .buffered(self.cfg.parallelism)
            .try_collect::<Vec<_>>();
        let outcome = tokio::time::timeout_at(self.effective_deadline(), run).await;
        {
            let done = done.lock().expect("results lock");
            let mut ledger = self.ledger.lock().expect("ledger lock");
            for (req, resp) in reqs.iter().zip(done.iter()) {
                if let Some(resp) = resp {
                    self.record(&mut ledger, req, resp);
                }
            }
        }
        match outcome {
            Ok(r) => r,
            Err(_) => Err(GatewayError::Timeout(self.cfg.timeout)),
        }
    }
}

/// OpenAI-compatible `chat/completions` backend.
pub struct OpenAiBackend {
    client: reqwest::Client,
    model: String,
    api_key: Option<String>,
}

impl OpenAiBackend {
    pub fn new(model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            model: model.into(),
            api_key,
        }
    }

    /// Reads the key from the named environment variable, if set.
    pub fn from_env(model: impl Into<String>, key_var: &str) -> Self {
        Self::new(model, std::env::var(key_var).ok())
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReplyMessage,
}

#[derive(Deserialize)]
struct WireReplyMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    fn model(&self) -> &str {
        &self.model
    }

    async fn send(&self, cfg: &BackendConfig, req: &ChatRequest) -> Result<RawReply, GatewayError> {
        let mut messages = Vec::with_capacity(2);
        if !req.system.is_empty() {
            messages.push(WireMessage {
                role: "system",
                content: &req.system,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &req.user,
        });
        let body = WireRequest {
            model: &self.model,
            messages,
            temperature: cfg.temperature,
        };
        let mut http = self.client.post(&cfg.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let resp = http
            .send()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(GatewayError::Transport(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            if text.contains("context_length") {
                return Err(GatewayError::ContextOverflow {
                    tokens: req.estimated_tokens(),
                    limit: cfg.max_context_tokens,
                });
            }
            return Err(GatewayError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Transport(format!("undecodable response: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(RawReply {
            text: content,
            usage: parsed.usage.map(|u| (u.prompt_tokens, u.completion_tokens)),
        })
    }
}

/// A scripted reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockReply {
    Text(String),
    /// Simulated transport failure; the gateway may retry it.
    Fail(String),
}

impl From<String> for MockReply {
    fn from(s: String) -> Self {
        Self::Text(s)
    }
}

impl From<&str> for MockReply {
    fn from(s: &str) -> Self {
        Self::Text(s.to_string())
    }
}

pub type MockRule = Arc<dyn Fn(&ChatRequest) -> Option<MockReply> + Send + Sync>;
pub type MockLatency = Arc<dyn Fn(&ChatRequest, u64) -> Duration + Send + Sync>;

/// Deterministic response source: rules are consulted first, in order, then
/// the queue, then the default reply.
#[derive(Clone, Default)]
pub struct MockScript {
    model: String,
    queue: Vec<MockReply>,
    rules: Vec<MockRule>,
    default_reply: Option<MockReply>,
    latency: Option<MockLatency>,
}

impl MockScript {
    pub fn new() -> Self {
        Self {
            model: "mock".into(),
            ..Self::default()
        }
    }

    pub fn model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn respond(mut self, reply: impl Into<MockReply>) -> Self {
        self.queue.push(reply.into());
        self
    }

    pub fn responses<I, S>(mut self, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<MockReply>,
    {
        self.queue.extend(replies.into_iter().map(Into::into));
        self
    }

    pub fn rule(
        mut self,
        f: impl Fn(&ChatRequest) -> Option<MockReply> + Send + Sync + 'static,
    ) -> Self {
        self.rules.push(Arc::new(f));
        self
    }

    pub fn otherwise(mut self, reply: impl Into<MockReply>) -> Self {
        self.default_reply = Some(reply.into());
        self
    }

    /// Simulated latency as a function of the request and its call number.
    pub fn latency(
        mut self,
        f: impl Fn(&ChatRequest, u64) -> Duration + Send + Sync + 'static,
    ) -> Self {
        self.latency = Some(Arc::new(f));
        self
    }
}

/// Declarative mock script as stored on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScriptFile {
    #[serde(default = "default_mock_model")]
    pub model: String,
    #[serde(default)]
    pub responses: Vec<String>,
    #[serde(default)]
    pub rules: Vec<MockRuleSpec>,
    #[serde(default)]
    pub default: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
}

fn default_mock_model() -> String {
    "mock".into()
}

/// Matches when every given field matches: `op` and `variant` exactly
/// (case-insensitive), and every `contains` string occurs in the user prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRuleSpec {
    #[serde(default)]
    pub op: Option<String>,
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    pub respond: String,
}

impl MockRuleSpec {
    pub fn matches(&self, req: &ChatRequest) -> bool {
        self.op
            .as_ref()
            .is_none_or(|op| op.eq_ignore_ascii_case(&req.tag.op))
            && self
                .variant
                .as_ref()
                .is_none_or(|v| v.eq_ignore_ascii_case(&req.tag.variant))
            && self.contains.iter().all(|c| req.user.contains(c.as_str()))
    }
}

impl From<MockScriptFile> for MockScript {
    fn from(f: MockScriptFile) -> Self {
        let mut s = MockScript::new().model(f.model).responses(f.responses);
        for rule in f.rules {
            s = s.rule(move |req| {
                rule.matches(req)
                    .then(|| MockReply::Text(rule.respond.clone()))
            });
        }
        if let Some(d) = f.default {
            s = s.otherwise(d);
        }
        if f.latency_ms > 0 {
            let d = Duration::from_millis(f.latency_ms);
            s = s.latency(move |_, _| d);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MockStats {
    pub calls: u64,
    pub max_in_flight: usize,
}

/// Instrumented scripted backend.
pub struct MockBackend {
    script: MockScript,
    queue: Mutex<VecDeque<MockReply>>,
    calls: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            queue: Mutex::new(script.queue.iter().cloned().collect()),
            script,
            calls: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            log: Mutex::default(),
        }
    }

    pub fn stats(&self) -> MockStats {
        MockStats {
            calls: self.calls.load(Ordering::SeqCst),
            max_in_flight: self.max_in_flight.load(Ordering::SeqCst),
        }
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("mock log").clone()
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.max_in_flight.store(0, Ordering::SeqCst);
        self.log.lock().expect("mock log").clear();
        *self.queue.lock().expect("mock queue") = self.script.queue.iter().cloned().collect();
    }

    fn pick(&self, req: &ChatRequest) -> Option<MockReply> {
        self.script
            .rules
            .iter()
            .find_map(|r| r(req))
            .or_else(|| self.queue.lock().expect("mock queue").pop_front())
            .or_else(|| self.script.default_reply.clone())
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl ChatBackend for MockBackend {
    fn model(&self) -> &str {
        &self.script.model
    }

    async fn send(
        &self,
        _cfg: &BackendConfig,
        req: &ChatRequest,
    ) -> Result<RawReply, GatewayError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        self.log.lock().expect("mock log").push(req.clone());
        let reply = self.pick(req);
        if let Some(lat) = &self.script.latency {
            tokio::time::sleep(lat(req, n)).await;
        }
        match reply {
            Some(MockReply::Text(text)) => Ok(RawReply { text, usage: None }),
            Some(MockReply::Fail(msg)) => Err(GatewayError::Transport(msg)),
            None => Err(GatewayError::MockExhausted(req.tag.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_abbreviate_long_element_lists() {
        let tag = |n: usize| RequestTag {
            op: "select".into(),
            variant: "ALL".into(),
            elements: (0..n).collect(),
        };
        assert_eq!(tag(0).to_string(), "select/ALL");
        assert_eq!(tag(3).to_string(), "select/ALL[0,1,2]");
        assert_eq!(tag(400).to_string(), "select/ALL[0..399; 400 elements]");
    }

    fn req(user: &str) -> ChatRequest {
        ChatRequest::new(
            "",
            user,
            RequestTag {
                op: "select".into(),
                variant: "ONE".into(),
                elements: vec![],
            },
        )
    }

    fn gateway(script: MockScript, cfg: BackendConfig) -> (Arc<MockBackend>, Gateway) {
        let mock = Arc::new(MockBackend::new(script));
        let gw = Gateway::new(mock.clone(), cfg).unwrap();
        (mock, gw)
    }

    #[tokio::test]
    async fn queued_reply_is_echoed() {
        let (_, gw) = gateway(MockScript::new().respond("yes"), BackendConfig::default());
        let r = gw.complete(&req("is it?")).await.unwrap();
        assert_eq!(r.text, "yes");
        assert_eq!(gw.calls(), 1);
        assert_eq!(r.input_tokens, 2);
        assert_eq!(r.output_tokens, 1);
    }

    #[tokio::test]
    async fn overflow_is_rejected_without_ledger_entry() {
        let cfg = BackendConfig {
            max_context_tokens: 4,
            ..BackendConfig::default()
        };
        let (mock, gw) = gateway(MockScript::new().otherwise("x"), cfg);
        let err = gw.complete(&req(&"a".repeat(17))).await.unwrap_err();
        assert_eq!(
            err,
            GatewayError::ContextOverflow {
                tokens: 5,
                limit: 4
            }
        );
        assert_eq!(gw.calls(), 0);
        assert_eq!(mock.stats().calls, 0);
    }

    #[tokio::test]
    async fn transport_failure_retried_once() {
        let (mock, gw) = gateway(
            MockScript::new()
                .respond(MockReply::Fail("reset".into()))
                .respond("ok"),
            BackendConfig::default(),
        );
        assert_eq!(gw.complete(&req("q")).await.unwrap().text, "ok");
        assert_eq!(mock.stats().calls, 2);

        let (_, gw) = gateway(
            MockScript::new()
                .respond(MockReply::Fail("a".into()))
                .respond(MockReply::Fail("b".into())),
            BackendConfig::default(),
        );
        assert!(matches!(
            gw.complete(&req("q")).await,
            Err(GatewayError::Transport(_))
        ));
    }

    #[tokio::test]
    async fn empty_batch() {
        let (_, gw) = gateway(MockScript::new(), BackendConfig::default());
        assert!(gw.complete_many(&[]).await.unwrap().is_empty());
    }

    #[tokio::test(start_paused = true)]
    async fn bounded_fan_out_keeps_order() {
        let script = MockScript::new()
            .rule(|r| Some(MockReply::Text(format!("echo {}", r.user))))
            .latency(|_, _| Duration::from_secs(1));
        let (mock, gw) = gateway(script, BackendConfig::default());
        let reqs: Vec<_> = (0..100).map(|i| req(&i.to_string())).collect();
        let start = Instant::now();
        let out = gw.complete_many(&reqs).await.unwrap();
        assert_eq!(start.elapsed(), Duration::from_secs(10));
        assert_eq!(mock.stats().max_in_flight, 10);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.text, format!("echo {i}"));
        }
        assert_eq!(gw.calls(), 100);
    }

    #[tokio::test(start_paused = true)]
    async fn twenty_five_requests_peak_at_ten() {
        let script = MockScript::new()
            .otherwise("ok")
            .latency(|_, n| Duration::from_millis(10 + (n * 37) % 90));
        let (mock, gw) = gateway(script, BackendConfig::default());
        let reqs: Vec<_> = (0..25).map(|i| req(&i.to_string())).collect();
        gw.complete_many(&reqs).await.unwrap();
        assert_eq!(mock.stats().max_in_flight, 10);
    }

    #[tokio::test(start_paused = true)]
    async fn deadline_aborts_batch() {
        let cfg = BackendConfig {
            timeout: Duration::from_secs(5),
            parallelism: 2,
            ..BackendConfig::default()
        };
        let script = MockScript::new()
            .otherwise("ok")
            .latency(|_, _| Duration::from_secs(2));
        let (_, gw) = gateway(script, cfg);
        let reqs: Vec<_> = (0..10).map(|i| req(&i.to_string())).collect();
        let err = gw.complete_many(&reqs).await.unwrap_err();
        assert_eq!(err, GatewayError::Timeout(Duration::from_secs(5)));
        // Two waves of two finished before the deadline.
        assert_eq!(gw.calls(), 4);
    }

    #[test]
    fn pricing() {
        let mut prices = PriceTable::new();
        prices.insert(
            "m".into(),
            Price {
                input: 2.0,
                output: 8.0,
            },
        );
        assert_eq!(cost(&UsageLedger::default(), &prices).unwrap().total, 0.0);
        let rec = |i, o| UsageRecord {
            tag: "t".into(),
            model: "m".into(),
            input_tokens: i,
            output_tokens: o,
        };
        let one = UsageLedger {
            records: vec![rec(1_000_000, 0)],
        };
        assert!((cost(&one, &prices).unwrap().total - 2.0).abs() < 1e-12);
        let mixed = UsageLedger {
            records: vec![rec(500_000, 250_000)],
        };
        assert!((cost(&mixed, &prices).unwrap().total - 3.0).abs() < 1e-12);
        let mut unknown = mixed.clone();
        unknown.records[0].model = "other".into();
        assert_eq!(
            cost(&unknown, &prices),
            Err(GatewayError::UnknownModel("other".into()))
        );
    }

    #[test]
    fn config_validation() {
        let bad = BackendConfig {
            parallelism: 0,
            ..BackendConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackendConfig {
            temperature: -0.5,
            ..BackendConfig::default()
        };
        assert!(bad.validate().is_err());
        let d = BackendConfig::default();
        assert_eq!(
            (
                d.temperature,
                d.max_context_tokens,
                d.parallelism,
                d.timeout
            ),
            (0.0, 20_480, 10, Duration::from_secs(1800))
        );
    }

    #[test]
    fn rule_spec_matching() {
        let spec = MockRuleSpec {
            op: Some("SELECT".into()),
            variant: None,
            contains: vec!["Palo Alto".into()],
            respond: "{}".into(),
        };
        assert!(spec.matches(&req("Location: Palo Alto")));
        assert!(!spec.matches(&req("Location: Seattle")));
    }
}
