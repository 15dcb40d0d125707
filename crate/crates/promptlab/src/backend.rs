//! Backend execution: OpenAI-compatible HTTP providers, a deterministic mock
//! oracle, a persistent completion cache, and bounded-concurrency batching.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promptkit::{Message, RenderedPrompt, Role};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Hosted OpenAI-compatible chat completions; requires an API key.
    OpenaiCompatible,
    /// Local OpenAI-compatible server; API key optional.
    LocalHttp,
    /// Deterministic in-process oracle for tests and offline runs.
    Mock,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::OpenaiCompatible => "openai_compatible",
            BackendKind::LocalHttp => "local_http",
            BackendKind::Mock => "mock",
        }
    }
}

fn default_max_output_tokens() -> u32 {
    8
}
fn default_cot_max_output_tokens() -> u32 {
    512
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    1000
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model_name: String,
    #[serde(default)]
    pub endpoint: String,
    pub temperature: f64,
    /// Applied to plain yes/no prompts; 8 suffices.
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    /// Applied to final-answer (chain-of-thought) prompts, which need room
    /// for the reasoning.
    #[serde(default = "default_cot_max_output_tokens")]
    pub cot_max_output_tokens: u32,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    /// Requests per second across all worker threads; absent means unlimited.
    #[serde(default)]
    pub rate_limit: Option<f64>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub mock: Option<MockOracle>,
}

impl BackendConfig {
    pub fn mock_backend(oracle: MockOracle, temperature: f64) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::Mock,
            model_name: "mock".into(),
            endpoint: String::new(),
            temperature,
            max_output_tokens: default_max_output_tokens(),
            cot_max_output_tokens: default_cot_max_output_tokens(),
            request_timeout_secs: default_timeout(),
            max_retries: default_retries(),
            retry_backoff_ms: default_backoff(),
            rate_limit: None,
            api_key_env: default_api_key_env(),
            mock: Some(oracle),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 {
            return Err(Error::Configuration("temperature must be >= 0".into()));
        }
        match self.kind {
            BackendKind::Mock => {
                if self.mock.is_none() {
                    return Err(Error::Configuration(
                        "mock backend requires a [mock] oracle section".into(),
                    ));
                }
            }
            BackendKind::OpenaiCompatible | BackendKind::LocalHttp => {
                if self.endpoint.is_empty() {
                    return Err(Error::Configuration(
                        "http backends require an endpoint URL".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Digest of everything that affects completions (used in stage digests).
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        util::sha256_hex(json.as_bytes())
    }
}

/// What distinguishes one completion request from another besides the
/// rendered prompt: the text being classified, or a generation nonce for
/// sampling-style calls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionKey {
    Target(String),
    Nonce(u64),
}

impl CompletionKey {
    fn tag(&self) -> String {
        match self {
            CompletionKey::Target(id) => format!("text:{id}"),
            CompletionKey::Nonce(n) => format!("nonce:{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub kind: String,
    pub model: String,
    pub temperature: String,
    pub canonical_hash: String,
    pub target: String,
}

impl CacheKey {
    fn new(config: &BackendConfig, prompt: &RenderedPrompt, key: &CompletionKey) -> CacheKey {
        CacheKey {
            kind: config.kind.as_str().into(),
            model: config.model_name.clone(),
            temperature: format!("{}", config.temperature),
            canonical_hash: prompt.canonical_hash.clone(),
            target: key.tag(),
        }
    }

    fn digest(&self) -> String {
        util::sha256_parts(&[
            self.kind.as_bytes(),
            self.model.as_bytes(),
            self.temperature.as_bytes(),
            self.canonical_hash.as_bytes(),
            self.target.as_bytes(),
        ])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// True when counts come from the whitespace heuristic rather than the
    /// provider.
    pub estimated: bool,
}

fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub key: CacheKey,
    pub raw: String,
    pub created_at: u64,
    pub usage: TokenUsage,
}

/// Append-only completion log with an in-memory index. Concurrent writers of
/// the same key are harmless because values are identical by construction.
pub struct CompletionCache {
    inner: Mutex<CacheInner>,
}

struct CacheInner {
    map: HashMap<String, String>,
    writer: Option<std::fs::File>,
}

impl CompletionCache {
    /// In-memory cache (no persistence).
    pub fn in_memory() -> CompletionCache {
        CompletionCache {
            inner: Mutex::new(CacheInner {
                map: HashMap::new(),
                writer: None,
            }),
        }
    }

    /// Open or create the record log at `path`, replaying existing records.
    pub fn open(path: &Path) -> Result<CompletionCache> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut map = HashMap::new();
        if path.exists() {
            let content = std::fs::read_to_string(path)?;
            for line in content.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: CompletionRecord = serde_json::from_str(line)?;
                map.insert(record.key.digest(), record.raw);
            }
        }
        let writer = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(CompletionCache {
            inner: Mutex::new(CacheInner {
                map,
                writer: Some(writer),
            }),
        })
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &CacheKey) -> Option<String> {
        self.inner.lock().unwrap().map.get(&key.digest()).cloned()
    }

    fn put(&self, record: &CompletionRecord) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        inner
            .map
            .insert(record.key.digest(), record.raw.clone());
        if let Some(writer) = inner.writer.as_mut() {
            let mut line = serde_json::to_string(record)?;
            line.push('\n');
            writer.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFormat {
    Plain,
    FinalAnswer,
    Chatty,
}

fn default_mock_format() -> MockFormat {
    MockFormat::Plain
}

/// Deterministic test oracle. Classification verdicts are a pure function of
/// the target text when `noise_rate` is 0; with noise, flips are keyed by a
/// hash of the full prompt so they are stable across schedules and reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockOracle {
    pub positive_markers: Vec<String>,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mock_format")]
    pub format_style: MockFormat,
}

const GENERATION_MARKER: &str = "Generate a variation of the following prompt";

const MOCK_MUTATIONS: [&str; 8] = [
    "{seed} Focus on explicit statements in the text.",
    "Read the text closely. {seed}",
    "{seed} Consider the overall tone before deciding.",
    "{seed} Ignore unrelated details.",
    "Carefully weigh the evidence. {seed}",
    "{seed} Base your decision only on what is stated.",
    "{seed} Pay attention to the writer's own words.",
    "Think about what the writer expresses. {seed}",
];

impl MockOracle {
    pub fn new(markers: &[&str]) -> MockOracle {
        MockOracle {
            positive_markers: markers.iter().map(|m| m.to_string()).collect(),
            noise_rate: 0.0,
            seed: 0,
            format_style: MockFormat::Plain,
        }
    }

    fn marker_set(&self) -> BTreeSet<String> {
        self.positive_markers
            .iter()
            .map(|m| m.to_ascii_lowercase())
            .collect()
    }

    fn respond(&self, prompt: &RenderedPrompt, key: &CompletionKey) -> String {
        let content: String = prompt
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n");

        if content.contains(GENERATION_MARKER) {
            return self.generate_variation(&content, key);
        }

        let target = content
            .rfind("Text: ")
            .map(|pos| &content[pos + "Text: ".len()..])
            .unwrap_or(&content);
        let lower = target.to_ascii_lowercase();
        let mut positive = self.marker_set().iter().any(|m| lower.contains(m));

        if self.noise_rate > 0.0 {
            let fraction = util::hash_fraction(&[
                b"mock-noise",
                &self.seed.to_le_bytes(),
                prompt.canonical_hash.as_bytes(),
            ]);
            if fraction < self.noise_rate {
                positive = !positive;
            }
        }

        let expects_final = content.contains("Final Answer:");
        let verdict = if positive { "Yes" } else { "No" };
        match (self.format_style, expects_final) {
            (MockFormat::Plain, false) => verdict.to_string(),
            (MockFormat::Plain, true) | (MockFormat::FinalAnswer, _) => format!(
                "The text {} the construct markers. Final Answer: {verdict}",
                if positive { "shows" } else { "lacks" }
            ),
            (MockFormat::Chatty, false) => format!(
                "Well, looking at this text, I would say {}, since it {} the key markers.",
                verdict.to_ascii_lowercase(),
                if positive { "mentions" } else { "lacks" }
            ),
            (MockFormat::Chatty, true) => format!(
                "Well, looking at this text, it {} the key markers. Final Answer: {verdict}",
                if positive { "mentions" } else { "lacks" }
            ),
        }
    }

    fn generate_variation(&self, content: &str, key: &CompletionKey) -> String {
        let after = content
            .find("Instruction: ")
            .map(|pos| &content[pos + "Instruction: ".len()..])
            .unwrap_or(content);
        let instruction = after
            .find("\n\nOutput only")
            .map(|end| &after[..end])
            .unwrap_or(after)
            .trim();
        let nonce = match key {
            CompletionKey::Nonce(n) => *n,
            CompletionKey::Target(_) => 0,
        };
        let fraction = util::hash_fraction(&[
            b"mock-mutation",
            &self.seed.to_le_bytes(),
            instruction.as_bytes(),
            &nonce.to_le_bytes(),
        ]);
        let template = MOCK_MUTATIONS[(fraction * MOCK_MUTATIONS.len() as f64) as usize];
        template.replace("{seed}", instruction)
    }
}

/// Serializes request slots so that aggregate throughput never exceeds the
/// configured ceiling, regardless of worker count.
struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(requests_per_second: f64) -> RateLimiter {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / requests_per_second.max(1e-6)),
            next: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = if *next > now { *next } else { now };
            *next = slot + self.interval;
            slot.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Default)]
pub struct ClientStats {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
}

impl ClientStats {
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }
}

type CompleterFn = dyn Fn(&RenderedPrompt, &CompletionKey) -> Result<String> + Send + Sync;

enum Provider {
    Http(HttpProvider),
    Mock(MockOracle),
    /// Test seam for fault injection and scripted generators.
    Custom(Box<CompleterFn>),
}

/// A backend client: provider + cache + rate limiter + retry policy.
pub struct Client {
    config: BackendConfig,
    provider: Provider,
    cache: Option<Arc<CompletionCache>>,
    limiter: Option<RateLimiter>,
    stats: Arc<ClientStats>,
}

impl Client {
    pub fn new(config: BackendConfig, cache: Option<Arc<CompletionCache>>) -> Result<Client> {
        config.validate()?;
        let provider = match config.kind {
            BackendKind::Mock => Provider::Mock(config.mock.clone().expect("validated")),
            BackendKind::OpenaiCompatible | BackendKind::LocalHttp => {
                Provider::Http(HttpProvider::new(&config)?)
            }
        };
        let limiter = config.rate_limit.map(RateLimiter::new);
        Ok(Client {
            config,
            provider,
            cache,
            limiter,
            stats: Arc::new(ClientStats::default()),
        })
    }

    /// Client backed by an arbitrary completion function (tests).
    pub fn from_fn<F>(config: BackendConfig, f: F, cache: Option<Arc<CompletionCache>>) -> Client
    where
        F: Fn(&RenderedPrompt, &CompletionKey) -> Result<String> + Send + Sync + 'static,
    {
        let limiter = config.rate_limit.map(RateLimiter::new);
        Client {
            config,
            provider: Provider::Custom(Box::new(f)),
            cache,
            limiter,
            stats: Arc::new(ClientStats::default()),
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    /// Execute one completion. Cache hits return the stored text without
    /// touching the provider; transient provider failures are retried with
    /// exponential backoff up to `max_retries`.
    pub fn complete(&self, prompt: &RenderedPrompt, key: &CompletionKey) -> Result<String> {
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let cache_key = CacheKey::new(&self.config, prompt, key);
        if let Some(cache) = &self.cache {
            if let Some(raw) = cache.get(&cache_key) {
                self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(raw);
            }
        }

        self.stats.backend_calls.fetch_add(1, Ordering::Relaxed);
        let (raw, usage) = match &self.provider {
            Provider::Mock(oracle) => {
                if let Some(limiter) = &self.limiter {
                    limiter.acquire();
                }
                let raw = oracle.respond(prompt, key);
                let usage = TokenUsage {
                    prompt_tokens: prompt
                        .messages
                        .iter()
                        .map(|m| whitespace_tokens(&m.content))
                        .sum(),
                    completion_tokens: whitespace_tokens(&raw),
                    estimated: true,
                };
                (raw, usage)
            }
            Provider::Custom(f) => {
                if let Some(limiter) = &self.limiter {
                    limiter.acquire();
                }
                let raw = f(prompt, key)?;
                let completion_tokens = whitespace_tokens(&raw);
                (
                    raw,
                    TokenUsage {
                        prompt_tokens: 0,
                        completion_tokens,
                        estimated: true,
                    },
                )
            }
            Provider::Http(http) => http.complete(&self.config, prompt, self.limiter.as_ref())?,
        };

        if let Some(cache) = &self.cache {
            let record = CompletionRecord {
                key: cache_key,
                raw: raw.clone(),
                created_at: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                usage,
            };
            cache.put(&record)?;
        }
        Ok(raw)
    }

    /// Run many completions with up to `parallelism` workers. Results are
    /// ordered to match the input regardless of completion interleaving; if
    /// any item fails terminally the error lists the failed indices (the
    /// completed remainder is already cached, so the run is resumable).
    pub fn batch_classify(
        &self,
        jobs: &[(RenderedPrompt, CompletionKey)],
        parallelism: usize,
    ) -> Result<Vec<String>> {
        if parallelism == 0 {
            return Err(Error::Configuration("parallelism must be >= 1".into()));
        }
        let results: Mutex<Vec<Option<Result<String>>>> =
            Mutex::new((0..jobs.len()).map(|_| None).collect());
        let cursor = AtomicU64::new(0);

        std::thread::scope(|scope| {
            for _ in 0..parallelism.min(jobs.len().max(1)) {
                scope.spawn(|| loop {
                    let index = cursor.fetch_add(1, Ordering::Relaxed) as usize;
                    if index >= jobs.len() {
                        break;
                    }
                    let (prompt, key) = &jobs[index];
                    let outcome = self.complete(prompt, key);
                    results.lock().unwrap()[index] = Some(outcome);
                });
            }
        });

        let slots = results.into_inner().unwrap();
        let mut out = Vec::with_capacity(jobs.len());
        let mut failed = Vec::new();
        let mut detail = String::new();
        for (index, slot) in slots.into_iter().enumerate() {
            match slot.expect("every index visited") {
                Ok(raw) => out.push(raw),
                Err(e) => {
                    if detail.is_empty() {
                        detail = e.to_string();
                    }
                    failed.push(index);
                }
            }
        }
        if failed.is_empty() {
            Ok(out)
        } else {
            Err(Error::PartialFailure {
                total: jobs.len(),
                failed,
                detail,
            })
        }
    }
}

// --- OpenAI-compatible wire format ---

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

struct HttpProvider {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpProvider {
    fn new(config: &BackendConfig) -> Result<HttpProvider> {
        let api_key = std::env::var(&config.api_key_env).ok();
        if config.kind == BackendKind::OpenaiCompatible && api_key.is_none() {
            return Err(Error::Configuration(format!(
                "environment variable {} is not set (required for openai_compatible backends)",
                config.api_key_env
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()?;
        Ok(HttpProvider { client, api_key })
    }

    fn complete(
        &self,
        config: &BackendConfig,
        prompt: &RenderedPrompt,
        limiter: Option<&RateLimiter>,
    ) -> Result<(String, TokenUsage)> {
        let messages: Vec<WireMessage> = prompt
            .messages
            .iter()
            .map(|m: &Message| WireMessage {
                role: match m.role {
                    Role::System => "system",
                    Role::User => "user",
                },
                content: &m.content,
            })
            .collect();
        let max_tokens = match prompt.answer_format {
            crate::promptkit::AnswerFormat::PlainYesNo => config.max_output_tokens,
            crate::promptkit::AnswerFormat::FinalAnswer => config.cot_max_output_tokens,
        };
        let body = ChatRequest {
            model: &config.model_name,
            messages,
            temperature: config.temperature,
            max_tokens,
        };

        let mut attempt = 0u32;
        loop {
            if let Some(limiter) = limiter {
                limiter.acquire();
            }
            let mut request = self.client.post(&config.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            let outcome = request.send();

            let retryable: Option<(u16, String)> = match outcome {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let payload: ChatResponse = response.json().map_err(|e| {
                            Error::Protocol(format!("malformed provider payload: {e}"))
                        })?;
                        let choice = payload.choices.into_iter().next().ok_or_else(|| {
                            Error::Protocol("provider returned no choices".into())
                        })?;
                        let content = choice.message.content.ok_or_else(|| {
                            Error::Protocol("provider choice has no content".into())
                        })?;
                        let usage = match payload.usage {
                            Some(u) => TokenUsage {
                                prompt_tokens: u.prompt_tokens,
                                completion_tokens: u.completion_tokens,
                                estimated: false,
                            },
                            None => TokenUsage {
                                prompt_tokens: prompt
                                    .messages
                                    .iter()
                                    .map(|m| whitespace_tokens(&m.content))
                                    .sum(),
                                completion_tokens: whitespace_tokens(&content),
                                estimated: true,
                            },
                        };
                        return Ok((content, usage));
                    }
                    let code = status.as_u16();
                    let text = response.text().unwrap_or_default();
                    if code == 429 || status.is_server_error() {
                        Some((code, text))
                    } else {
                        return Err(Error::Backend {
                            status: code,
                            body: text,
                        });
                    }
                }
                Err(e) if e.is_timeout() || e.is_connect() => Some((0, e.to_string())),
                Err(e) => return Err(Error::Http(e)),
            };

            let (status, text) = retryable.expect("only transient outcomes reach here");
            if attempt >= config.max_retries {
                return Err(Error::Backend { status, body: text });
            }
            let backoff = config.retry_backoff_ms.saturating_mul(1u64 << attempt);
            let jitter = (util::hash_fraction(&[
                b"retry-jitter",
                &attempt.to_le_bytes(),
                prompt.canonical_hash.as_bytes(),
            ]) * (config.retry_backoff_ms / 4 + 1) as f64) as u64;
            std::thread::sleep(Duration::from_millis(backoff + jitter));
            attempt += 1;
        }
    }
}
