//! All model I/O: conditioning assembly for draft continuation and
//! answering, annotator and judge calls, with a content-addressed response
//! cache, bounded in-flight concurrency, sliding-window rate limiting,
//! bounded retries, and an audit transcript. The only concurrent module.

mod backend;
mod cache;
mod limiter;
mod mock;

pub use backend::{Backend, BackendError, BackendRequest, BackendResponse, HttpBackend};
pub use cache::{compute_cache_key, CacheEntry, DiskCache};
pub use limiter::RateLimiter;
pub use mock::{FnBackend, MockBackend, MockBehavior};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::{Error, Result};
use crate::judge::parse_immediate_label;
use crate::model::{render_choices_inline, AnswerStageResult, McqItem, ThinkingDraft};
use crate::template::fill_slots;

const RETRY_ATTEMPTS: u32 = 5;
const RETRY_BASE: Duration = Duration::from_millis(200);

/// Sampling parameters sent with each request. Greedy decoding by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_top_p() -> f64 {
    1.0
}

fn default_max_tokens() -> u32 {
    4096
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 4096,
        }
    }
}

/// One model endpoint: URL, auth, limits, sampling, and the served chat
/// template shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// `http(s)://...` for OpenAI-compatible servers, or `mock://<behavior>`
    /// for the deterministic in-process backend.
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer key; unset or empty means
    /// no auth header.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// 0 disables rate limiting.
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
    #[serde(default)]
    pub sampling: Sampling,
    /// Sampling override for self-draft generation (some draft sources use
    /// nucleus sampling while everything else stays greedy).
    #[serde(default)]
    pub draft_sampling: Option<Sampling>,
    #[serde(default = "default_think_open")]
    pub think_open: String,
    #[serde(default = "default_think_close")]
    pub think_close: String,
    /// Raw-completion chat preamble with `{question}` and `{choices}`
    /// slots; the think region is appended per request kind.
    #[serde(default = "default_chat_template")]
    pub chat_template: String,
    #[serde(default = "default_answer_prefix")]
    pub answer_prefix: String,
}

fn default_max_in_flight() -> usize {
    4
}

fn default_rpm() -> u32 {
    600
}

fn default_timeout() -> f64 {
    120.0
}

fn default_think_open() -> String {
    "<think>".into()
}

fn default_think_close() -> String {
    "</think>".into()
}

fn default_chat_template() -> String {
    "Human: Q: {question}\nAnswer choices: {choices}\n\nAssistant: ".into()
}

fn default_answer_prefix() -> String {
    "The answer is: ".into()
}

impl EndpointConfig {
    pub fn mock(model_name: &str, behavior: &str) -> Self {
        EndpointConfig {
            base_url: format!("mock://{behavior}"),
            model_name: model_name.into(),
            api_key_env: None,
            max_in_flight: default_max_in_flight(),
            requests_per_minute: 0,
            timeout_seconds: default_timeout(),
            sampling: Sampling::default(),
            draft_sampling: None,
            think_open: default_think_open(),
            think_close: default_think_close(),
            chat_template: default_chat_template(),
            answer_prefix: default_answer_prefix(),
        }
    }
}

/// What a completion request is for; shapes conditioning validation and
/// response post-processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    ContinueDraft,
    AnswerStandard,
    AnswerImmediate,
    Annotate,
    Judge,
    SelfDraft,
}

/// One completed generation, with the cache key that addresses its
/// persisted request/response pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Post-processed text (think-close stripped for draft kinds).
    pub text: String,
    /// Verbatim backend output.
    pub raw_text: String,
    pub truncated: bool,
    pub from_cache: bool,
    pub key: String,
}

/// Counters for cache behavior and backend traffic.
#[derive(Debug, Default)]
pub struct GatewayStats {
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
    retries: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub cache_hits: u64,
    pub backend_calls: u64,
    pub retries: u64,
}

impl GatewayStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
        }
    }
}

#[derive(Debug, Serialize)]
struct TranscriptEntry<'a> {
    seq: u64,
    model: &'a str,
    kind: RequestKind,
    cache_key: &'a str,
    from_cache: bool,
    conditioning: &'a str,
    response: &'a str,
}

/// Run-scoped append-only log of every request/response pair, one JSON
/// record per line, flushed before the caller sees the response.
pub struct TranscriptWriter {
    out: Mutex<BufWriter<File>>,
    seq: AtomicU64,
}

impl TranscriptWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(TranscriptWriter {
            out: Mutex::new(BufWriter::new(file)),
            seq: AtomicU64::new(0),
        })
    }

    fn append(&self, entry: &TranscriptEntry<'_>) {
        let line = serde_json::to_string(entry).expect("transcript entry serializes");
        let mut out = self.out.lock().expect("transcript lock");
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    }
}

/// One configured endpoint with its cache, limits, and transcript.
pub struct Gateway {
    endpoint: EndpointConfig,
    backend: Arc<dyn Backend>,
    cache: Option<DiskCache>,
    transcript: Option<Arc<TranscriptWriter>>,
    limiter: RateLimiter,
    inflight: Arc<Semaphore>,
    stats: GatewayStats,
}

impl Gateway {
    /// Build a gateway for an endpoint config, choosing the backend from
    /// the URL scheme.
    pub fn from_endpoint(
        endpoint: EndpointConfig,
        cache: Option<DiskCache>,
        transcript: Option<Arc<TranscriptWriter>>,
    ) -> Result<Self> {
        let backend: Arc<dyn Backend> = if let Some(behavior) = endpoint
            .base_url
            .strip_prefix("mock://")
        {
            let behavior: MockBehavior = behavior
                .parse()
                .map_err(Error::Config)?;
            Arc::new(MockBackend::new(behavior))
        } else if endpoint.base_url.starts_with("http://")
            || endpoint.base_url.starts_with("https://")
        {
            let api_key = match endpoint.api_key_env.as_deref() {
                None | Some("") => None,
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    Error::Config(format!(
                        "endpoint {} names api_key_env {var} but the variable is unset",
                        endpoint.model_name
                    ))
                })?),
            };
            Arc::new(HttpBackend::new(
                &endpoint.base_url,
                api_key,
                endpoint.timeout_seconds,
            ))
        } else {
            return Err(Error::Config(format!(
                "unsupported base_url scheme: {}",
                endpoint.base_url
            )));
        };
        Ok(Self::with_backend(endpoint, backend, cache, transcript))
    }

    pub fn with_backend(
        endpoint: EndpointConfig,
        backend: Arc<dyn Backend>,
        cache: Option<DiskCache>,
        transcript: Option<Arc<TranscriptWriter>>,
    ) -> Self {
        let limiter = RateLimiter::new(endpoint.requests_per_minute);
        let inflight = Arc::new(Semaphore::new(endpoint.max_in_flight.max(1)));
        Gateway {
            endpoint,
            backend,
            cache,
            transcript,
            limiter,
            inflight,
            stats: GatewayStats::default(),
        }
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    pub fn model_name(&self) -> &str {
        &self.endpoint.model_name
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn is_network(&self) -> bool {
        self.backend.is_network()
    }

    fn base_conditioning(&self, item: &McqItem) -> String {
        let choices = render_choices_inline(&item.choices);
        fill_slots(
            &self.endpoint.chat_template,
            &[("{question}", &item.question), ("{choices}", &choices)],
        )
    }

    fn validate_shape(&self, kind: RequestKind, conditioning: &str) -> Result<()> {
        let open = &self.endpoint.think_open;
        let close = &self.endpoint.think_close;
        let ok = match kind {
            RequestKind::ContinueDraft | RequestKind::SelfDraft => {
                let last_open = conditioning.rfind(open.as_str());
                let last_close = conditioning.rfind(close.as_str());
                matches!((last_open, last_close), (Some(o), None) if o < conditioning.len())
                    || matches!((last_open, last_close), (Some(o), Some(c)) if c < o)
            }
            RequestKind::AnswerStandard => conditioning.trim_end().ends_with(close.as_str()),
            RequestKind::AnswerImmediate => {
                conditioning.ends_with(self.endpoint.answer_prefix.as_str())
                    && conditioning.contains(close.as_str())
            }
            RequestKind::Annotate | RequestKind::Judge => !conditioning.trim().is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::RequestShape(format!(
                "conditioning does not match {kind:?} shape"
            )))
        }
    }

    /// Core request path: validate, consult the cache, then dispatch with
    /// bounded concurrency, rate limiting, and retries. The response is
    /// persisted to the cache and transcript before it is returned.
    pub async fn complete(
        &self,
        kind: RequestKind,
        conditioning: String,
        sampling: &Sampling,
        stop: Vec<String>,
    ) -> Result<Generation> {
        self.validate_shape(kind, &conditioning)?;
        let key = compute_cache_key(&self.endpoint.model_name, &conditioning, sampling, &stop);

        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(&key) {
                self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
                self.log(kind, &key, true, &conditioning, &entry.response_text);
                return Ok(self.finish(kind, key, entry.response_text, &entry.finish_reason, true));
            }
        }

        let request = BackendRequest {
            kind,
            model: self.endpoint.model_name.clone(),
            prompt: conditioning.clone(),
            sampling: sampling.clone(),
            stop: stop.clone(),
        };

        let _permit = self.inflight.acquire().await.expect("semaphore open");
        let mut last_error = String::new();
        for attempt in 1..=RETRY_ATTEMPTS {
            if attempt > 1 {
                self.stats.retries.fetch_add(1, Ordering::SeqCst);
                tokio::time::sleep(RETRY_BASE * 2u32.pow(attempt - 2)).await;
            }
            self.limiter.acquire().await;
            self.stats.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(&request).await {
                Ok(response) => {
                    if let Some(cache) = &self.cache {
                        cache.put(&CacheEntry {
                            key: key.clone(),
                            model: self.endpoint.model_name.clone(),
                            kind,
                            conditioning: conditioning.clone(),
                            sampling: sampling.clone(),
                            stop,
                            response_text: response.text.clone(),
                            finish_reason: response.finish_reason.clone(),
                        })?;
                    }
                    self.log(kind, &key, false, &conditioning, &response.text);
                    return Ok(self.finish(
                        kind,
                        key,
                        response.text,
                        &response.finish_reason,
                        false,
                    ));
                }
                Err(e) if e.retryable() => last_error = e.to_string(),
                Err(e) => {
                    return Err(Error::Transport {
                        model: self.endpoint.model_name.clone(),
                        message: e.to_string(),
                    })
                }
            }
        }
        Err(Error::RetryExhausted {
            model: self.endpoint.model_name.clone(),
            attempts: RETRY_ATTEMPTS,
            message: last_error,
        })
    }

    fn log(&self, kind: RequestKind, key: &str, from_cache: bool, conditioning: &str, response: &str) {
        if let Some(transcript) = &self.transcript {
            transcript.append(&TranscriptEntry {
                seq: transcript.seq.fetch_add(1, Ordering::SeqCst),
                model: &self.endpoint.model_name,
                kind,
                cache_key: key,
                from_cache,
                conditioning,
                response,
            });
        }
    }

    fn finish(
        &self,
        kind: RequestKind,
        key: String,
        raw_text: String,
        finish_reason: &str,
        from_cache: bool,
    ) -> Generation {
        let mut text = raw_text.clone();
        if matches!(kind, RequestKind::ContinueDraft | RequestKind::SelfDraft) {
            if let Some(at) = text.find(self.endpoint.think_close.as_str()) {
                text.truncate(at);
            }
        }
        Generation {
            text,
            raw_text,
            truncated: finish_reason == "length",
            from_cache,
            key,
        }
    }

    /// Continue a spliced draft prefix inside the think region, stopping at
    /// the closing think tag.
    pub async fn continue_draft(&self, item: &McqItem, draft_prefix: &str) -> Result<Generation> {
        let conditioning = format!(
            "{}{}\n{draft_prefix}",
            self.base_conditioning(item),
            self.endpoint.think_open
        );
        self.complete(
            RequestKind::ContinueDraft,
            conditioning,
            &self.endpoint.sampling.clone(),
            vec![self.endpoint.think_close.clone()],
        )
        .await
    }

    /// Standard answering over a complete draft: the closing think tag is
    /// appended here and the model generates freely. The final answer is
    /// extracted downstream.
    pub async fn answer_standard(
        &self,
        item: &McqItem,
        draft_text: &str,
    ) -> Result<(AnswerStageResult, Generation)> {
        let conditioning = format!(
            "{}{}\n{draft_text}\n{}\n",
            self.base_conditioning(item),
            self.endpoint.think_open,
            self.endpoint.think_close
        );
        let generation = self
            .complete(
                RequestKind::AnswerStandard,
                conditioning,
                &self.endpoint.sampling.clone(),
                Vec::new(),
            )
            .await?;
        let result = AnswerStageResult::standard(generation.text.clone(), None);
        Ok((result, generation))
    }

    /// Immediate answering: the forced answer prefix follows the closing
    /// think tag and the first parseable label of the first emitted line is
    /// the answer.
    pub async fn answer_immediate(
        &self,
        item: &McqItem,
        draft_text: &str,
    ) -> Result<(AnswerStageResult, Generation)> {
        let conditioning = format!(
            "{}{}\n{draft_text}\n{}\n{}",
            self.base_conditioning(item),
            self.endpoint.think_open,
            self.endpoint.think_close,
            self.endpoint.answer_prefix
        );
        let generation = self
            .complete(
                RequestKind::AnswerImmediate,
                conditioning,
                &self.endpoint.sampling.clone(),
                Vec::new(),
            )
            .await?;
        let label = parse_immediate_label(&generation.text, item.n());
        Ok((AnswerStageResult::immediate(label), generation))
    }

    /// Generate a fresh draft at the endpoint's draft sampling settings.
    pub async fn self_draft(&self, item: &McqItem) -> Result<(ThinkingDraft, Generation)> {
        let conditioning = format!(
            "{}{}\n",
            self.base_conditioning(item),
            self.endpoint.think_open
        );
        let sampling = self
            .endpoint
            .draft_sampling
            .clone()
            .unwrap_or_else(|| self.endpoint.sampling.clone());
        let generation = self
            .complete(
                RequestKind::SelfDraft,
                conditioning,
                &sampling,
                vec![self.endpoint.think_close.clone()],
            )
            .await?;
        let draft = ThinkingDraft::new(&item.id, &self.endpoint.model_name, generation.text.clone());
        Ok((draft, generation))
    }

    pub async fn call_annotator(&self, prompt: &str) -> Result<Generation> {
        self.complete(
            RequestKind::Annotate,
            prompt.to_string(),
            &self.endpoint.sampling.clone(),
            Vec::new(),
        )
        .await
    }

    pub async fn call_judge(&self, prompt: &str) -> Result<Generation> {
        self.complete(
            RequestKind::Judge,
            prompt.to_string(),
            &self.endpoint.sampling.clone(),
            Vec::new(),
        )
        .await
    }
}
