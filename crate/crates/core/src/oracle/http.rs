//! Chat-completions client for hosted vision-language oracles.
//!
//! Speaks the OpenAI-compatible protocol: a JSON `messages` array with text
//! and base64 `image_url` parts, bearer-token auth, temperature 0 by
//! default. Logit requests ask for token log-probabilities and extract the
//! option-letter entries, renormalizing over the options; endpoints that
//! expose no log-probabilities degrade to a one-hot vector built from the
//! parsed answer, flagged [`approximate_logits`](crate::oracle::OracleReply).
//!
//! Transport failures are retried with exponential backoff (bounded);
//! timeouts and HTTP error statuses are not. A gate bounds concurrent
//! requests and enforces a minimum inter-request interval per client, and
//! every request carries a correlation id in the logs.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::oracle::prompts::PromptSet;
use crate::oracle::{Oracle, OracleError, OracleReply, OracleRequest, OracleRequestKind};
use crate::rewards::{option_letter, parse_option_index};

/// Environment variable that overrides the configured API token.
pub const TOKEN_ENV_VAR: &str = "FRAMEPICK_API_TOKEN";

/// Logit assigned to non-chosen options in the one-hot fallback.
const ONE_HOT_FLOOR: f64 = -20.0;
/// Offset below the observed minimum for letters missing from the
/// top-logprob list.
const MISSING_LETTER_OFFSET: f64 = 10.0;
/// Base backoff delay for transport retries.
const BACKOFF_BASE_MS: u64 = 100;

/// Connection settings for a chat-completions endpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HttpOracleConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    /// Model identifier sent with every request.
    pub model: String,
    /// Bearer token; `None` sends no auth header. Overridden by the
    /// `FRAMEPICK_API_TOKEN` environment variable when set.
    #[serde(default)]
    pub api_token: Option<String>,
    /// Per-request deadline.
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Retries after transport failures (timeouts and HTTP errors are
    /// never retried).
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Maximum concurrent in-flight requests through this client.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Minimum spacing between request dispatches, for endpoint rate
    /// limits. Zero disables pacing.
    #[serde(default)]
    pub min_interval_ms: u64,
    /// Directory of prompt template overrides; `None` uses the built-ins.
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    2
}
fn default_max_in_flight() -> usize {
    4
}

impl HttpOracleConfig {
    /// Applies the `FRAMEPICK_API_TOKEN` environment override, if set.
    pub fn resolve_token_from_env(&mut self) {
        if let Ok(token) = std::env::var(TOKEN_ENV_VAR) {
            if !token.is_empty() {
                self.api_token = Some(token);
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(Error::Config("oracle endpoint URL is empty".into()));
        }
        if self.model.is_empty() {
            return Err(Error::Config("oracle model name is empty".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("oracle timeout must be > 0 ms".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

/// Bounds in-flight requests and paces dispatches.
struct RequestGate {
    state: Mutex<GateState>,
    cond: Condvar,
    max_in_flight: usize,
    min_interval: Duration,
}

struct GateState {
    in_flight: usize,
    next_slot: Option<Instant>,
}

struct GatePass<'a> {
    gate: &'a RequestGate,
}

impl RequestGate {
    fn new(max_in_flight: usize, min_interval: Duration) -> RequestGate {
        RequestGate {
            state: Mutex::new(GateState {
                in_flight: 0,
                next_slot: None,
            }),
            cond: Condvar::new(),
            max_in_flight,
            min_interval,
        }
    }

    /// Blocks until an in-flight slot and a dispatch time are available.
    fn acquire(&self) -> GatePass<'_> {
        let mut state = self.state.lock().expect("gate lock poisoned");
        while state.in_flight >= self.max_in_flight {
            state = self.cond.wait(state).expect("gate lock poisoned");
        }
        state.in_flight += 1;
        let now = Instant::now();
        let scheduled = match state.next_slot {
            Some(slot) if slot > now => slot,
            _ => now,
        };
        state.next_slot = Some(scheduled + self.min_interval);
        drop(state);
        let wait = scheduled.saturating_duration_since(Instant::now());
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
        GatePass { gate: self }
    }
}

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        let mut state = self.gate.state.lock().expect("gate lock poisoned");
        state.in_flight -= 1;
        drop(state);
        self.gate.cond.notify_one();
    }
}

/// Blocking chat-completions oracle client.
pub struct HttpOracle {
    config: HttpOracleConfig,
    prompts: PromptSet,
    client: reqwest::blocking::Client,
    gate: RequestGate,
    correlation: AtomicU64,
}

impl HttpOracle {
    /// Builds a client from validated settings; loads prompt overrides.
    pub fn new(config: HttpOracleConfig) -> Result<HttpOracle> {
        config.validate()?;
        let prompts = match &config.prompt_dir {
            Some(dir) => PromptSet::from_dir(dir)?,
            None => PromptSet::default(),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        let gate = RequestGate::new(
            config.max_in_flight,
            Duration::from_millis(config.min_interval_ms),
        );
        Ok(HttpOracle {
            config,
            prompts,
            client,
            gate,
            correlation: AtomicU64::new(0),
        })
    }

    fn build_body(&self, request: &OracleRequest) -> std::result::Result<Value, OracleError> {
        match request.kind {
            OracleRequestKind::ElementsFromAnswer => {
                if !request.frames.is_empty() {
                    return Err(OracleError::Precondition(
                        "answer dissection is text-only; frames must not be attached".into(),
                    ));
                }
                if request.answer_text.is_none() {
                    return Err(OracleError::Precondition(
                        "answer dissection needs answer_text".into(),
                    ));
                }
            }
            _ => {
                if request.frames.is_empty() {
                    return Err(OracleError::Precondition(format!(
                        "{:?} request carries no frames",
                        request.kind
                    )));
                }
            }
        }
        if !request.temperature.is_finite() || request.temperature < 0.0 {
            return Err(OracleError::Precondition(format!(
                "temperature must be finite and >= 0, got {}",
                request.temperature
            )));
        }

        let prompt = self.prompts.render(
            request.kind,
            &request.question,
            request.answer_text.as_deref(),
        );
        let mut parts = vec![json!({ "type": "text", "text": prompt })];
        for frame in &request.frames {
            if let Some(b64) = &frame.image_base64 {
                parts.push(json!({
                    "type": "image_url",
                    "image_url": { "url": format!("data:image/jpeg;base64,{b64}") }
                }));
            }
        }
        let mut body = json!({
            "model": self.config.model,
            "temperature": request.temperature,
            "messages": [ { "role": "user", "content": parts } ],
        });
        if request.kind == OracleRequestKind::Logits {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(20);
        }
        Ok(body)
    }

    fn send_with_retries(
        &self,
        body: &Value,
        correlation_id: u64,
    ) -> std::result::Result<Value, OracleError> {
        let endpoint = &self.config.endpoint;
        let mut attempt = 0u32;
        loop {
            let mut req = self
                .client
                .post(endpoint)
                .header("content-type", "application/json")
                .json(body);
            if let Some(token) = &self.config.api_token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| {
                        if e.is_timeout() {
                            OracleError::Timeout {
                                after_ms: self.config.timeout_ms,
                            }
                        } else {
                            OracleError::Transport {
                                endpoint: endpoint.clone(),
                                message: format!("reading body: {e}"),
                            }
                        }
                    })?;
                    if !status.is_success() {
                        let mut body = text;
                        body.truncate(2000);
                        return Err(OracleError::Status {
                            status: status.as_u16(),
                            body,
                        });
                    }
                    return serde_json::from_str(&text)
                        .map_err(|e| OracleError::Parse(format!("response is not JSON: {e}")));
                }
                Err(e) if e.is_timeout() => {
                    return Err(OracleError::Timeout {
                        after_ms: self.config.timeout_ms,
                    });
                }
                Err(e) => {
                    if attempt < self.config.max_retries {
                        let delay = BACKOFF_BASE_MS << attempt;
                        log::warn!(
                            "oracle request {correlation_id}: transport failure ({e}); \
                             retry {} of {} after {delay} ms",
                            attempt + 1,
                            self.config.max_retries
                        );
                        std::thread::sleep(Duration::from_millis(delay));
                        attempt += 1;
                        continue;
                    }
                    return Err(OracleError::Transport {
                        endpoint: endpoint.clone(),
                        message: e.to_string(),
                    });
                }
            }
        }
    }
}

impl Oracle for HttpOracle {
    fn call(&self, request: &OracleRequest) -> std::result::Result<OracleReply, OracleError> {
        let body = self.build_body(request)?;
        let id = self.correlation.fetch_add(1, Ordering::Relaxed);
        let _pass = self.gate.acquire();
        log::debug!(
            "oracle request {id}: kind={:?}, frames={}, endpoint={}",
            request.kind,
            request.frames.len(),
            self.config.endpoint
        );
        let started = Instant::now();
        let response = self.send_with_retries(&body, id)?;
        let latency_ms = started.elapsed().as_millis() as u64;

        let content = extract_content(&response)?;
        let (text, logits, approximate) = match request.kind {
            OracleRequestKind::Logits => {
                let option_count = request.question.options.len();
                match extract_option_logprobs(&response, option_count) {
                    Some((logits, complete)) => (Some(content), Some(logits), !complete),
                    None => {
                        let chosen = parse_option_index(&content, &request.question.options)
                            .ok_or_else(|| {
                            OracleError::Parse(format!(
                                "no log-probabilities and unparseable answer: {content:?}"
                            ))
                        })?;
                        let mut logits = vec![ONE_HOT_FLOOR; option_count];
                        logits[chosen] = 0.0;
                        log::warn!(
                            "oracle reply {id}: endpoint exposed no log-probabilities; \
                             using one-hot fallback on option {}",
                            option_letter(chosen)
                        );
                        (Some(content), Some(logits), true)
                    }
                }
            }
            _ => (Some(content), None, false),
        };
        log::debug!("oracle reply {id}: latency={latency_ms} ms, approximate={approximate}");
        Ok(OracleReply {
            text,
            logits,
            approximate_logits: approximate,
            latency_ms,
            backend: format!("http:{}", self.config.model),
        })
    }
}

/// Pulls `choices[0].message.content` out of a chat-completions response.
fn extract_content(response: &Value) -> std::result::Result<String, OracleError> {
    response["choices"][0]["message"]["content"]
        .as_str()
        .map(|s| s.to_string())
        .ok_or_else(|| {
            OracleError::Parse("response lacks choices[0].message.content".into())
        })
}

/// Normalizes a token to an option index: strips wrapping whitespace and
/// punctuation, then accepts a single letter within the option range.
fn letter_token_to_index(token: &str, option_count: usize) -> Option<usize> {
    let stripped = token
        .trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    let mut chars = stripped.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => {
            let upper = c.to_ascii_uppercase();
            if upper.is_ascii_uppercase() {
                let idx = (upper as u8 - b'A') as usize;
                if idx < option_count {
                    return Some(idx);
                }
            }
            None
        }
        _ => None,
    }
}

/// Extracts option-letter log-probabilities from a logprobs-bearing
/// response, renormalized over the options (log-softmax across the letters
/// found). Returns `None` when the response carries no usable option-letter
/// entry; the boolean is true when every option letter was observed.
fn extract_option_logprobs(response: &Value, option_count: usize) -> Option<(Vec<f64>, bool)> {
    let entries = response["choices"][0]["logprobs"]["content"].as_array()?;
    // The answer token is the first generated token that is itself an
    // option letter; its alternatives list carries the other letters.
    let answer_entry = entries.iter().find(|e| {
        e["token"]
            .as_str()
            .and_then(|t| letter_token_to_index(t, option_count))
            .is_some()
    })?;

    let mut by_option: Vec<Option<f64>> = vec![None; option_count];
    let mut consider = |token: &str, logprob: f64| {
        if let Some(idx) = letter_token_to_index(token, option_count) {
            let slot = &mut by_option[idx];
            // Multiple token spellings of one letter: keep the likeliest.
            if slot.map_or(true, |existing| logprob > existing) {
                *slot = Some(logprob);
            }
        }
    };
    if let (Some(token), Some(lp)) = (
        answer_entry["token"].as_str(),
        answer_entry["logprob"].as_f64(),
    ) {
        consider(token, lp);
    }
    if let Some(alternatives) = answer_entry["top_logprobs"].as_array() {
        for alt in alternatives {
            if let (Some(token), Some(lp)) = (alt["token"].as_str(), alt["logprob"].as_f64()) {
                consider(token, lp);
            }
        }
    }

    let observed: Vec<f64> = by_option.iter().filter_map(|v| *v).collect();
    if observed.is_empty() {
        return None;
    }
    let complete = observed.len() == option_count;
    let fill = observed.iter().cloned().fold(f64::INFINITY, f64::min) - MISSING_LETTER_OFFSET;
    let raw: Vec<f64> = by_option.iter().map(|v| v.unwrap_or(fill)).collect();

    // Renormalize over the options: log-softmax, numerically stable.
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = raw.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    Some((raw.iter().map(|l| l - log_z).collect(), complete))
}
