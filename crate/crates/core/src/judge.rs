//! Client for OpenAI-compatible chat-completion endpoints.
//!
//! Provides the remote claim extractor, the remote entailment checker, remote
//! note generation and the pairwise note judge. Every judge response is
//! validated against [`JudgeVerdict`] before it is returned.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::claims::{
    canonical_text, Claim, ClaimExtractor, ClaimSet, EntailmentChecker, ExtractorInfo, TextKind,
};
use crate::error::{Error, Result};

pub const SYSTEM_GRPO_PROMPT: &str = include_str!("../prompts/system_grpo.txt");
pub const JUDGE_SYSTEM_PROMPT: &str = include_str!("../prompts/judge_system.txt");
pub const JUDGE_USER_TEMPLATE: &str = include_str!("../prompts/judge_user_template.txt");
pub const JUDGE_SCHEMA_JSON: &str = include_str!("../prompts/judge_schema.json");
pub const EXTRACT_CLAIMS_PROMPT: &str = include_str!("../prompts/extract_claims.txt");
pub const ENTAILMENT_PROMPT: &str = include_str!("../prompts/entailment.txt");

/// Bumped whenever the extraction or entailment prompt changes.
pub const REMOTE_PROMPT_VERSION: &str = "1";

pub const REQUEST_ID_HEADER: &str = "x-request-id";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `https://api.example.com/v1`.
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token. Empty means no auth header.
    pub api_key_env_var: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub temperature: f64,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o".into(),
            api_key_env_var: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            max_in_flight: 4,
            temperature: 0.0,
            backoff_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config(format!(
                "timeout {} must be positive",
                self.timeout_secs
            )));
        }
        if self.base_url.is_empty() || self.model_name.is_empty() {
            return Err(Error::Config(
                "endpoint base_url and model_name must be set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("permit lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("permit lock");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("permit lock") += 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

/// Blocking chat-completions client, shareable across threads.
pub struct JudgeClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
    permits: Permits,
    next_id: AtomicU64,
}

impl JudgeClient {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        let api_key = if config.api_key_env_var.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env_var).map_err(|_| {
                Error::Config(format!(
                    "API key environment variable `{}` is not set",
                    config.api_key_env_var
                ))
            })?)
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            permits: Permits::new(config.max_in_flight),
            config,
            http,
            api_key,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << attempt.min(16)))
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> std::result::Result<String, Attempt> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let mut req = self
            .http
            .post(self.endpoint())
            .header(REQUEST_ID_HEADER, &id)
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if let Some(echo) = resp.headers().get(REQUEST_ID_HEADER) {
            if echo.as_bytes() != id.as_bytes() {
                return Err(Attempt::Retry(format!(
                    "response correlation id {:?} does not match request {id}",
                    echo
                )));
            }
        }
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::Request {
                status: status.as_u16(),
                body: text,
            }));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Retry(format!("malformed completion body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Retry("completion has no message content".into()))
    }

    /// Sends one system + user exchange and returns the raw completion text.
    /// Transient failures (connection errors, 429, 5xx) are retried with
    /// exponential backoff; other 4xx responses fail immediately.
    pub fn chat_complete(&self, system_prompt: &str, user_prompt: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.config.model_name,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: system_prompt,
                },
                ChatMessage {
                    role: "user",
                    content: user_prompt,
                },
            ],
            temperature: self.config.temperature,
        };
        let _permit = self.permits.acquire();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(self.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("chat completion attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Transport {
            attempts: self.config.max_retries + 1,
            message: last,
        })
    }

    /// Calls the endpoint until `parse` accepts a response, up to
    /// `max_retries` extra calls.
    fn complete_parsed<T>(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        mut parse: impl FnMut(&str) -> Result<T>,
    ) -> Result<T> {
        let mut last_err = None;
        for _ in 0..=self.config.max_retries {
            let text = self.chat_complete(system_prompt, user_prompt)?;
            match parse(&text) {
                Ok(v) => return Ok(v),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    pub fn llm_extract_claims(&self, text: &str, kind: TextKind) -> Result<ClaimSet> {
        let label = match kind {
            TextKind::Dialogue => "Dialogue",
            TextKind::Note => "Clinical note",
        };
        let user = format!("{label}:\n<<<\n{text}\n>>>");
        self.complete_parsed(EXTRACT_CLAIMS_PROMPT, &user, parse_claim_lines)
    }

    pub fn llm_entails(&self, premise: &str, claim: &Claim) -> Result<bool> {
        let user = format!("Premise:\n<<<\n{premise}\n>>>\n\nClaim: {}", claim.text);
        self.complete_parsed(ENTAILMENT_PROMPT, &user, parse_yes_no)
    }

    /// Generates a note for `dialogue_text` under the GRPO system prompt.
    pub fn generate_note(&self, dialogue_text: &str) -> Result<String> {
        self.chat_complete(SYSTEM_GRPO_PROMPT, dialogue_text)
    }

    pub fn pairwise_judge(
        &self,
        dialogue_text: &str,
        base_note: &str,
        grpo_note: &str,
    ) -> Result<JudgeVerdict> {
        let user = judge_user_prompt(dialogue_text, base_note, grpo_note);
        self.complete_parsed(JUDGE_SYSTEM_PROMPT, &user, parse_verdict)
    }
}

/// Fills the judge user template. Placeholders are substituted in one pass,
/// so braces inside the inputs are left alone.
pub fn judge_user_prompt(dialogue_text: &str, base_note: &str, grpo_note: &str) -> String {
    let schema = JUDGE_SCHEMA_JSON.trim_end();
    let mut out = String::with_capacity(JUDGE_USER_TEMPLATE.len() + dialogue_text.len() * 2);
    let mut rest = JUDGE_USER_TEMPLATE;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let value = [
            ("{dialogue_text}", dialogue_text),
            ("{base_note}", base_note),
            ("{grpo_note}", grpo_note),
            ("{schema}", schema),
        ]
        .into_iter()
        .find(|(p, _)| tail.starts_with(p));
        match value {
            Some((p, v)) => {
                out.push_str(v);
                rest = &tail[p.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn parse_claim_lines(text: &str) -> Result<ClaimSet> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::Extraction("empty extraction response".into()));
    }
    if trimmed.eq_ignore_ascii_case("none") {
        return Ok(ClaimSet::new());
    }
    let set: ClaimSet = trimmed
        .lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(['-', '*', '•'])
                .trim_start_matches(|c: char| c.is_ascii_digit())
                .trim_start_matches(['.', ')'])
        })
        .filter(|l| !canonical_text(l).is_empty())
        .map(Claim::new)
        .collect();
    if set.is_empty() {
        return Err(Error::Extraction(format!(
            "no claims in response: {trimmed}"
        )));
    }
    Ok(set)
}

fn parse_yes_no(text: &str) -> Result<bool> {
    let word = text.split_whitespace().next().map(|w| {
        w.trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase()
    });
    match word.as_deref() {
        Some("yes") => Ok(true),
        Some("no") => Ok(false),
        _ => Err(Error::Validation {
            reason: "entailment answer is neither yes nor no".into(),
            text: text.to_string(),
        }),
    }
}

/// Claim extraction through the endpoint.
pub struct RemoteExtractor {
    client: Arc<JudgeClient>,
}

impl RemoteExtractor {
    pub fn new(client: Arc<JudgeClient>) -> Self {
        Self { client }
    }
}

impl ClaimExtractor for RemoteExtractor {
    fn info(&self) -> ExtractorInfo {
        ExtractorInfo {
            name: format!("remote:{}", self.client.config().model_name),
            version: REMOTE_PROMPT_VERSION.into(),
        }
    }

    fn extract(&self, text: &str, kind: TextKind) -> Result<ClaimSet> {
        if text.trim().is_empty() {
            return Ok(ClaimSet::new());
        }
        self.client.llm_extract_claims(text, kind)
    }
}

/// Entailment through the endpoint; batches run concurrently up to the
/// client's in-flight limit.
pub struct RemoteChecker {
    client: Arc<JudgeClient>,
}

impl RemoteChecker {
    pub fn new(client: Arc<JudgeClient>) -> Self {
        Self { client }
    }
}

impl EntailmentChecker for RemoteChecker {
    fn entails(&self, premise: &str, claim: &Claim) -> Result<bool> {
        self.client.llm_entails(premise, claim)
    }

    fn entails_all(&self, premise: &str, claims: &[Claim]) -> Result<Vec<bool>> {
        let workers = self.client.config().max_in_flight.min(claims.len()).max(1);
        let next = AtomicU64::new(0);
        let results: Mutex<Vec<Option<Result<bool>>>> =
            Mutex::new((0..claims.len()).map(|_| None).collect());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed) as usize;
                    if i >= claims.len() {
                        break;
                    }
                    let r = self.client.llm_entails(premise, &claims[i]);
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .expect("results lock")
            .into_iter()
            .map(|r| r.expect("every claim checked"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    Tie,
    Grpo,
    Base,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalTags {
    pub primary_conditions: Vec<String>,
    pub systems: Vec<String>,
    pub medications: Vec<String>,
    pub procedures: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteFindings {
    pub hallucinations: Vec<String>,
    pub omissions: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionVerdict {
    pub winner: Winner,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub factuality: DimensionVerdict,
    pub completeness: DimensionVerdict,
    pub organization: DimensionVerdict,
    pub brevity: DimensionVerdict,
}

impl Dimensions {
    pub fn get(&self, dim: Dimension) -> Winner {
        match dim {
            Dimension::Factuality => self.factuality.winner,
            Dimension::Completeness => self.completeness.winner,
            Dimension::Organization => self.organization.winner,
            Dimension::Brevity => self.brevity.winner,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dimension {
    Factuality,
    Completeness,
    Organization,
    Brevity,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Factuality,
        Dimension::Completeness,
        Dimension::Organization,
        Dimension::Brevity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Factuality => "factuality",
            Dimension::Completeness => "completeness",
            Dimension::Organization => "organization",
            Dimension::Brevity => "brevity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwisePreference {
    pub dimensions: Dimensions,
    pub overall_winner: Winner,
    pub overall_confidence: u8,
    pub rationale_short: String,
}

/// Structured pairwise judgment of a base note against a GRPO note.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeVerdict {
    pub clinical_tags: ClinicalTags,
    pub base: NoteFindings,
    pub grpo: NoteFindings,
    pub pairwise_preference: PairwisePreference,
}

impl JudgeVerdict {
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

/// Strict parse: every field required, no extra fields, enums and the 1–5
/// confidence range enforced.
pub fn parse_verdict(text: &str) -> Result<JudgeVerdict> {
    let invalid = |reason: String| Error::Validation {
        reason,
        text: text.to_string(),
    };
    let verdict: JudgeVerdict =
        serde_json::from_str(text.trim()).map_err(|e| invalid(e.to_string()))?;
    let c = verdict.pairwise_preference.overall_confidence;
    if !(1..=5).contains(&c) {
        return Err(invalid(format!("overall_confidence {c} outside 1..=5")));
    }
    Ok(verdict)
}
