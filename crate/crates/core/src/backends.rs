//! Pluggable generation backends behind one `complete` contract: a
//! remote completion API client, a deterministic extractive mock, and
//! the two non-LLM baselines (nearest-neighbor retrieval and plain
//! concatenation).

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Incident;
use crate::eval::tokenize;
use crate::summarize::{
    ordinal, render_incident, sort_for_context, SUMMARY_INSTRUCTION, TITLE_INSTRUCTION,
};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited (retry after {retry_after_secs:?} s)")]
    RateLimit { retry_after_secs: Option<u64> },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("retrieval baseline has no training examples")]
    EmptyTrainingSet,
    #[error("concat baseline needs at least one incident")]
    EmptyIncidentList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Option<String>,
    pub model_name: String,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.7,
            max_tokens: 256,
            stop: None,
            model_name: "extractive-mock".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RemoteCompletion,
    ExtractiveMock,
    IrBaseline,
    ConcatBaseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub credential_env: Option<String>,
}

impl BackendDescriptor {
    pub fn mock() -> Self {
        BackendDescriptor {
            kind: BackendKind::ExtractiveMock,
            endpoint: None,
            credential_env: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind == BackendKind::RemoteCompletion
            && (self.endpoint.is_none() || self.credential_env.is_none())
        {
            return Err(BackendError::BadRequest(
                "remote_completion requires endpoint and credential_env".into(),
            ));
        }
        Ok(())
    }
}

/// The contract every backend satisfies: `n` texts for one prompt,
/// never fewer, never a partial result.
pub trait GenerationBackend: Send + Sync {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError>;
}

fn check_request(prompt: &str, n: usize) -> Result<(), BackendError> {
    if prompt.is_empty() {
        return Err(BackendError::BadRequest("prompt must be non-empty".into()));
    }
    if n == 0 {
        return Err(BackendError::BadRequest("n must be >= 1".into()));
    }
    Ok(())
}

/// One incident as recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedIncident {
    pub title: String,
    pub description: String,
    pub service: String,
}

fn take_between<'a>(text: &'a str, start: &str, end: &str) -> Option<(&'a str, &'a str)> {
    let after = &text[text.find(start)? + start.len()..];
    let stop = after.find(end)?;
    Some((&after[..stop], &after[stop..]))
}

/// Parses incident titles, descriptions, and services back out of a
/// prompt produced by the context builder.
pub fn parse_prompt(prompt: &str) -> Result<Vec<ParsedIncident>, BackendError> {
    let mut incidents = Vec::new();
    let mut rest = prompt;
    for i in 1.. {
        let ord = ordinal(i);
        let title_marker = format!("The title of the {ord} incident is ");
        if !rest.contains(title_marker.as_str()) {
            break;
        }
        let desc_marker = format!(". The description of the {ord} incident is ");
        let svc_marker = format!(". The service of the {ord} incident is ");
        let comp_marker = format!(". The component of the {ord} incident is ");
        let (title, after) = take_between(rest, &title_marker, &desc_marker)
            .ok_or_else(|| BackendError::BadRequest("prompt missing description".into()))?;
        let (description, after) = take_between(after, &desc_marker, &svc_marker)
            .ok_or_else(|| BackendError::BadRequest("prompt missing service".into()))?;
        let (service, after) = take_between(after, &svc_marker, &comp_marker)
            .ok_or_else(|| BackendError::BadRequest("prompt missing component".into()))?;
        incidents.push(ParsedIncident {
            title: title.to_owned(),
            description: description.to_owned(),
            service: service.to_owned(),
        });
        rest = after;
    }
    if incidents.is_empty() {
        return Err(BackendError::BadRequest(
            "prompt does not match the incident rendering grammar".into(),
        ));
    }
    Ok(incidents)
}

/// Deterministic test double standing in for a fine-tuned model.
/// Candidate k echoes the descriptions of the first k+1 incidents with
/// an impacted-services prefix; title mode names the first incident's
/// service.
pub fn extractive_mock(prompt: &str, n: usize) -> Result<Vec<String>, BackendError> {
    check_request(prompt, n)?;
    let incidents = parse_prompt(prompt)?;
    if prompt.trim_end().ends_with(TITLE_INSTRUCTION) {
        return Ok(vec![format!("Outage for {}", incidents[0].service); n]);
    }
    if !prompt.trim_end().ends_with(SUMMARY_INSTRUCTION) {
        return Err(BackendError::BadRequest(
            "prompt lacks a known instruction suffix".into(),
        ));
    }
    let mut candidates = Vec::with_capacity(n);
    for k in 0..n {
        let used = &incidents[..(k + 1).min(incidents.len())];
        let mut services: Vec<&str> = Vec::new();
        for inc in used {
            if !services.contains(&inc.service.as_str()) {
                services.push(&inc.service);
            }
        }
        let descriptions: Vec<&str> = used.iter().map(|i| i.description.as_str()).collect();
        candidates.push(format!(
            "The outage impacted {}. {}",
            services.join(", "),
            descriptions.join(" ")
        ));
    }
    Ok(candidates)
}

pub struct ExtractiveMock;

impl GenerationBackend for ExtractiveMock {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        _params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        extractive_mock(prompt, n)
    }
}

/// One retrieval-baseline training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrExample {
    pub context: String,
    pub completion: String,
    pub declared_at: DateTime<Utc>,
    pub outage_id: String,
}

fn token_counts(text: &str) -> std::collections::BTreeMap<String, f64> {
    let mut counts = std::collections::BTreeMap::new();
    for token in tokenize(text) {
        *counts.entry(token).or_insert(0.0) += 1.0;
    }
    counts
}

pub(crate) fn cosine(a: &str, b: &str) -> f64 {
    let ca = token_counts(a);
    let cb = token_counts(b);
    if ca.is_empty() || cb.is_empty() {
        return 0.0;
    }
    let dot: f64 = ca
        .iter()
        .filter_map(|(t, x)| cb.get(t).map(|y| x * y))
        .sum();
    let norm = |m: &std::collections::BTreeMap<String, f64>| {
        m.values().map(|v| v * v).sum::<f64>().sqrt()
    };
    dot / (norm(&ca) * norm(&cb))
}

/// Bag-of-words nearest neighbor: the completions of the `k` training
/// contexts closest to the query by cosine similarity. Ties break by
/// earlier declared_at, then id.
pub fn ir_retrieve(
    train: &[IrExample],
    query_context: &str,
    k: usize,
) -> Result<Vec<String>, BackendError> {
    if train.is_empty() {
        return Err(BackendError::EmptyTrainingSet);
    }
    if k == 0 {
        return Err(BackendError::BadRequest("k must be >= 1".into()));
    }
    let mut scored: Vec<(f64, &IrExample)> = train
        .iter()
        .map(|ex| (cosine(&ex.context, query_context), ex))
        .collect();
    scored.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap()
            .then(x.1.declared_at.cmp(&y.1.declared_at))
            .then(x.1.outage_id.cmp(&y.1.outage_id))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(_, ex)| ex.completion.clone())
        .collect())
}

pub struct IrBackend {
    pub train: Vec<IrExample>,
}

impl GenerationBackend for IrBackend {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        _params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        check_request(prompt, n)?;
        let mut texts = ir_retrieve(&self.train, prompt, n)?;
        // Fewer training examples than n: repeat the last neighbor so
        // the contract of exactly n texts holds.
        while texts.len() < n {
            let last = texts.last().cloned().unwrap_or_default();
            texts.push(last);
        }
        Ok(texts)
    }
}

/// Rule-based baseline: the severity-sorted incident rendering itself,
/// with no instruction suffix.
pub fn concat_baseline(incidents: &[Incident]) -> Result<String, BackendError> {
    if incidents.is_empty() {
        return Err(BackendError::EmptyIncidentList);
    }
    let sorted = sort_for_context(incidents);
    let blocks: Vec<String> = sorted
        .iter()
        .enumerate()
        .map(|(i, inc)| render_incident(inc, i + 1))
        .collect();
    Ok(blocks.join(" "))
}

pub struct ConcatBackend;

impl GenerationBackend for ConcatBackend {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        _params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        check_request(prompt, n)?;
        let stripped = prompt
            .trim_end()
            .trim_end_matches(SUMMARY_INSTRUCTION)
            .trim_end_matches(TITLE_INSTRUCTION)
            .trim_end()
            .to_owned();
        Ok(vec![stripped; n])
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    n: usize,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a str>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

/// HTTP client for a hosted completion endpoint. The credential is
/// read from the environment variable named in the descriptor; a
/// missing credential fails before any network call.
pub struct RemoteCompletionBackend {
    pub endpoint: String,
    pub credential_env: String,
    client: reqwest::blocking::Client,
}

impl RemoteCompletionBackend {
    pub fn from_descriptor(descriptor: &BackendDescriptor) -> Result<Self, BackendError> {
        descriptor.validate()?;
        if descriptor.kind != BackendKind::RemoteCompletion {
            return Err(BackendError::BadRequest(
                "descriptor is not remote_completion".into(),
            ));
        }
        Ok(RemoteCompletionBackend {
            endpoint: descriptor.endpoint.clone().unwrap(),
            credential_env: descriptor.credential_env.clone().unwrap(),
            client: reqwest::blocking::Client::new(),
        })
    }
}

impl GenerationBackend for RemoteCompletionBackend {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        params: &GenerationParams,
    ) -> Result<Vec<String>, BackendError> {
        check_request(prompt, n)?;
        let credential = std::env::var(&self.credential_env).map_err(|_| {
            BackendError::Auth(format!(
                "credential environment variable {} is not set",
                self.credential_env
            ))
        })?;
        let body = CompletionRequest {
            model: &params.model_name,
            prompt,
            n,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            stop: params.stop.as_deref(),
        };
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(credential)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(BackendError::Auth(format!("endpoint returned {status}")));
        }
        if status.as_u16() == 429 {
            let retry_after_secs = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse().ok());
            return Err(BackendError::RateLimit { retry_after_secs });
        }
        if status.is_client_error() {
            return Err(BackendError::BadRequest(format!(
                "endpoint returned {status}"
            )));
        }
        if !status.is_success() {
            return Err(BackendError::Transport(format!(
                "endpoint returned {status}"
            )));
        }
        let parsed: CompletionResponse = response
            .json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if parsed.choices.len() < n {
            return Err(BackendError::Transport(format!(
                "requested {n} samples, got {}",
                parsed.choices.len()
            )));
        }
        Ok(parsed
            .choices
            .into_iter()
            .take(n)
            .map(|c| c.text)
            .collect())
    }
}
