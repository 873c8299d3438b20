//! LLM clients and stage-two grading of hard pairs.

use std::collections::HashMap;
use std::io::BufRead;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::{parse_response, render_prompt, InstructionKind, ParsedLabel};
use super::PairRecord;
use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "EVRET_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "EVRET_LLM_API_KEY";
pub const ENV_MODEL: &str = "EVRET_LLM_MODEL";

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Canned responses keyed by the SHA-256 of the prompt.
#[derive(Debug, Clone, Default)]
pub struct StubClient {
    responses: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubEntry {
    pub prompt_sha256: String,
    pub response: String,
}

impl StubClient {
    pub fn new(responses: HashMap<String, String>) -> Self {
        Self { responses }
    }

    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.responses.insert(prompt_hash(prompt), response.into());
    }

    /// One JSON [`StubEntry`] per line.
    pub fn from_jsonl<R: BufRead>(r: R, source: &std::path::Path) -> Result<Self> {
        let mut responses = HashMap::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: StubEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: source.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
            responses.insert(e.prompt_sha256, e.response);
        }
        Ok(Self { responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl LlmClient for StubClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let h = prompt_hash(prompt);
        self.responses
            .get(&h)
            .cloned()
            .ok_or_else(|| Error::Transport(format!("stub has no response for prompt {h}")))
    }
}

/// Minimal chat-completion client (`POST {endpoint}` with a `messages` array).
pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    model: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl HttpClient {
    pub fn new(endpoint: String, api_key: Option<String>, model: String, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            endpoint,
            api_key,
            model,
        }
    }

    /// Reads endpoint, key and model from the environment; `None` when no
    /// endpoint is set.
    pub fn from_env(timeout: Duration) -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into());
        Some(Self::new(endpoint, std::env::var(ENV_API_KEY).ok(), model, timeout))
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::Transport("response has no choices".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmOptions {
    pub instruction: InstructionKind,
    pub concurrency: usize,
    /// Extra attempts after a transport failure.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for LlmOptions {
    fn default() -> Self {
        Self {
            instruction: InstructionKind::CotGrade,
            concurrency: 4,
            max_retries: 3,
            backoff_ms: 200,
            timeout_secs: 60,
        }
    }
}

/// One request and what came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub pair_id: String,
    pub attempt: u32,
    pub prompt_sha256: String,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineOutcome {
    /// One entry per input pair; `None` when the pair could not be labelled.
    pub grades: Vec<Option<u8>>,
    /// Every request in pair order, then attempt order.
    pub audit: Vec<AuditRecord>,
}

/// Grades every pair with the LLM. Transport errors are retried with
/// exponential backoff; an unparseable reply is retried once and the pair
/// is then left unlabelled.
pub fn fine_annotate(pairs: &[PairRecord], client: &dyn LlmClient, opts: &LlmOptions) -> Result<FineOutcome> {
    if !matches!(
        opts.instruction,
        InstructionKind::CotGrade | InstructionKind::MultiClass5
    ) {
        return Err(Error::Config(format!(
            "fine annotation grades single documents; {} needs several",
            opts.instruction.name()
        )));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Option<u8>, Vec<AuditRecord>)>> = Mutex::new(Vec::new());
    let workers = opts.concurrency.clamp(1, pairs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(pair) = pairs.get(i) else { break };
                let (grade, audit) = grade_one(pair, client, opts);
                results.lock().expect("no worker panics").push((i, grade, audit));
            });
        }
    });
    let mut results = results.into_inner().expect("no worker panics");
    results.sort_by_key(|r| r.0);
    let mut grades = Vec::with_capacity(pairs.len());
    let mut audit = Vec::new();
    for (_, g, a) in results {
        grades.push(g);
        audit.extend(a);
    }
    Ok(FineOutcome { grades, audit })
}

fn grade_one(pair: &PairRecord, client: &dyn LlmClient, opts: &LlmOptions) -> (Option<u8>, Vec<AuditRecord>) {
    let kind = opts.instruction;
    let mut audit = Vec::new();
    let prompt = match render_prompt(kind, &pair.left, &[pair.doc.as_str()]) {
        Ok(p) => p,
        Err(e) => {
            warn!("{}: {e}", pair.id());
            return (None, audit);
        }
    };
    let hash = prompt_hash(&prompt);
    let mut transport_failures = 0;
    let mut parse_failures = 0;
    for attempt in 0.. {
        let mut record = AuditRecord {
            pair_id: pair.id(),
            attempt,
            prompt_sha256: hash.clone(),
            prompt: prompt.clone(),
            response: None,
            error: None,
        };
        match client.complete(&prompt) {
            Ok(raw) => {
                let parsed = parse_response(kind, &raw, 1);
                record.response = Some(raw);
                match parsed {
                    Ok(ParsedLabel::Grade(g)) => {
                        audit.push(record);
                        return (Some(g), audit);
                    }
                    Ok(other) => record.error = Some(format!("unexpected label {other:?}")),
                    Err(e) => record.error = Some(e.to_string()),
                }
                audit.push(record);
                parse_failures += 1;
                if parse_failures > 1 {
                    warn!("{}: dropped after two unparseable replies", pair.id());
                    return (None, audit);
                }
            }
            Err(e) => {
                record.error = Some(e.to_string());
                audit.push(record);
                transport_failures += 1;
                if transport_failures > opts.max_retries {
                    warn!("{}: unlabelled after {transport_failures} transport failures", pair.id());
                    return (None, audit);
                }
                let wait = opts.backoff_ms.saturating_mul(1 << (transport_failures - 1).min(16));
                if wait > 0 {
                    std::thread::sleep(Duration::from_millis(wait));
                }
            }
        }
    }
    unreachable!("the retry loop always returns")
}
