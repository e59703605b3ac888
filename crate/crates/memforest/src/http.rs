//! Ports backed by a chat-completions and embeddings HTTP endpoint.
//!
//! Requests follow the common `POST {base}/chat/completions` and
//! `POST {base}/embeddings` JSON shapes. Model replies must be a single JSON
//! object matching the port's schema; unknown fields are rejected. A reply
//! that fails to parse gets one repair round trip before the call fails
//! permanently. Transport errors, timeouts, 429 and 5xx responses are
//! transient and retried with exponential backoff.

use std::sync::Arc;
use std::time::Duration;

use memforest_core::backends::mock::render_interval;
use memforest_core::backends::{
    ChildView, Choice, Chooser, Embedder, Extractor, PortCallLedger, PortError, PortKind, PortResult, Planner,
    RootView, Summarizer,
};
use memforest_core::ingest::{ExtractionChunk, FactCandidate};
use memforest_core::retrieval::AnswerContext;
use memforest_core::substrate::{normalize_label, TemporalAnchor, TreeId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const EXTRACT_PROMPT: &str = include_str!("../prompts/extract.txt");
pub const SUMMARIZE_PROMPT: &str = include_str!("../prompts/summarize.txt");
pub const PLAN_PROMPT: &str = include_str!("../prompts/plan.txt");
pub const CHOOSE_PROMPT: &str = include_str!("../prompts/choose.txt");
pub const ANSWER_PROMPT: &str = include_str!("../prompts/answer.txt");

/// First line of a prompt asset, e.g. `prompt: summarize v1`.
pub fn prompt_version(prompt: &str) -> &str {
    prompt.lines().next().unwrap_or("").trim_start_matches("prompt:").trim()
}

fn prompt_body(prompt: &str) -> &str {
    prompt.split_once('\n').map_or(prompt, |(_, rest)| rest).trim()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub embedding_model: String,
    /// Environment variable holding the bearer token. Unset means no auth header.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Extra attempts after a transient failure.
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "local-chat".into(),
            embedding_model: "local-embed".into(),
            api_key_env: None,
            timeout_secs: 60,
            retries: 2,
            backoff_ms: 500,
        }
    }
}

/// Shared HTTP client. Cheap to clone.
#[derive(Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    cfg: Arc<HttpConfig>,
    ledger: Arc<PortCallLedger>,
}

enum Failure {
    Transient(String),
    Permanent(String),
}

impl From<Failure> for PortError {
    fn from(f: Failure) -> Self {
        match f {
            Failure::Transient(m) => PortError::transient(m),
            Failure::Permanent(m) => PortError::permanent(m),
        }
    }
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpClient {
    pub fn new(cfg: HttpConfig, ledger: Arc<PortCallLedger>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(cfg.timeout_secs.max(1))).build();
        Self { agent, cfg: Arc::new(cfg), ledger }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, Failure> {
        let mut req = self.agent.post(&self.url(path)).set("Content-Type", "application/json");
        if let Some(var) = &self.cfg.api_key_env {
            if let Ok(key) = std::env::var(var) {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
        }
        match req.send_json(body) {
            Ok(resp) => resp.into_json::<Value>().map_err(|e| Failure::Transient(format!("reading response: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", text.chars().take(200).collect::<String>());
                if code == 429 || code >= 500 {
                    Err(Failure::Transient(msg))
                } else {
                    Err(Failure::Permanent(msg))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(Failure::Transient(t.to_string())),
        }
    }

    fn post(&self, kind: Option<PortKind>, path: &str, body: &Value) -> Result<Value, Failure> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Ok(v) => {
                    let usage = v.get("usage").and_then(|u| Usage::deserialize(u).ok());
                    if let (Some(kind), Some(u)) = (kind, usage) {
                        self.ledger.record_tokens(kind, u.prompt_tokens, u.completion_tokens);
                    }
                    return Ok(v);
                }
                Err(Failure::Transient(_)) if attempt < self.cfg.retries => {
                    std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms.saturating_mul(1 << attempt.min(10))));
                    attempt += 1;
                }
                Err(f) => return Err(f),
            }
        }
    }

    fn chat(&self, kind: Option<PortKind>, messages: &[Value]) -> Result<String, Failure> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": messages,
        });
        let v = self.post(kind, "chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Failure::Permanent("response has no choices[0].message.content".into()))
    }

    /// Sends one chat request and parses the reply as `T`, with one repair
    /// round trip on a schema failure.
    pub fn chat_json<T: DeserializeOwned>(&self, kind: PortKind, system: &str, user: &str) -> PortResult<T> {
        let mut messages = vec![json!({"role": "system", "content": system}), json!({"role": "user", "content": user})];
        let reply = self.chat(Some(kind), &messages)?;
        let err = match parse_reply::<T>(&reply) {
            Ok(v) => return Ok(v),
            Err(e) => e,
        };
        self.ledger.record_repair(kind);
        messages.push(json!({"role": "assistant", "content": reply}));
        messages.push(json!({
            "role": "user",
            "content": format!("Your reply did not match the required JSON schema ({err}). Reply again with the JSON object only."),
        }));
        let reply = self.chat(Some(kind), &messages)?;
        parse_reply::<T>(&reply).map_err(|e| PortError::permanent(format!("schema violation after repair: {e}")))
    }

    /// Plain-text chat completion outside the metered ports.
    pub fn chat_text(&self, system: &str, user: &str) -> PortResult<String> {
        let messages = [json!({"role": "system", "content": system}), json!({"role": "user", "content": user})];
        Ok(self.chat(None, &messages)?)
    }

    pub fn embed(&self, text: &str) -> PortResult<Vec<f32>> {
        let body = json!({"model": self.cfg.embedding_model, "input": text});
        let v = self.post(Some(PortKind::Embedder), "embeddings", &body)?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| PortError::permanent("response has no data[0].embedding"))?;
        arr.iter()
            .map(|x| x.as_f64().map(|f| f as f32).ok_or_else(|| PortError::permanent("embedding holds a non-number")))
            .collect()
    }
}

/// Strips an optional Markdown code fence and parses strictly.
fn parse_reply<T: DeserializeOwned>(reply: &str) -> Result<T, String> {
    let t = reply.trim();
    let t = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .and_then(|r| r.strip_suffix("```"))
        .unwrap_or(t)
        .trim();
    serde_json::from_str(t).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractReply {
    facts: Vec<ExtractedFact>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractedFact {
    text: String,
    #[serde(default)]
    entities: Vec<String>,
    #[serde(default)]
    topics: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryReply {
    summary: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanReply {
    subqueries: Vec<PlanEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanEntry {
    tree_id: u64,
    subquery: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChooseReply {
    children: Vec<usize>,
}

pub struct HttpExtractor(pub HttpClient);
pub struct HttpSummarizer(pub HttpClient);
pub struct HttpEmbedder(pub HttpClient);
pub struct HttpPlanner(pub HttpClient);
pub struct HttpChooser(pub HttpClient);

impl Extractor for HttpExtractor {
    fn extract(&self, chunk: &ExtractionChunk) -> PortResult<Vec<FactCandidate>> {
        let user = format!("Time: {}\n\n{}", render_interval(&chunk.anchor), chunk.render());
        let reply: ExtractReply = self.0.chat_json(PortKind::Extractor, prompt_body(EXTRACT_PROMPT), &user)?;
        Ok(reply
            .facts
            .into_iter()
            .filter(|f| !f.text.trim().is_empty())
            .map(|f| FactCandidate {
                session_id: chunk.session_id.clone(),
                source: chunk.range(),
                text: f.text.trim().to_string(),
                anchor: chunk.anchor,
                entities: f.entities.iter().map(|e| normalize_label(e)).filter(|e| !e.is_empty()).collect(),
                topics: f.topics.iter().map(|t| normalize_label(t)).filter(|t| !t.is_empty()).collect(),
            })
            .collect())
    }
}

impl Summarizer for HttpSummarizer {
    fn summarize(&self, interval: &TemporalAnchor, texts: &[&str]) -> PortResult<String> {
        let mut user = format!("Interval: {}\n", render_interval(interval));
        for (i, t) in texts.iter().enumerate() {
            user.push_str(&format!("{}. {}\n", i + 1, t));
        }
        let reply: SummaryReply = self.0.chat_json(PortKind::Summarizer, prompt_body(SUMMARIZE_PROMPT), &user)?;
        if reply.summary.trim().is_empty() {
            return Err(PortError::permanent("empty summary"));
        }
        Ok(reply.summary.trim().to_string())
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> PortResult<Vec<f32>> {
        self.0.embed(text)
    }
}

impl Planner for HttpPlanner {
    fn plan(&self, query: &str, roots: &[RootView<'_>]) -> PortResult<Vec<(TreeId, String)>> {
        let mut user = format!("Question: {query}\n\nTrees:\n");
        for r in roots {
            user.push_str(&format!("- id {} ({} tree, topic {}): {}\n", r.tree.0, r.family.as_str(), r.topic, r.summary));
        }
        let reply: PlanReply = self.0.chat_json(PortKind::Planner, prompt_body(PLAN_PROMPT), &user)?;
        let mut out = Vec::new();
        for e in reply.subqueries {
            if !roots.iter().any(|r| r.tree.0 == e.tree_id) {
                return Err(PortError::permanent(format!("planner named unknown tree {}", e.tree_id)));
            }
            out.push((TreeId(e.tree_id), e.subquery));
        }
        Ok(out)
    }
}

impl Chooser for HttpChooser {
    fn choose(&self, subquery: &str, children: &[ChildView<'_>]) -> PortResult<Choice> {
        let mut user = format!("Subquery: {subquery}\n\nChildren:\n");
        for (i, c) in children.iter().enumerate() {
            let kind = if c.is_leaf { "evidence" } else { "summary" };
            user.push_str(&format!("{i}. [{}] ({kind}) {}\n", render_interval(&c.interval), c.summary));
        }
        let reply: ChooseReply = self.0.chat_json(PortKind::Chooser, prompt_body(CHOOSE_PROMPT), &user)?;
        if reply.children.is_empty() {
            Ok(Choice::Stop)
        } else {
            Ok(Choice::Children(reply.children))
        }
    }
}

/// Forwards retrieved evidence to the chat model and returns its answer.
pub fn answer(client: &HttpClient, ctx: &AnswerContext) -> PortResult<String> {
    let mut user = format!("Question: {}\n\nEvidence:\n", ctx.query);
    for (i, e) in ctx.evidence.iter().enumerate() {
        user.push_str(&format!("{}. [{}] {}\n", i + 1, render_interval(&e.anchor), e.text));
    }
    client.chat_text(prompt_body(ANSWER_PROMPT), &user)
}
