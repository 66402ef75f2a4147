use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::graph::{occurrences, ConceptGraph};
use crate::{Error, Result};

/// Environment variable holding the teacher API key.
pub const API_KEY_ENV: &str = "CDLM_TEACHER_API_KEY";

pub const SYSTEM_PROMPT: &str = include_str!("../../assets/prompts/system.txt");
pub const DEMO1_INPUT: &str = include_str!("../../assets/prompts/demo1_input.txt");
pub const DEMO1_OUTPUT: &str = include_str!("../../assets/prompts/demo1_output.txt");
pub const DEMO2_INPUT: &str = include_str!("../../assets/prompts/demo2_input.txt");
pub const DEMO2_OUTPUT: &str = include_str!("../../assets/prompts/demo2_output.txt");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_s: u64,
    pub retry_backoff_ms: u64,
    /// Price per million input tokens.
    pub price_in: f64,
    /// Price per million output tokens.
    pub price_out: f64,
    pub concurrency: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://open.bigmodel.cn/api/paas/v4/chat/completions".into(),
            model: "glm-4.5".into(),
            temperature: 0.0,
            max_retries: 3,
            timeout_s: 120,
            retry_backoff_ms: 500,
            price_in: 0.8,
            price_out: 2.0,
            concurrency: 4,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.price_in < 0.0 || self.price_out < 0.0 {
            return Err(Error::Config("provider prices must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens_in: Option<u64>,
    pub tokens_out: Option<u64>,
}

/// A chat-completion backend. Implementations return [`Error::Transport`]
/// for failures worth retrying.
pub trait Teacher: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion>;
}

/// Chat-completions over HTTP JSON.
pub struct HttpTeacher {
    config: ProviderConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTeacher {
    pub fn new(config: ProviderConfig, api_key: Option<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_s))
            .build();
        Self {
            config,
            api_key,
            agent,
        }
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(config: ProviderConfig) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(config, key)
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl Teacher for HttpTeacher {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion> {
        let body = ChatRequest {
            model: &self.config.model,
            messages,
            temperature: self.config.temperature,
        };
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .send_json(serde_json::to_value(&body)?)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let parsed: ChatResponse = resp
            .into_json()
            .map_err(|e| Error::Transport(format!("unreadable response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Transport("response without choices".into()))?;
        Ok(Completion {
            text: choice.message.content,
            tokens_in: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            tokens_out: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

type Responder = Box<dyn Fn(&[ChatMessage]) -> Result<String> + Send + Sync>;

/// Replays canned replies. Optionally fails the first `failures` calls with
/// a transport error.
pub struct MockTeacher {
    responder: Responder,
    failures: AtomicUsize,
    calls: AtomicUsize,
}

impl MockTeacher {
    pub fn new(responder: impl Fn(&[ChatMessage]) -> Result<String> + Send + Sync + 'static) -> Self {
        Self {
            responder: Box::new(responder),
            failures: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn fixed(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::new(move |_| Ok(reply.clone()))
    }

    pub fn with_transient_failures(self, n: usize) -> Self {
        self.failures.store(n, Ordering::SeqCst);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Teacher for MockTeacher {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let pending = self.failures.load(Ordering::SeqCst);
        if pending > 0 {
            self.failures.store(pending - 1, Ordering::SeqCst);
            return Err(Error::Transport("mock transient failure".into()));
        }
        Ok(Completion {
            text: (self.responder)(messages)?,
            tokens_in: None,
            tokens_out: None,
        })
    }
}

/// Outcome of annotating one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationResult {
    pub id: String,
    pub graph: Option<ConceptGraph>,
    pub failure_reason: Option<String>,
    pub raw_reply: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl AnnotationResult {
    pub fn is_failure(&self) -> bool {
        self.graph.is_none()
    }

    pub fn to_record(&self) -> AnnotationRecord {
        AnnotationRecord {
            id: self.id.clone(),
            graph: self.graph.clone(),
            failure_reason: self.failure_reason.clone(),
            tokens_in: self.tokens_in,
            tokens_out: self.tokens_out,
        }
    }
}

/// JSONL line of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub graph: Option<ConceptGraph>,
    pub failure_reason: Option<String>,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// System prompt, both in-context demonstrations, then the sample.
pub fn build_messages(question: &str, answer_cot: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::new("system", SYSTEM_PROMPT.trim()),
        ChatMessage::new("user", DEMO1_INPUT.trim()),
        ChatMessage::new("assistant", DEMO1_OUTPUT.trim()),
        ChatMessage::new("user", DEMO2_INPUT.trim()),
        ChatMessage::new("assistant", DEMO2_OUTPUT.trim()),
        ChatMessage::new("user", format!("Question: {question}\n\nAnswer: {answer_cot}")),
    ]
}

fn rough_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Asks the teacher for the effect→causes graph of one sample.
///
/// Transport failures are retried up to `max_retries` times and then
/// returned as errors. Anything wrong with the reply itself becomes a
/// decode failure on the result.
pub fn extract_graph(
    id: &str,
    question: &str,
    answer_cot: &str,
    teacher: &dyn Teacher,
    config: &ProviderConfig,
) -> Result<AnnotationResult> {
    let messages = build_messages(question, answer_cot);
    let mut attempt = 0;
    let completion = loop {
        match teacher.complete(&messages) {
            Ok(c) => break c,
            Err(Error::Transport(msg)) if attempt < config.max_retries => {
                attempt += 1;
                let wait = config.retry_backoff_ms.saturating_mul(1 << attempt.min(10));
                if wait > 0 {
                    std::thread::sleep(Duration::from_millis(wait));
                }
                let _ = msg;
            }
            Err(e) => return Err(e),
        }
    };

    let source = format!("{question}\n{answer_cot}");
    let tokens_in = completion.tokens_in.unwrap_or_else(|| {
        messages.iter().map(|m| rough_token_count(&m.content)).sum()
    });
    let tokens_out = completion
        .tokens_out
        .unwrap_or_else(|| rough_token_count(&completion.text));
    let (graph, failure_reason) = match decode_graph(&completion.text, &source) {
        Ok(g) => (Some(g), None),
        Err(reason) => (None, Some(reason)),
    };
    Ok(AnnotationResult {
        id: id.to_string(),
        graph,
        failure_reason,
        raw_reply: completion.text,
        tokens_in,
        tokens_out,
    })
}

/// Parses a teacher reply against the text it was asked about. The error
/// string is the decode-failure reason.
pub fn decode_graph(reply: &str, source_text: &str) -> std::result::Result<ConceptGraph, String> {
    let object = first_json_object(reply).ok_or_else(|| "no json object in reply".to_string())?;
    let edges: IndexMap<String, Vec<String>> = serde_json::from_str(object)
        .or_else(|_| serde_json::from_str(&escape_stray_backslashes(object)))
        .map_err(|e| format!("malformed json: {e}"))?;
    if edges.is_empty() {
        return Err("empty graph".into());
    }

    let mut concepts: Vec<String> = Vec::new();
    for (effect, causes) in &edges {
        for c in causes.iter().chain(std::iter::once(effect)) {
            if !concepts.contains(c) {
                concepts.push(c.clone());
            }
        }
    }
    if let Some(missing) = concepts.iter().find(|c| occurrences(source_text, c) == 0) {
        return Err(format!("concept not in text: {missing:?}"));
    }

    // Effects take their key position as step; pure causes share the
    // earliest step of anything they cause.
    let mut step_of = BTreeMap::new();
    for (k, effect) in edges.keys().enumerate() {
        step_of.insert(effect.clone(), k + 1);
    }
    for (k, causes) in edges.values().enumerate() {
        for c in causes {
            if !edges.contains_key(c) {
                let s = step_of.entry(c.clone()).or_insert(k + 1);
                *s = (*s).min(k + 1);
            }
        }
    }

    let mut context = source_text.to_string();
    for c in &concepts {
        if let Some(pos) = context.find(c.as_str()) {
            context.replace_range(pos..pos + c.len(), " ");
        }
    }
    let context = context.split_whitespace().collect::<Vec<_>>().join(" ");

    Ok(ConceptGraph {
        concepts,
        context,
        edges,
        step_of: Some(step_of),
    })
}

/// The first balanced `{...}` span, skipping braces inside string literals.
pub fn first_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (off, ch) in text[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + off + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Doubles every backslash that does not start `\"` or `\\`, so LaTeX such
/// as `\(` or `\tfrac` survives a JSON parse as literal text.
fn escape_stray_backslashes(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 16);
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.peek() {
                Some('"') | Some('\\') => {
                    out.push(c);
                    out.push(chars.next().expect("peeked"));
                }
                _ => out.push_str("\\\\"),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_object_inside_prose() {
        let reply = "Sure! Here it is:\n{\"a}\": [\"b{\"]}\nHope that helps {not json}";
        assert_eq!(first_json_object(reply), Some("{\"a}\": [\"b{\"]}"));
        assert_eq!(first_json_object("no braces"), None);
        assert_eq!(first_json_object("{ unclosed"), None);
    }

    #[test]
    fn empty_reply_is_decode_failure() {
        assert!(decode_graph("", "text").is_err());
    }

    #[test]
    fn non_list_causes_are_malformed() {
        let err = decode_graph(r#"{"a": "b"}"#, "a b").unwrap_err();
        assert!(err.starts_with("malformed json"));
    }

    #[test]
    fn prices_must_be_nonnegative() {
        let cfg = ProviderConfig {
            price_in: -1.0,
            ..ProviderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn retries_then_succeeds() {
        let teacher = MockTeacher::fixed(r#"{"b": ["a"]}"#).with_transient_failures(2);
        let cfg = ProviderConfig {
            retry_backoff_ms: 0,
            ..ProviderConfig::default()
        };
        let r = extract_graph("s", "a", "b", &teacher, &cfg).unwrap();
        assert!(r.graph.is_some());
        assert_eq!(teacher.calls(), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let teacher = MockTeacher::fixed("{}").with_transient_failures(10);
        let cfg = ProviderConfig {
            retry_backoff_ms: 0,
            max_retries: 2,
            ..ProviderConfig::default()
        };
        let err = extract_graph("s", "a", "b", &teacher, &cfg).unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
        assert_eq!(teacher.calls(), 3);
    }
}
