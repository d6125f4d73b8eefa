//! Tool handlers and dispatch. All built-ins are deterministic stubs: nothing
//! touches the network, the clock or a real interpreter.
//!
//! Arguments travel as the raw content of the tool-call message. Built-ins
//! accept a JSON object (`{"query": "..."}`) and fall back to treating the
//! whole text as the primary argument. Errors come back as JSON objects of
//! the form `{"error": "<code>", ...}` inside an ordinary tool message.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use evalexpr::{Context, DefaultNumericTypes, HashMapContext, Value};
use serde_json::json;
use thiserror::Error;

use crate::harmony::{ContentKind, Message, ParamType, ToolSchema};

pub trait ToolHandler: Send + Sync {
    /// Full recipient name, e.g. `functions.echo`.
    fn name(&self) -> &str;
    /// Schema advertised to the model, for tools in the `functions` namespace.
    fn schema(&self) -> Option<ToolSchema> {
        None
    }
    fn call(&self, args: &str) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("a handler named {0:?} is already registered")]
    Duplicate(String),
    #[error("dispatch needs a tool_call_args message")]
    NotAToolCall,
}

#[derive(Default)]
pub struct ToolRegistry {
    handlers: BTreeMap<String, Box<dyn ToolHandler>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding every built-in stub.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        r.register(Box::new(Echo)).expect("unique");
        r.register(Box::new(Clock)).expect("unique");
        r.register(Box::new(Search)).expect("unique");
        r.register(Box::new(Open)).expect("unique");
        r.register(Box::new(Python)).expect("unique");
        r
    }

    pub fn register(&mut self, handler: Box<dyn ToolHandler>) -> Result<(), ToolError> {
        let name = handler.name().to_string();
        if self.handlers.contains_key(&name) {
            return Err(ToolError::Duplicate(name));
        }
        self.handlers.insert(name, handler);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.handlers.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.handlers.keys().map(String::as_str)
    }

    pub fn schemas(&self) -> Vec<ToolSchema> {
        self.handlers.values().filter_map(|h| h.schema()).collect()
    }

    /// Run the handler named by the call's recipient and wrap the outcome
    /// as a tool message. Failures, including panics, become error payloads.
    pub fn dispatch(&self, call: &Message) -> Result<Message, ToolError> {
        let recipient = match (&call.kind, &call.recipient) {
            (ContentKind::ToolCallArgs, Some(r)) => r.clone(),
            _ => return Err(ToolError::NotAToolCall),
        };
        let payload = if self.handlers.is_empty() {
            error_payload("tools_unavailable", json!({ "tool": recipient }))
        } else {
            match self.handlers.get(&recipient) {
                None => error_payload(
                    "unknown_tool",
                    json!({ "tool": recipient, "available": self.handlers.keys().collect::<Vec<_>>() }),
                ),
                Some(h) => match catch_unwind(AssertUnwindSafe(|| h.call(&call.content))) {
                    Ok(Ok(out)) => out,
                    Ok(Err(msg)) => error_payload("tool_failed", json!({ "tool": recipient, "message": msg })),
                    Err(panic) => {
                        let msg = panic
                            .downcast_ref::<&str>()
                            .map(|s| s.to_string())
                            .or_else(|| panic.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "handler panicked".into());
                        error_payload("tool_panicked", json!({ "tool": recipient, "message": msg }))
                    }
                },
            }
        };
        Ok(Message::tool_result(recipient, sanitize(&payload)))
    }
}

fn error_payload(code: &str, extra: serde_json::Value) -> String {
    let mut obj = json!({ "error": code });
    if let (Some(o), serde_json::Value::Object(e)) = (obj.as_object_mut(), extra) {
        o.extend(e);
    }
    obj.to_string()
}

/// Tool output must not smuggle frame delimiters back into the stream.
fn sanitize(s: &str) -> String {
    crate::harmony::DELIMITERS
        .iter()
        .fold(s.to_string(), |acc, d| acc.replace(d, &d.replace('|', "¦")))
}

/// Primary string argument: `{"<key>": "..."}` or the raw text.
fn string_arg(args: &str, key: &str) -> String {
    serde_json::from_str::<serde_json::Value>(args)
        .ok()
        .and_then(|v| v.get(key).and_then(|x| x.as_str()).map(str::to_string))
        .unwrap_or_else(|| args.trim().to_string())
}

pub struct Echo;

impl ToolHandler for Echo {
    fn name(&self) -> &str {
        "functions.echo"
    }

    fn schema(&self) -> Option<ToolSchema> {
        Some(ToolSchema::new("echo", "Returns its arguments unchanged.").param("text", ParamType::String, true))
    }

    fn call(&self, args: &str) -> Result<String, String> {
        Ok(args.to_string())
    }
}

/// Fixed instant so transcripts replay byte for byte.
pub const CLOCK_TIME: &str = "2025-08-05T00:00:00Z";

pub struct Clock;

impl ToolHandler for Clock {
    fn name(&self) -> &str {
        "functions.clock"
    }

    fn schema(&self) -> Option<ToolSchema> {
        Some(ToolSchema::new("clock", "Returns the current UTC time."))
    }

    fn call(&self, _args: &str) -> Result<String, String> {
        Ok(json!({ "utc": CLOCK_TIME }).to_string())
    }
}

pub struct Document {
    pub title: &'static str,
    pub text: &'static str,
}

pub const CORPUS: &[Document] = &[
    Document {
        title: "Knowledge cutoff",
        text: "The model's training data has a knowledge cutoff of June 2024. Events after that date are unknown to it without browsing.",
    },
    Document {
        title: "Mixture of experts",
        text: "A mixture-of-experts layer routes each token to a few expert MLPs chosen by a learned router.",
    },
    Document {
        title: "MXFP4",
        text: "MXFP4 stores blocks of 32 four-bit E2M1 values that share one eight-bit power-of-two scale.",
    },
    Document {
        title: "Attention sinks",
        text: "A learned per-head bias in the softmax denominator lets a head attend to nothing.",
    },
    Document {
        title: "Rotary embeddings",
        text: "Rotary position embeddings rotate query and key pairs by position-dependent angles.",
    },
];

fn terms(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Corpus ids ranked by how many query terms they contain; ties keep corpus order.
pub fn search_corpus(query: &str) -> Vec<usize> {
    let q = terms(query);
    let mut scored: Vec<(usize, usize)> = CORPUS
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let words = terms(&format!("{} {}", d.title, d.text));
            (i, q.iter().filter(|t| words.contains(t)).count())
        })
        .filter(|(_, s)| *s > 0)
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(i, _)| i).collect()
}

pub struct Search;

impl ToolHandler for Search {
    fn name(&self) -> &str {
        "browser.search"
    }

    fn call(&self, args: &str) -> Result<String, String> {
        let query = string_arg(args, "query");
        let results: Vec<_> = search_corpus(&query)
            .into_iter()
            .take(3)
            .map(|i| json!({ "id": i, "title": CORPUS[i].title, "snippet": CORPUS[i].text }))
            .collect();
        Ok(json!({ "query": query, "results": results }).to_string())
    }
}

pub struct Open;

impl ToolHandler for Open {
    fn name(&self) -> &str {
        "browser.open"
    }

    fn call(&self, args: &str) -> Result<String, String> {
        let id = serde_json::from_str::<serde_json::Value>(args)
            .ok()
            .and_then(|v| v.get("id").and_then(|x| x.as_u64()))
            .or_else(|| args.trim().parse().ok())
            .ok_or_else(|| "expected {\"id\": N}".to_string())?;
        let doc = CORPUS.get(id as usize).ok_or_else(|| format!("no document with id {id}"))?;
        Ok(json!({ "id": id, "title": doc.title, "text": doc.text }).to_string())
    }
}

/// Arithmetic only: no variables, assignments or built-in functions.
pub fn evaluate_arithmetic(expr: &str) -> Result<String, String> {
    let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
    ctx.set_builtin_functions_disabled(true).map_err(|e| e.to_string())?;
    match evalexpr::eval_with_context(expr, &ctx).map_err(|e| e.to_string())? {
        Value::Int(i) => Ok(i.to_string()),
        Value::Float(f) if f.is_finite() => Ok(f.to_string()),
        other => Err(format!("not an arithmetic result: {other}")),
    }
}

pub struct Python;

impl ToolHandler for Python {
    fn name(&self) -> &str {
        "python"
    }

    fn call(&self, args: &str) -> Result<String, String> {
        let code = string_arg(args, "code");
        evaluate_arithmetic(&code).map(|v| json!({ "result": v }).to_string())
    }
}
