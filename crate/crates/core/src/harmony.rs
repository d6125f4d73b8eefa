//! Harmony-style chat format: role and channel tagged messages rendered to a
//! delimiter-framed text stream, a total parser for model output, prior-turn
//! chain-of-thought stripping and instruction-hierarchy resolution.
//!
//! Frame grammar (see `docs/harmony.md` for the full description):
//!
//! ```text
//! <|start|>{header}<|message|>{content}{terminator}
//! header     := "system" | "developer" | "user"
//!             | "assistant<|channel|>" channel [" to=" recipient]
//!             | author " to=assistant"
//! terminator := <|end|> | <|call|> | <|return|>
//! ```

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const START: &str = "<|start|>";
pub const CHANNEL: &str = "<|channel|>";
pub const MESSAGE: &str = "<|message|>";
pub const END: &str = "<|end|>";
pub const CALL: &str = "<|call|>";
pub const RETURN: &str = "<|return|>";

pub const DELIMITERS: [&str; 6] = [START, CHANNEL, MESSAGE, END, CALL, RETURN];

/// Rendered after the last message to hand the turn to the assistant.
pub const ASSISTANT_CUE: &str = "<|start|>assistant";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Developer,
    User,
    Assistant,
    Tool,
}

impl Role {
    /// System=4 > Developer=3 > User=2 > Assistant=1 > Tool=0.
    pub fn rank(self) -> u8 {
        match self {
            Role::System => 4,
            Role::Developer => 3,
            Role::User => 2,
            Role::Assistant => 1,
            Role::Tool => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::Developer => "developer",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Analysis,
    Commentary,
    Final,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Analysis => "analysis",
            Channel::Commentary => "commentary",
            Channel::Final => "final",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "analysis" => Some(Channel::Analysis),
            "commentary" => Some(Channel::Commentary),
            "final" => Some(Channel::Final),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    Text,
    ToolCallArgs,
    ToolResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningLevel {
    Low,
    #[default]
    Medium,
    High,
}

impl ReasoningLevel {
    pub const ALL: [ReasoningLevel; 3] = [ReasoningLevel::Low, ReasoningLevel::Medium, ReasoningLevel::High];

    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningLevel::Low => "low",
            ReasoningLevel::Medium => "medium",
            ReasoningLevel::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "low" => Some(ReasoningLevel::Low),
            "medium" => Some(ReasoningLevel::Medium),
            "high" => Some(ReasoningLevel::High),
            _ => None,
        }
    }
}

impl fmt::Display for ReasoningLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub channel: Option<Channel>,
    /// Tool addressed by a tool call.
    pub recipient: Option<String>,
    /// Tool that produced a tool result.
    pub author: Option<String>,
    pub kind: ContentKind,
    pub content: String,
}

impl Message {
    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            channel: None,
            recipient: None,
            author: None,
            kind: ContentKind::Text,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn developer(content: impl Into<String>) -> Self {
        Self::plain(Role::Developer, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(channel: Channel, content: impl Into<String>) -> Self {
        Self {
            channel: Some(channel),
            ..Self::plain(Role::Assistant, content)
        }
    }

    pub fn tool_call(recipient: impl Into<String>, args: impl Into<String>) -> Self {
        Self {
            channel: Some(Channel::Commentary),
            recipient: Some(recipient.into()),
            kind: ContentKind::ToolCallArgs,
            ..Self::plain(Role::Assistant, args)
        }
    }

    pub fn tool_result(author: impl Into<String>, payload: impl Into<String>) -> Self {
        Self {
            author: Some(author.into()),
            kind: ContentKind::ToolResult,
            ..Self::plain(Role::Tool, payload)
        }
    }

    pub fn is_analysis(&self) -> bool {
        self.role == Role::Assistant && self.channel == Some(Channel::Analysis)
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(d) = DELIMITERS.iter().find(|d| self.content.contains(*d)) {
            return Err(format!("content contains reserved delimiter {d}"));
        }
        match (self.role, self.channel) {
            (Role::Assistant, None) => return Err("assistant message without a channel".into()),
            (Role::Assistant, Some(_)) | (_, None) => {}
            (r, Some(_)) => return Err(format!("{r} message must not carry a channel")),
        }
        match (self.kind, &self.recipient) {
            (ContentKind::ToolCallArgs, None) => return Err("tool call without recipient".into()),
            (ContentKind::ToolCallArgs, Some(r)) => {
                if self.role != Role::Assistant || self.channel != Some(Channel::Commentary) {
                    return Err("tool calls must be assistant messages on the commentary channel".into());
                }
                check_tool_name(r)?;
            }
            (_, Some(_)) => return Err("recipient set on a message that is not a tool call".into()),
            (_, None) => {}
        }
        match (self.role, self.kind, &self.author) {
            (Role::Tool, ContentKind::ToolResult, Some(a)) => check_tool_name(a)?,
            (Role::Tool, ContentKind::ToolResult, None) => return Err("tool result without author".into()),
            (Role::Tool, _, _) => return Err("tool messages must carry tool_result content".into()),
            (_, ContentKind::ToolResult, _) => return Err("tool_result content must come from the tool role".into()),
            (_, _, Some(_)) => return Err("author is only valid on tool messages".into()),
            _ => {}
        }
        Ok(())
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Dotted identifier such as `functions.get_weather`, not a bare role word.
pub(crate) fn check_tool_name(name: &str) -> Result<(), String> {
    if !name.split('.').all(is_identifier) {
        return Err(format!("{name:?} is not a valid tool name"));
    }
    if matches!(name, "system" | "developer" | "user" | "assistant" | "tool") {
        return Err(format!("{name:?} collides with a role name"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Number,
    Integer,
    Boolean,
    Object,
    Array,
}

impl ParamType {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Number => "number",
            ParamType::Integer => "integer",
            ParamType::Boolean => "boolean",
            ParamType::Object => "object",
            ParamType::Array => "array",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "string" => ParamType::String,
            "number" => ParamType::Number,
            "integer" => ParamType::Integer,
            "boolean" => ParamType::Boolean,
            "object" => ParamType::Object,
            "array" => ParamType::Array,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolParam {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ToolParam>,
}

/// Namespace developer-defined functions are rendered into.
pub const FUNCTIONS_NAMESPACE: &str = "functions";

impl ToolSchema {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            parameters: Vec::new(),
        }
    }

    pub fn param(mut self, name: impl Into<String>, ty: ParamType, required: bool) -> Self {
        self.parameters.push(ToolParam {
            name: name.into(),
            ty,
            required,
        });
        self
    }

    /// Recipient string used when the assistant calls this tool.
    pub fn recipient(&self) -> String {
        format!("{FUNCTIONS_NAMESPACE}.{}", self.name)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !is_identifier(&self.name) {
            return Err(format!("tool name {:?} is not an identifier", self.name));
        }
        if self.description.contains('\n') || DELIMITERS.iter().any(|d| self.description.contains(d)) {
            return Err(format!("description of {:?} must be a single line without delimiters", self.name));
        }
        let mut seen = HashSet::new();
        for p in &self.parameters {
            if !is_identifier(&p.name) {
                return Err(format!("parameter {:?} of {:?} is not an identifier", p.name, self.name));
            }
            if !seen.insert(&p.name) {
                return Err(format!("duplicate parameter {:?} in {:?}", p.name, self.name));
            }
        }
        Ok(())
    }
}

/// Canonical text block for one function schema.
pub fn render_tool_schema(s: &ToolSchema) -> String {
    let mut out = format!("// {}\n", s.description);
    if s.parameters.is_empty() {
        out.push_str(&format!("type {} = () => any;", s.name));
        return out;
    }
    out.push_str(&format!("type {} = (_: {{\n", s.name));
    for p in &s.parameters {
        let opt = if p.required { "" } else { "?" };
        out.push_str(&format!("{}{}: {},\n", p.name, opt, p.ty.as_str()));
    }
    out.push_str("}) => any;");
    out
}

const TOOLS_HEADER: &str = "# Tools\n\n## functions\n\nnamespace functions {\n";
const TOOLS_FOOTER: &str = "} // namespace functions";
const INSTRUCTIONS_HEADER: &str = "# Instructions\n";

fn render_tools_section(tools: &[ToolSchema]) -> String {
    let mut out = TOOLS_HEADER.to_string();
    for t in tools {
        out.push('\n');
        out.push_str(&render_tool_schema(t));
        out.push('\n');
    }
    out.push('\n');
    out.push_str(TOOLS_FOOTER);
    out
}

fn next_line<'a>(rest: &mut &'a str) -> Option<&'a str> {
    let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
    *rest = tail;
    Some(line)
}

fn parse_tools_section(text: &str) -> Option<(Vec<ToolSchema>, &str)> {
    let body = text.strip_prefix(TOOLS_HEADER)?;
    let mut tools = Vec::new();
    let mut rest = body;
    loop {
        if let Some(tail) = rest.strip_prefix(TOOLS_FOOTER) {
            return Some((tools, tail));
        }
        let line = next_line(&mut rest)?;
        if line.is_empty() {
            if rest.is_empty() {
                return None;
            }
            continue;
        }
        let description = line.strip_prefix("// ")?;
        let decl = next_line(&mut rest)?;
        let (name, sig) = decl.strip_prefix("type ")?.split_once(" = ")?;
        let mut schema = ToolSchema::new(name, description);
        if sig != "() => any;" {
            if sig != "(_: {" {
                return None;
            }
            loop {
                let l = next_line(&mut rest)?;
                if l == "}) => any;" {
                    break;
                }
                let (pname, pty) = l.strip_suffix(',')?.split_once(": ")?;
                let (pname, required) = match pname.strip_suffix('?') {
                    Some(n) => (n, false),
                    None => (pname, true),
                };
                schema = schema.param(pname, ParamType::parse(pty)?, required);
            }
        }
        tools.push(schema);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Conversation {
    pub messages: Vec<Message>,
    pub reasoning_level: ReasoningLevel,
    pub tools: Vec<ToolSchema>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}: {reason}", match .index { Some(i) => format!("message {i}"), None => "conversation".to_string() })]
pub struct ValidationError {
    pub index: Option<usize>,
    pub reason: String,
}

impl ValidationError {
    fn at(index: usize, reason: impl Into<String>) -> Self {
        Self {
            index: Some(index),
            reason: reason.into(),
        }
    }

    fn global(reason: impl Into<String>) -> Self {
        Self {
            index: None,
            reason: reason.into(),
        }
    }
}

impl Conversation {
    pub fn new(reasoning_level: ReasoningLevel) -> Self {
        Self {
            reasoning_level,
            ..Self::default()
        }
    }

    pub fn with_message(mut self, m: Message) -> Self {
        self.messages.push(m);
        self
    }

    pub fn with_tool(mut self, t: ToolSchema) -> Self {
        self.tools.push(t);
        self
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        for (i, m) in self.messages.iter().enumerate() {
            m.validate().map_err(|r| ValidationError::at(i, r))?;
            if m.role == Role::System && i != 0 {
                return Err(ValidationError::at(i, "system message must be first and unique"));
            }
        }
        let mut names = HashSet::new();
        for t in &self.tools {
            t.validate().map_err(ValidationError::global)?;
            if !names.insert(&t.name) {
                return Err(ValidationError::global(format!("duplicate tool name {:?}", t.name)));
            }
        }
        Ok(())
    }
}

/// Drop analysis messages from every assistant turn that precedes the last
/// user message. The turn in progress keeps its analysis.
pub fn strip_prior_cot(conv: &Conversation) -> Conversation {
    let current_turn_start = conv
        .messages
        .iter()
        .rposition(|m| m.role == Role::User)
        .unwrap_or(0);
    let messages = conv
        .messages
        .iter()
        .enumerate()
        .filter(|(i, m)| *i >= current_turn_start || !m.is_analysis())
        .map(|(_, m)| m.clone())
        .collect();
    Conversation {
        messages,
        ..conv.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot resolve an empty instruction list")]
pub struct EmptyInstructions;

/// The directive from the highest-ranked role wins; among equal ranks the
/// later one does.
pub fn resolve_conflict<D: Clone>(instructions: &[(Role, D)]) -> Result<D, EmptyInstructions> {
    instructions
        .iter()
        .enumerate()
        .max_by_key(|(i, (role, _))| (role.rank(), *i))
        .map(|(_, (_, d))| d.clone())
        .ok_or(EmptyInstructions)
}

fn render_frame(out: &mut String, m: &Message) {
    out.push_str(START);
    match m.role {
        Role::Assistant => {
            out.push_str("assistant");
            out.push_str(CHANNEL);
            out.push_str(m.channel.expect("validated").as_str());
            if let Some(r) = &m.recipient {
                out.push_str(" to=");
                out.push_str(r);
            }
        }
        Role::Tool => {
            out.push_str(m.author.as_deref().expect("validated"));
            out.push_str(" to=assistant");
        }
        r => out.push_str(r.as_str()),
    }
    out.push_str(MESSAGE);
    out.push_str(&m.content);
    out.push_str(if m.kind == ContentKind::ToolCallArgs { CALL } else { END });
}

/// Render a validated conversation. Prior-turn analysis is dropped and the
/// stream ends with the assistant cue.
pub fn render_conversation(conv: &Conversation) -> Result<String, ValidationError> {
    conv.validate()?;
    let conv = strip_prior_cot(conv);
    let mut out = String::new();

    let mut messages = conv.messages.iter().peekable();
    out.push_str(START);
    out.push_str("system");
    out.push_str(MESSAGE);
    out.push_str("Reasoning: ");
    out.push_str(conv.reasoning_level.as_str());
    if let Some(sys) = messages.next_if(|m| m.role == Role::System) {
        out.push_str("\n\n");
        out.push_str(&sys.content);
    }
    out.push_str(END);

    let mut tools_pending = !conv.tools.is_empty();
    let has_developer = conv.messages.iter().any(|m| m.role == Role::Developer);
    if tools_pending && !has_developer {
        out.push_str(START);
        out.push_str("developer");
        out.push_str(MESSAGE);
        out.push_str(&render_tools_section(&conv.tools));
        out.push_str(END);
        tools_pending = false;
    }
    for m in messages {
        if m.role == Role::Developer {
            out.push_str(START);
            out.push_str("developer");
            out.push_str(MESSAGE);
            if tools_pending {
                out.push_str(&render_tools_section(&conv.tools));
                out.push_str("\n\n");
                tools_pending = false;
            }
            out.push_str(INSTRUCTIONS_HEADER);
            out.push_str(&m.content);
            out.push_str(END);
        } else {
            render_frame(&mut out, m);
        }
    }
    out.push_str(ASSISTANT_CUE);
    Ok(out)
}

/// Text form of a single assistant message as the model would emit it
/// after the assistant cue, e.g. `<|channel|>commentary to=functions.f<|message|>{..}<|call|>`.
pub fn render_model_message(m: &Message) -> String {
    let mut s = String::new();
    render_frame(&mut s, m);
    s.strip_prefix(START)
        .and_then(|s| s.strip_prefix("assistant"))
        .map(str::to_string)
        .unwrap_or(s)
}

pub fn render_tool_result(name: &str, payload: &str) -> Message {
    Message::tool_result(name, payload)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected {found} (expected {expected})")]
    UnexpectedDelimiter { found: String, expected: &'static str },
    #[error("text outside of a message frame")]
    StrayText,
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("malformed header {0:?}")]
    BadHeader(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("malformed system or developer frame: {0}")]
    BadPreamble(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: {kind}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

/// A frame whose terminator had not arrived when the stream ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialMessage {
    /// Header text seen so far (role, channel, recipient).
    pub header: String,
    /// Set once `<|message|>` was seen; content is whatever followed it.
    pub message: Option<Message>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedStream {
    pub messages: Vec<Message>,
    pub partial: Option<PartialMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece<'a> {
    Delim(&'static str),
    Text(&'a str),
}

fn lex(stream: &str) -> Vec<(usize, Piece<'_>)> {
    let mut out = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    let bytes = stream.as_bytes();
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some(d) = DELIMITERS.iter().find(|d| stream[i..].starts_with(**d)) {
                if text_start < i {
                    out.push((text_start, Piece::Text(&stream[text_start..i])));
                }
                out.push((i, Piece::Delim(d)));
                i += d.len();
                text_start = i;
                continue;
            }
        }
        i += 1;
    }
    if text_start < stream.len() {
        out.push((text_start, Piece::Text(&stream[text_start..])));
    }
    out
}

struct Header {
    role: Role,
    author: Option<String>,
    channel: Option<Channel>,
    recipient: Option<String>,
}

fn parse_header(role_text: &str, channel_text: Option<&str>, offset: usize) -> Result<Header, ParseError> {
    let err = |kind| ParseError { offset, kind };
    let (role_word, role_attr) = match role_text.split_once(' ') {
        Some((w, a)) => (w, Some(a)),
        None => (role_text, None),
    };
    let mut header = match role_word {
        "system" => Header { role: Role::System, author: None, channel: None, recipient: None },
        "developer" => Header { role: Role::Developer, author: None, channel: None, recipient: None },
        "user" => Header { role: Role::User, author: None, channel: None, recipient: None },
        "assistant" => Header { role: Role::Assistant, author: None, channel: None, recipient: None },
        author if role_attr == Some("to=assistant") => Header {
            role: Role::Tool,
            author: Some(author.to_string()),
            channel: None,
            recipient: None,
        },
        _ => return Err(err(ParseErrorKind::BadHeader(role_text.to_string()))),
    };
    if header.role != Role::Tool {
        match role_attr.map(|a| a.strip_prefix("to=")) {
            None => {}
            Some(Some(r)) if header.role == Role::Assistant => header.recipient = Some(r.to_string()),
            Some(_) => return Err(err(ParseErrorKind::BadHeader(role_text.to_string()))),
        }
    }
    if let Some(ch) = channel_text {
        let (name, attr) = match ch.split_once(' ') {
            Some((n, a)) => (n, Some(a)),
            None => (ch, None),
        };
        header.channel = Some(Channel::parse(name).ok_or_else(|| err(ParseErrorKind::UnknownChannel(name.to_string())))?);
        if let Some(a) = attr {
            let r = a
                .strip_prefix("to=")
                .filter(|_| header.recipient.is_none())
                .ok_or_else(|| err(ParseErrorKind::BadHeader(ch.to_string())))?;
            header.recipient = Some(r.to_string());
        }
    }
    Ok(header)
}

#[derive(Default)]
struct FrameState<'a> {
    start: usize,
    role_text: Option<&'a str>,
    channel_seen: bool,
    channel_text: Option<&'a str>,
    body_seen: bool,
    content: Option<&'a str>,
}

impl FrameState<'_> {
    fn header_text(&self) -> String {
        let mut s = self.role_text.unwrap_or("").to_string();
        if self.channel_seen {
            s.push_str(CHANNEL);
            s.push_str(self.channel_text.unwrap_or(""));
        }
        s
    }
}

fn finish_frame(f: &FrameState<'_>, terminator: Option<&str>) -> Result<Message, ParseError> {
    let header = parse_header(f.role_text.unwrap_or(""), f.channel_text, f.start)?;
    let kind = match (header.role, terminator) {
        (Role::Tool, _) => ContentKind::ToolResult,
        (_, Some(t)) if t == CALL => ContentKind::ToolCallArgs,
        _ => ContentKind::Text,
    };
    let m = Message {
        role: header.role,
        channel: header.channel,
        recipient: header.recipient,
        author: header.author,
        kind,
        content: f.content.unwrap_or("").to_string(),
    };
    if terminator.is_some() {
        m.validate().map_err(|r| ParseError {
            offset: f.start,
            kind: ParseErrorKind::InvalidMessage(r),
        })?;
    }
    Ok(m)
}

fn parse_frames(stream: &str, implicit_assistant: bool) -> Result<ParsedStream, ParseError> {
    let mut out = ParsedStream::default();
    let mut frame: Option<FrameState<'_>> = None;
    let pieces = lex(stream);
    let unexpected = |offset: usize, found: &str, expected: &'static str| ParseError {
        offset,
        kind: ParseErrorKind::UnexpectedDelimiter {
            found: found.to_string(),
            expected,
        },
    };
    for (idx, &(offset, piece)) in pieces.iter().enumerate() {
        match (&mut frame, piece) {
            (None, Piece::Delim(d)) if d == START => {
                frame = Some(FrameState {
                    start: offset,
                    ..Default::default()
                });
            }
            (None, Piece::Delim(d)) if d == CHANNEL && idx == 0 && implicit_assistant => {
                frame = Some(FrameState {
                    start: offset,
                    role_text: Some("assistant"),
                    channel_seen: true,
                    ..Default::default()
                });
            }
            (None, Piece::Delim(d)) => return Err(unexpected(offset, d, "<|start|>")),
            (None, Piece::Text(_)) => {
                return Err(ParseError {
                    offset,
                    kind: ParseErrorKind::StrayText,
                })
            }
            (Some(f), Piece::Text(t)) => {
                if f.body_seen {
                    f.content = Some(t);
                } else if f.channel_seen {
                    if f.channel_text.is_some() {
                        return Err(ParseError { offset, kind: ParseErrorKind::StrayText });
                    }
                    f.channel_text = Some(t);
                } else if f.role_text.is_none() {
                    f.role_text = Some(t);
                } else {
                    return Err(ParseError { offset, kind: ParseErrorKind::StrayText });
                }
            }
            (Some(f), Piece::Delim(d)) if d == CHANNEL => {
                if f.body_seen || f.channel_seen || f.role_text.is_none() {
                    return Err(unexpected(offset, d, "header text or <|message|>"));
                }
                f.channel_seen = true;
            }
            (Some(f), Piece::Delim(d)) if d == MESSAGE => {
                if f.body_seen || f.role_text.is_none() || (f.channel_seen && f.channel_text.is_none()) {
                    return Err(unexpected(offset, d, "header text"));
                }
                f.body_seen = true;
            }
            (Some(f), Piece::Delim(d)) if d == END || d == CALL || d == RETURN => {
                if !f.body_seen {
                    return Err(unexpected(offset, d, "<|message|>"));
                }
                out.messages.push(finish_frame(f, Some(d))?);
                frame = None;
            }
            (Some(_), Piece::Delim(d)) => return Err(unexpected(offset, d, "message terminator")),
        }
    }
    if let Some(f) = frame {
        let message = if f.body_seen { Some(finish_frame(&f, None)?) } else { None };
        out.partial = Some(PartialMessage {
            header: f.header_text(),
            message,
        });
    }
    Ok(out)
}

/// Parse text produced by the model. The stream may start right after the
/// assistant cue (with `<|channel|>`) or with full `<|start|>` frames. A
/// trailing unterminated frame is returned in `partial`.
pub fn parse_model_output(stream: &str) -> Result<ParsedStream, ParseError> {
    parse_frames(stream, true)
}

/// Inverse of [`render_conversation`] (for conversations whose prior-turn
/// analysis has already been stripped).
pub fn parse_conversation(stream: &str) -> Result<Conversation, ParseError> {
    let parsed = parse_frames(stream, false)?;
    let bad = |reason: &str| ParseError {
        offset: 0,
        kind: ParseErrorKind::BadPreamble(reason.to_string()),
    };
    match &parsed.partial {
        Some(p) if p.header == "assistant" && p.message.is_none() => {}
        Some(_) => return Err(bad("stream ends inside a message")),
        None => return Err(bad("missing trailing assistant cue")),
    }
    let mut frames = parsed.messages.into_iter();
    let system = frames.next().filter(|m| m.role == Role::System).ok_or_else(|| bad("first frame must be system"))?;
    let rest = system.content.strip_prefix("Reasoning: ").ok_or_else(|| bad("system frame lacks Reasoning line"))?;
    let (level, system_text) = match rest.split_once("\n\n") {
        Some((l, t)) => (l, Some(t)),
        None => (rest, None),
    };
    let reasoning_level = ReasoningLevel::parse(level).ok_or_else(|| bad("unknown reasoning level"))?;
    let mut conv = Conversation::new(reasoning_level);
    if let Some(t) = system_text {
        conv.messages.push(Message::system(t));
    }
    let mut tools_seen = false;
    for m in frames {
        if m.role == Role::System {
            return Err(bad("second system frame"));
        }
        if m.role != Role::Developer {
            conv.messages.push(m);
            continue;
        }
        let mut body = m.content.as_str();
        if body.starts_with(TOOLS_HEADER) {
            if tools_seen {
                return Err(bad("tools declared twice"));
            }
            let (tools, tail) = parse_tools_section(body).ok_or_else(|| bad("malformed tools section"))?;
            conv.tools = tools;
            tools_seen = true;
            if tail.is_empty() {
                continue;
            }
            body = tail.strip_prefix("\n\n").ok_or_else(|| bad("text after tools section"))?;
        }
        let text = body.strip_prefix(INSTRUCTIONS_HEADER).ok_or_else(|| bad("developer frame lacks instructions header"))?;
        conv.messages.push(Message::developer(text));
    }
    conv.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(conv)
}

/// Every tool result must directly follow the call that produced it.
pub fn check_tool_pairing(conv: &Conversation) -> Result<(), ValidationError> {
    for (i, m) in conv.messages.iter().enumerate() {
        if m.role != Role::Tool {
            continue;
        }
        let matched = i > 0 && {
            let prev = &conv.messages[i - 1];
            prev.kind == ContentKind::ToolCallArgs && prev.recipient == m.author
        };
        if !matched {
            return Err(ValidationError::at(i, "tool result without a preceding matching tool call"));
        }
    }
    Ok(())
}

/// Whitespace-delimited pieces, the length unit for chain-of-thought budgets.
pub fn count_pieces(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record {
    Meta {
        reasoning: ReasoningLevel,
        #[serde(default)]
        tools: Vec<ToolSchema>,
    },
    Message(Message),
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {reason}")]
    Structure { line: usize, reason: String },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// One JSON record per line: a `meta` record, then one `message` record per message.
pub fn write_transcript(conv: &Conversation) -> String {
    let mut out = String::new();
    let meta = Record::Meta {
        reasoning: conv.reasoning_level,
        tools: conv.tools.clone(),
    };
    out.push_str(&serde_json::to_string(&meta).expect("serializable"));
    out.push('\n');
    for m in &conv.messages {
        out.push_str(&serde_json::to_string(&Record::Message(m.clone())).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn read_transcript(text: &str) -> Result<Conversation, TranscriptError> {
    let mut conv: Option<Conversation> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|source| TranscriptError::Json { line: line_no, source })?;
        match (record, conv.as_mut()) {
            (Record::Meta { reasoning, tools }, None) => {
                conv = Some(Conversation {
                    messages: Vec::new(),
                    reasoning_level: reasoning,
                    tools,
                })
            }
            (Record::Meta { .. }, Some(_)) => {
                return Err(TranscriptError::Structure {
                    line: line_no,
                    reason: "duplicate meta record".into(),
                })
            }
            (Record::Message(_), None) => {
                return Err(TranscriptError::Structure {
                    line: line_no,
                    reason: "message before meta record".into(),
                })
            }
            (Record::Message(m), Some(c)) => c.messages.push(m),
        }
    }
    let conv = conv.ok_or(TranscriptError::Structure {
        line: 0,
        reason: "empty transcript".into(),
    })?;
    conv.validate()?;
    Ok(conv)
}
