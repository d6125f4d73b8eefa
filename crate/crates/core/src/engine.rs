//! Decoding loop: render the conversation, feed it to a model, sample under a
//! harmony grammar mask, dispatch tool calls and stop at the final message.
//!
//! The mask keeps every sampled stream well formed: a channel header from
//! {analysis, commentary[ to=recipient], final}, printable ASCII content, and
//! only the terminators that make sense for the header (`<|call|>` iff a
//! recipient was named, `<|return|>` only on the final channel). Frame
//! openers (`<|start|>assistant`) and tool results are injected by the
//! engine, not sampled, and do not count against `max_tokens`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::KvCache;
use crate::harmony::{
    self, check_tool_name, render_conversation, render_model_message, Channel, ContentKind, Conversation, Message,
    ReasoningLevel, Role, ValidationError, ASSISTANT_CUE,
};
use crate::model::{Model, ModelError};
use crate::tokenizer::{self, TokenizerError, CALL, CHANNEL, END, MESSAGE, MIN_VOCAB, RETURN};
use crate::tools::{ToolError, ToolRegistry};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error("invalid sampler configuration: {0}")]
    Sampler(String),
    #[error("model vocabulary {0} is smaller than the {MIN_VOCAB} ids the format needs")]
    VocabTooSmall(usize),
    #[error("non-finite logit for token {0}")]
    NonFiniteLogit(u32),
    #[error("model returned {got} logits, expected {expected}")]
    LogitCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Greedy,
    Temperature,
}

/// Generation always stops at the final-message terminator; `max_tokens`
/// caps the number of sampled tokens per assistant turn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub temperature: f32,
    pub seed: u64,
    pub max_tokens: usize,
}

impl SamplerConfig {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            mode: SamplingMode::Greedy,
            temperature: 1.0,
            seed: 0,
            max_tokens,
        }
    }

    pub fn temperature(temperature: f32, seed: u64, max_tokens: usize) -> Self {
        Self {
            mode: SamplingMode::Temperature,
            temperature,
            seed,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SamplingMode::Temperature && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(EngineError::Sampler(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Greedy argmax (lowest id wins ties) or temperature sampling driven by
/// ChaCha8 seeded from the config, so sampled transcripts replay exactly.
pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// `None` when the mask admits no token.
    pub fn sample(&mut self, logits: &[f32], allowed: &[bool]) -> Result<Option<u32>> {
        let candidates: Vec<usize> = (0..logits.len().min(allowed.len())).filter(|&i| allowed[i]).collect();
        if let Some(&bad) = candidates.iter().find(|&&i| !logits[i].is_finite()) {
            return Err(EngineError::NonFiniteLogit(bad as u32));
        }
        let Some(&first) = candidates.first() else {
            return Ok(None);
        };
        let mut best = first;
        for &i in &candidates {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        if self.config.mode == SamplingMode::Greedy {
            return Ok(Some(best as u32));
        }
        let t = f64::from(self.config.temperature);
        let max = f64::from(logits[best]);
        let weights: Vec<f64> = candidates.iter().map(|&i| ((f64::from(logits[i]) - max) / t).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = self.rng.random::<f64>() * total;
        for (&i, w) in candidates.iter().zip(&weights) {
            if u < *w {
                return Ok(Some(i as u32));
            }
            u -= w;
        }
        Ok(Some(*candidates.last().expect("non-empty") as u32))
    }
}

/// Anything that maps a token prefix to next-token logits.
pub trait LanguageModel {
    type State;
    fn vocab_size(&self) -> usize;
    fn new_state(&self) -> Self::State;
    /// Append `tokens` (non-empty) and return logits for the next position.
    fn feed(&self, state: &mut Self::State, tokens: &[u32]) -> Result<Vec<f32>>;
}

impl LanguageModel for Model {
    type State = KvCache;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn new_state(&self) -> KvCache {
        self.new_cache()
    }

    fn feed(&self, state: &mut KvCache, tokens: &[u32]) -> Result<Vec<f32>> {
        let logits = self.forward(tokens, state)?;
        let vocab = self.config.vocab_size;
        Ok(logits.data()[logits.numel() - vocab..].to_vec())
    }
}

/// What a scripted model can see of its context.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScriptContext {
    pub reasoning: Option<ReasoningLevel>,
    /// Content of the last user message.
    pub user: Option<String>,
    /// Tool results received so far in the current turn.
    pub tool_results: Vec<String>,
}

pub type Script = dyn Fn(&ScriptContext) -> Vec<Message> + Send + Sync;

/// Test hook: puts a large logit on the next token of a scripted assistant
/// turn. The script returns the assistant messages of the whole turn; it is
/// re-evaluated as tool results arrive, so later messages may depend on them.
pub struct ScriptedModel {
    vocab: usize,
    script: Box<Script>,
}

pub const SCRIPT_LOGIT: f32 = 10.0;

fn ascii_only(s: &str) -> String {
    s.chars()
        .map(|c| if c == '\n' || (' '..='~').contains(&c) { c } else { '?' })
        .collect()
}

impl ScriptedModel {
    pub fn new(script: Box<Script>) -> Self {
        Self {
            vocab: MIN_VOCAB,
            script,
        }
    }

    /// Emits `counts[level]` analysis pieces (`step1 step2 ...`) then a short
    /// final answer. Missing reasoning keyword counts as medium.
    pub fn reasoning_lengths(counts: [usize; 3]) -> Self {
        Self::new(Box::new(move |ctx| {
            let level = ctx.reasoning.unwrap_or_default();
            let n = counts[ReasoningLevel::ALL.iter().position(|l| *l == level).expect("level")];
            let mut out = Vec::new();
            if n > 0 {
                let steps: Vec<String> = (1..=n).map(|i| format!("step{i}")).collect();
                out.push(Message::assistant(Channel::Analysis, steps.join(" ")));
            }
            out.push(Message::assistant(Channel::Final, "Done."));
            out
        }))
    }

    /// Small rule set used by the CLI: `/echo T`, `/calc E`, `/search Q`
    /// and `/time` call the matching stub; anything else is echoed back.
    pub fn demo() -> Self {
        Self::new(Box::new(|ctx| {
            let user = ctx.user.clone().unwrap_or_default();
            let words = harmony::count_pieces(&user);
            let mut out = vec![Message::assistant(
                Channel::Analysis,
                format!("The user sent {words} words."),
            )];
            let call = if let Some(t) = user.strip_prefix("/echo ") {
                Some(("functions.echo", serde_json::json!({ "text": t }).to_string()))
            } else if let Some(e) = user.strip_prefix("/calc ") {
                Some(("python", e.to_string()))
            } else if let Some(q) = user.strip_prefix("/search ") {
                Some(("browser.search", serde_json::json!({ "query": q }).to_string()))
            } else if user.trim() == "/time" {
                Some(("functions.clock", "{}".to_string()))
            } else {
                None
            };
            match call {
                Some((to, args)) => {
                    out.push(Message::tool_call(to, args));
                    if let Some(r) = ctx.tool_results.first() {
                        out.push(Message::assistant(Channel::Final, format!("{to} returned {r}")));
                    }
                }
                None => out.push(Message::assistant(Channel::Final, format!("You said: {user}"))),
            }
            out
        }))
    }

    fn context(text: &str) -> Option<(ScriptContext, &str)> {
        let user_open = "<|start|>user<|message|>";
        let u = text.rfind(user_open)? + user_open.len();
        let end = u + text[u..].find(harmony::END)?;
        let turn = &text[end + harmony::END.len()..];
        let reasoning = text
            .find("Reasoning: ")
            .and_then(|i| {
                let rest = &text[i + "Reasoning: ".len()..];
                let word: String = rest.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
                ReasoningLevel::parse(&word)
            });
        let tool_open = " to=assistant<|message|>";
        let tool_results = turn
            .match_indices(tool_open)
            .filter_map(|(i, _)| {
                let body = &turn[i + tool_open.len()..];
                body.find(harmony::END).map(|e| body[..e].to_string())
            })
            .collect();
        let ctx = ScriptContext {
            reasoning,
            user: Some(text[u..end].to_string()),
            tool_results,
        };
        Some((ctx, turn))
    }

    fn next_token(&self, tokens: &[u32]) -> Option<u32> {
        let text = tokenizer::decode(tokens).ok()?;
        let (ctx, turn) = Self::context(&text)?;
        let segments: Vec<String> = (self.script)(&ctx)
            .iter()
            .map(|m| render_model_message(&Message {
                content: ascii_only(&m.content),
                ..m.clone()
            }))
            .collect();
        let parts: Vec<&str> = turn.split(ASSISTANT_CUE).collect();
        if parts.len() < 2 || !parts[0].is_empty() {
            return None;
        }
        let current = parts[parts.len() - 1];
        let target = tokenizer::encode(segments.get(parts.len() - 2)?);
        let done = tokenizer::encode(current);
        if target.len() > done.len() && target.starts_with(&done) {
            Some(target[done.len()])
        } else {
            None
        }
    }
}

impl LanguageModel for ScriptedModel {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn new_state(&self) -> Vec<u32> {
        Vec::new()
    }

    fn feed(&self, state: &mut Vec<u32>, tokens: &[u32]) -> Result<Vec<f32>> {
        state.extend_from_slice(tokens);
        let mut logits = vec![0.0; self.vocab];
        if let Some(t) = self.next_token(state) {
            logits[t as usize] = SCRIPT_LOGIT;
        }
        Ok(logits)
    }
}

const CHANNEL_NAMES: [&str; 3] = ["analysis", "commentary", "final"];
const MAX_HEADER_LEN: usize = 64;

fn header_prefix_ok(s: &str) -> bool {
    if CHANNEL_NAMES.iter().any(|c| c.starts_with(s)) {
        return true;
    }
    let Some(rest) = s.strip_prefix("commentary") else {
        return false;
    };
    if " to=".starts_with(rest) {
        return true;
    }
    let Some(r) = rest.strip_prefix(" to=") else {
        return false;
    };
    let segs: Vec<&str> = r.split('.').collect();
    segs.iter().enumerate().all(|(i, seg)| {
        let mut chars = seg.chars();
        match chars.next() {
            None => i + 1 == segs.len() && i > 0,
            Some(c) => (c.is_ascii_alphabetic() || c == '_') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_'),
        }
    })
}

/// Channel and recipient of a finished header.
fn parse_header(s: &str) -> Option<(Channel, Option<String>)> {
    if let Some(ch) = Channel::parse(s) {
        return Some((ch, None));
    }
    let r = s.strip_prefix("commentary to=")?;
    check_tool_name(r).ok()?;
    Some((Channel::Commentary, Some(r.to_string())))
}

enum Phase {
    AwaitChannel,
    Header(String),
    Content {
        channel: Channel,
        recipient: Option<String>,
        text: String,
    },
}

fn content_byte_ok(b: u8) -> bool {
    b == b'\n' || (0x20..=0x7e).contains(&b)
}

impl Phase {
    fn allowed(&self, vocab: usize) -> Vec<bool> {
        let mut mask = vec![false; vocab];
        match self {
            Phase::AwaitChannel => mask[CHANNEL as usize] = true,
            Phase::Header(h) => {
                if h.len() < MAX_HEADER_LEN {
                    for b in 0x20u8..=0x7e {
                        let mut next = h.clone();
                        next.push(b as char);
                        mask[b as usize] = header_prefix_ok(&next);
                    }
                }
                mask[MESSAGE as usize] = parse_header(h).is_some();
            }
            Phase::Content { channel, recipient, text } => {
                for b in 0u8..=0x7e {
                    if content_byte_ok(b) {
                        let mut next = text.clone();
                        next.push(b as char);
                        mask[b as usize] = !harmony::DELIMITERS.iter().any(|d| next.ends_with(d));
                    }
                }
                mask[CALL as usize] = recipient.is_some();
                mask[END as usize] = recipient.is_none();
                mask[RETURN as usize] = *channel == Channel::Final && recipient.is_none();
            }
        }
        mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Final-channel message terminated.
    Final,
    MaxTokens,
    /// The grammar admitted no further token (e.g. an over-long header).
    Stuck,
}

/// One assistant turn: assistant messages and the tool results injected
/// between them, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub messages: Vec<Message>,
    pub stop: StopReason,
    pub tokens_generated: usize,
}

impl Turn {
    pub fn truncated(&self) -> bool {
        self.stop != StopReason::Final
    }

    pub fn final_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant && m.channel == Some(Channel::Final))
            .map(|m| m.content.as_str())
    }

    pub fn analysis_pieces(&self) -> usize {
        self.messages.iter().filter(|m| m.is_analysis()).map(|m| harmony::count_pieces(&m.content)).sum()
    }
}

/// A conversation bound to a model. `&mut self` on generation keeps one
/// active generation per session; sessions can share one model.
pub struct Session<'m, M: LanguageModel> {
    model: &'m M,
    conversation: Conversation,
    sampler: Sampler,
    tools: ToolRegistry,
    state: Option<M::State>,
    fed: Vec<u32>,
}

impl<'m, M: LanguageModel> Session<'m, M> {
    pub fn new(model: &'m M, conversation: Conversation, sampler: SamplerConfig, tools: ToolRegistry) -> Result<Self> {
        if model.vocab_size() < MIN_VOCAB {
            return Err(EngineError::VocabTooSmall(model.vocab_size()));
        }
        conversation.validate()?;
        Ok(Self {
            model,
            conversation,
            sampler: Sampler::new(sampler)?,
            tools,
            state: None,
            fed: Vec::new(),
        })
    }

    pub fn conversation(&self) -> &Conversation {
        &self.conversation
    }

    pub fn transcript(&self) -> String {
        harmony::write_transcript(&self.conversation)
    }

    pub fn tools(&self) -> &ToolRegistry {
        &self.tools
    }

    pub fn send_user(&mut self, text: &str) -> Result<Turn> {
        let m = Message::user(text);
        m.validate().map_err(|reason| ValidationError {
            index: Some(self.conversation.messages.len()),
            reason,
        })?;
        self.conversation.messages.push(m);
        self.generate()
    }

    fn feed(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        let state = self.state.get_or_insert_with(|| self.model.new_state());
        let logits = self.model.feed(state, tokens)?;
        if logits.len() != self.model.vocab_size() {
            return Err(EngineError::LogitCount {
                expected: self.model.vocab_size(),
                got: logits.len(),
            });
        }
        self.fed.extend_from_slice(tokens);
        Ok(logits)
    }

    /// Prompt the model with the rendered conversation, reusing the cached
    /// state when it already holds a strict prefix of the prompt.
    fn prime(&mut self, prompt: &[u32]) -> Result<Vec<f32>> {
        let reusable = self.state.is_some() && self.fed.len() < prompt.len() && prompt.starts_with(&self.fed);
        if !reusable {
            self.state = None;
            self.fed.clear();
        }
        let suffix = prompt[self.fed.len()..].to_vec();
        self.feed(&suffix)
    }

    /// Run one assistant turn. Completed messages (and a truncated trailing
    /// non-call message) are appended to the conversation.
    pub fn generate(&mut self) -> Result<Turn> {
        let prompt = tokenizer::encode(&render_conversation(&self.conversation)?);
        let max_tokens = self.sampler.config().max_tokens;
        let mut turn = Turn {
            messages: Vec::new(),
            stop: StopReason::MaxTokens,
            tokens_generated: 0,
        };
        if max_tokens == 0 {
            return Ok(turn);
        }
        let mut logits = self.prime(&prompt)?;
        let vocab = self.model.vocab_size();
        let mut phase = Phase::AwaitChannel;
        loop {
            if turn.tokens_generated >= max_tokens {
                turn.stop = StopReason::MaxTokens;
                break;
            }
            let Some(tok) = self.sampler.sample(&logits, &phase.allowed(vocab))? else {
                turn.stop = StopReason::Stuck;
                break;
            };
            turn.tokens_generated += 1;
            logits = self.feed(&[tok])?;
            phase = match phase {
                Phase::AwaitChannel => Phase::Header(String::new()),
                Phase::Header(mut h) if tok != MESSAGE => {
                    h.push(tok as u8 as char);
                    Phase::Header(h)
                }
                Phase::Header(h) => {
                    let (channel, recipient) = parse_header(&h).expect("mask admits only complete headers");
                    Phase::Content {
                        channel,
                        recipient,
                        text: String::new(),
                    }
                }
                Phase::Content {
                    channel,
                    recipient,
                    mut text,
                } if !tokenizer::is_special(tok) => {
                    text.push(tok as u8 as char);
                    Phase::Content { channel, recipient, text }
                }
                Phase::Content { channel, recipient, text } => {
                    let message = match recipient {
                        Some(r) => Message::tool_call(r, text),
                        None => Message::assistant(channel, text),
                    };
                    self.push(&mut turn, message.clone());
                    let mut inject = String::new();
                    if tok == CALL {
                        let result = self.tools.dispatch(&message)?;
                        inject.push_str(&render_frame(&result));
                        self.push(&mut turn, result);
                    } else if tok == RETURN || channel == Channel::Final {
                        turn.stop = StopReason::Final;
                        phase = Phase::AwaitChannel;
                        break;
                    }
                    inject.push_str(ASSISTANT_CUE);
                    logits = self.feed(&tokenizer::encode(&inject))?;
                    Phase::AwaitChannel
                }
            };
        }
        if let Phase::Content {
            channel,
            recipient: None,
            text,
        } = phase
        {
            if turn.stop != StopReason::Final {
                self.push(&mut turn, Message::assistant(channel, text));
            }
        }
        Ok(turn)
    }

    fn push(&mut self, turn: &mut Turn, m: Message) {
        self.conversation.messages.push(m.clone());
        turn.messages.push(m);
    }
}

fn render_frame(tool_result: &Message) -> String {
    debug_assert_eq!(tool_result.kind, ContentKind::ToolResult);
    format!(
        "{}{} to=assistant{}{}{}",
        harmony::START,
        tool_result.author.as_deref().unwrap_or_default(),
        harmony::MESSAGE,
        tool_result.content,
        harmony::END
    )
}

/// Per-level generation lengths over a fixed prompt set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelStats {
    pub level: ReasoningLevel,
    pub tokens: Vec<usize>,
    pub analysis_pieces: Vec<usize>,
}

impl LevelStats {
    pub fn mean_tokens(&self) -> f64 {
        mean(&self.tokens)
    }

    pub fn mean_analysis_pieces(&self) -> f64 {
        mean(&self.analysis_pieces)
    }
}

fn mean(v: &[usize]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<usize>() as f64 / v.len() as f64
    }
}

pub const BENCH_PROMPTS: [&str; 5] = [
    "What is 17 times 23?",
    "Name three prime numbers.",
    "Summarize the rules of chess in one sentence.",
    "Is a whale a fish?",
    "Spell 'mixture' backwards.",
];

/// Only the reasoning keyword changes between levels; everything else
/// (prompts, sampler, tools) is held fixed.
pub fn scaling_bench<M: LanguageModel>(
    model: &M,
    levels: &[ReasoningLevel],
    prompts: &[&str],
    sampler: SamplerConfig,
) -> Result<Vec<LevelStats>> {
    levels
        .iter()
        .map(|&level| {
            let mut stats = LevelStats {
                level,
                tokens: Vec::new(),
                analysis_pieces: Vec::new(),
            };
            for p in prompts {
                let mut s = Session::new(model, Conversation::new(level), sampler, ToolRegistry::builtin())?;
                let turn = s.send_user(p)?;
                stats.tokens.push(turn.tokens_generated);
                stats.analysis_pieces.push(turn.analysis_pieces());
            }
            Ok(stats)
        })
        .collect()
}
