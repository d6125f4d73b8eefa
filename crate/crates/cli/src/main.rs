//! `oss` command line: chat REPL, parameter accounting, checkpoint tools,
//! reasoning-length bench and transcript lint.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 I/O.

use std::fs;
use std::io::{self, BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use oss_core::checkpoint::{self, CheckpointError};
use oss_core::engine::{
    scaling_bench, LanguageModel, SamplerConfig, ScriptedModel, Session, StopReason, BENCH_PROMPTS,
};
use oss_core::harmony::{self, Channel, Conversation, Message, ReasoningLevel, Role};
use oss_core::model::{
    count_parameters, estimate_checkpoint_size, preset_config, reference_counts, Model, ModelConfig, ModelError, GIB,
};
use oss_core::tools::ToolRegistry;

const COT_WARNING: &str = "warning: --show-analysis prints the raw chain of thought. It is not held to the \
same standards as final answers and may contain hallucinated or unsafe content; do not show it to end users.";

#[derive(Parser)]
#[command(name = "oss", version, about = "Toy-scale MoE inference engine with a harmony-style chat format")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Low,
    Medium,
    High,
}

impl From<Level> for ReasoningLevel {
    fn from(l: Level) -> Self {
        match l {
            Level::Low => ReasoningLevel::Low,
            Level::Medium => ReasoningLevel::Medium,
            Level::High => ReasoningLevel::High,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchModel {
    Scripted,
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Chat over stdin, one user message per line (`/quit` or EOF ends).
    Chat {
        /// Checkpoint to load; without it a random model is built from --config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "toy")]
        config: String,
        /// Seed for the random weights when no checkpoint is given.
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        /// Use the rule-based scripted model instead of a network.
        #[arg(long, conflicts_with = "checkpoint")]
        scripted: bool,
        #[arg(long, value_enum, default_value = "medium")]
        reasoning: Level,
        #[arg(long, default_value_t = 256)]
        max_tokens: usize,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        show_analysis: bool,
        #[arg(long)]
        system: Option<String>,
        /// Run without any tools registered.
        #[arg(long)]
        no_tools: bool,
        #[arg(long)]
        transcript_out: Option<PathBuf>,
    },
    /// Print parameter counts and checkpoint size for a preset.
    Paramcount {
        #[arg(long)]
        config: String,
    },
    /// Write a randomly initialised checkpoint.
    Init {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert expert weights to MXFP4.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert MXFP4 expert weights back to f32.
    Dequantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokens generated per reasoning level on fixed prompts (no accuracy).
    ScalingBench {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "low,medium,high")]
        levels: Vec<Level>,
        #[arg(long, value_enum, default_value = "scripted")]
        model: BenchModel,
        /// Analysis pieces the scripted model emits at low,medium,high.
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        pieces: Vec<usize>,
        #[arg(long, default_value_t = 4096)]
        max_tokens: usize,
    },
    /// Check a JSONL transcript for harmony well-formedness.
    ValidateTranscript { file: PathBuf },
}

enum Failure {
    Usage(String),
    Validation(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Io(m) => m,
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => Failure::Io(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnknownPreset(_) => Failure::Usage(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<oss_core::engine::EngineError> for Failure {
    fn from(e: oss_core::engine::EngineError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Chat {
            checkpoint,
            config,
            init_seed,
            scripted,
            reasoning,
            max_tokens,
            temperature,
            seed,
            show_analysis,
            system,
            no_tools,
            transcript_out,
        } => {
            let sampler = match temperature {
                Some(t) => SamplerConfig::temperature(t, seed, max_tokens),
                None => SamplerConfig::greedy(max_tokens),
            };
            sampler.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let opts = ChatOptions {
                reasoning: reasoning.into(),
                sampler,
                show_analysis,
                system,
                no_tools,
                transcript_out,
            };
            if show_analysis {
                eprintln!("{COT_WARNING}");
            }
            if scripted {
                chat(&ScriptedModel::demo(), opts)
            } else {
                let model = match checkpoint {
                    Some(p) => checkpoint::load_checkpoint(&p)?,
                    None => Model::init_random(&preset_config(&config)?, init_seed)?,
                };
                chat(&model, opts)
            }
        }
        Command::Paramcount { config } => paramcount(&config),
        Command::Init { config, seed, out } => {
            let model = Model::init_random(&preset_config(&config)?, seed)?;
            checkpoint::save_checkpoint(&model, &out)?;
            println!("wrote {} ({} preset, seed {seed})", out.display(), model.config.name);
            Ok(())
        }
        Command::Quantize { input, out } => {
            let mut model = checkpoint::load_checkpoint(&input)?;
            if model.has_quantized_experts() {
                return Err(Failure::Validation(format!("{} already holds MXFP4 experts", input.display())));
            }
            let r = model.quantize_experts_report()?;
            checkpoint::save_checkpoint(&model, &out)?;
            println!("expert_tensors={}", r.tensors);
            println!("expert_params={}", r.params);
            println!("bits_per_param={:.4}", r.bits_per_param());
            println!("max_abs_error={:.6e}", r.max_abs_error);
            println!("mean_abs_error={:.6e}", r.mean_abs_error);
            println!("worst_error_over_bound={:.4}", r.worst_bound_ratio);
            Ok(())
        }
        Command::Dequantize { input, out } => {
            let mut model = checkpoint::load_checkpoint(&input)?;
            let was = model.has_quantized_experts();
            model.dequantize_experts();
            checkpoint::save_checkpoint(&model, &out)?;
            println!("wrote {}{}", out.display(), if was { "" } else { " (experts were already f32)" });
            Ok(())
        }
        Command::ScalingBench {
            levels,
            model,
            pieces,
            max_tokens,
        } => {
            let levels: Vec<ReasoningLevel> = levels.into_iter().map(Into::into).collect();
            let sampler = SamplerConfig::greedy(max_tokens);
            let stats = match model {
                BenchModel::Scripted => {
                    let counts: [usize; 3] = pieces
                        .try_into()
                        .map_err(|_| Failure::Usage("--pieces takes exactly three counts".into()))?;
                    scaling_bench(&ScriptedModel::reasoning_lengths(counts), &levels, &BENCH_PROMPTS, sampler)?
                }
                BenchModel::Toy => {
                    let m = Model::init_random(&preset_config("toy")?, 0)?;
                    scaling_bench(&m, &levels, &BENCH_PROMPTS, sampler)?
                }
            };
            println!("{:<8} {:>8} {:>12} {:>16}", "level", "prompts", "mean_tokens", "mean_cot_pieces");
            for s in &stats {
                println!(
                    "{:<8} {:>8} {:>12.1} {:>16.1}",
                    s.level.as_str(),
                    s.tokens.len(),
                    s.mean_tokens(),
                    s.mean_analysis_pieces()
                );
            }
            Ok(())
        }
        Command::ValidateTranscript { file } => {
            let text = fs::read_to_string(&file).map_err(io_err(&file))?;
            let conv = harmony::read_transcript(&text).map_err(|e| Failure::Validation(e.to_string()))?;
            harmony::check_tool_pairing(&conv).map_err(|e| Failure::Validation(e.to_string()))?;
            println!("ok: {} messages", conv.messages.len());
            Ok(())
        }
    }
}

struct ChatOptions {
    reasoning: ReasoningLevel,
    sampler: SamplerConfig,
    show_analysis: bool,
    system: Option<String>,
    no_tools: bool,
    transcript_out: Option<PathBuf>,
}

fn chat<M: LanguageModel>(model: &M, opts: ChatOptions) -> Outcome {
    let tools = if opts.no_tools { ToolRegistry::new() } else { ToolRegistry::builtin() };
    let mut conv = Conversation::new(opts.reasoning);
    conv.tools = tools.schemas();
    if let Some(s) = &opts.system {
        conv.messages.push(Message::system(s));
    }
    let mut session = Session::new(model, conv, opts.sampler, tools)?;
    let stdin = io::stdin();
    let interactive = stdin.is_terminal();
    let mut out = io::stdout().lock();
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            let _ = write!(out, "> ");
            let _ = out.flush();
        }
        let Some(line) = lines.next() else { break };
        let line = line.map_err(|e| Failure::Io(format!("stdin: {e}")))?;
        let line = line.trim_end();
        if line == "/quit" {
            break;
        }
        if line.is_empty() {
            continue;
        }
        let turn = session.send_user(line)?;
        for m in &turn.messages {
            match (m.role, m.channel) {
                (Role::Assistant, Some(Channel::Analysis)) if opts.show_analysis => {
                    let _ = writeln!(out, "[analysis] {}", m.content);
                }
                (Role::Assistant, Some(Channel::Analysis)) => {}
                (Role::Assistant, _) if m.recipient.is_some() => {
                    let _ = writeln!(out, "[call {}] {}", m.recipient.as_deref().unwrap_or(""), m.content);
                }
                (Role::Tool, _) => {
                    let _ = writeln!(out, "[result {}] {}", m.author.as_deref().unwrap_or(""), m.content);
                }
                (Role::Assistant, Some(Channel::Commentary)) => {
                    let _ = writeln!(out, "[commentary] {}", m.content);
                }
                _ => {
                    let _ = writeln!(out, "assistant: {}", m.content);
                }
            }
        }
        match turn.stop {
            StopReason::Final => {}
            StopReason::MaxTokens => {
                let _ = writeln!(out, "[truncated after {} tokens]", turn.tokens_generated);
            }
            StopReason::Stuck => {
                let _ = writeln!(out, "[stopped: no valid continuation]");
            }
        }
    }
    let conv = session.conversation();
    conv.validate()
        .and_then(|()| harmony::check_tool_pairing(conv))
        .map_err(|e| Failure::Validation(format!("transcript is not well formed: {e}")))?;
    if let Some(path) = &opts.transcript_out {
        fs::write(path, session.transcript()).map_err(io_err(path))?;
    }
    Ok(())
}

fn billions(n: f64) -> String {
    format!("{:.2}B", n / 1e9)
}

fn delta(ours: f64, reference: f64) -> f64 {
    (ours - reference) / reference * 100.0
}

fn paramcount(name: &str) -> Outcome {
    let cfg: ModelConfig = preset_config(name)?;
    let r = count_parameters(&cfg);
    let size = estimate_checkpoint_size(&cfg);
    let gib = size as f64 / GIB;
    let reference = reference_counts(name);
    let rows = [
        ("mlp", r.mlp_params, reference.map(|x| x.mlp)),
        ("attention", r.attention_params, reference.map(|x| x.attention)),
        ("embed+unembed", r.embed_unembed_params, reference.map(|x| x.embed_unembed)),
        ("active", r.active_params, reference.map(|x| x.active)),
        ("total", r.total_params, reference.map(|x| x.total)),
    ];
    println!("preset {name}");
    println!("{:<15} {:>16} {:>10} {:>10} {:>9}", "component", "params", "billions", "published", "delta");
    for (label, n, rf) in rows {
        let (pubd, d) = match rf {
            Some(x) => (billions(x), format!("{:+.3}%", delta(n as f64, x))),
            None => ("-".into(), "-".into()),
        };
        println!("{label:<15} {n:>16} {:>10} {pubd:>10} {d:>9}", billions(n as f64));
    }
    let (pubd, d) = match reference {
        Some(x) => (format!("{:.1}GiB", x.checkpoint_gib), format!("{:+.3}%", delta(gib, x.checkpoint_gib))),
        None => ("-".into(), "-".into()),
    };
    println!("{:<15} {size:>16} {:>10} {pubd:>10} {d:>9}", "checkpoint", format!("{gib:.2}GiB"));
    println!();
    println!("mlp_params={}", r.mlp_params);
    println!("attention_params={}", r.attention_params);
    println!("embed_unembed_params={}", r.embed_unembed_params);
    println!("active_params={}", r.active_params);
    println!("total_params={}", r.total_params);
    println!("checkpoint_bytes={size}");
    println!("checkpoint_gib={gib:.3}");
    Ok(())
}
