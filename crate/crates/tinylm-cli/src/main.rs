//! `tinylm`: command-line front end for the library. Six subcommands cover
//! the stack end to end: tokenizer training, model training, generation,
//! evaluation, parameter counting, and the carbon-footprint calculator.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage errors (bad
//! flags, missing input files, conflicting configuration). Every failure is
//! a single `error: ...` line on stderr. All randomness flows from explicit
//! seeds, so the same argv over the same files produces identical bytes.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tinylm::error::Error;
use tinylm::footprint::{display_mwh, display_tco2eq, footprint, FootprintInput};
use tinylm::generate::{generate, transcript_line, SampleMode, SampleParams};
use tinylm::model::{ForwardOptions, Model, ModelConfig};
use tinylm::tokenizer::Tokenizer;
use tinylm::train::{load_checkpoint, save_checkpoint, train_loop};

use config::{derived_warmup, FileConfig};

#[derive(Parser)]
#[command(
    name = "tinylm",
    version,
    about = "Train, sample, and evaluate a small LLaMA-style language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-fallback BPE tokenizer from a text corpus
    TokenizerTrain(TokenizerTrainArgs),
    /// Train a model on a text corpus and save a checkpoint
    Train(TrainArgs),
    /// Complete a prompt from a trained checkpoint
    Generate(GenerateArgs),
    /// Score a task file against a checkpoint and report accuracy
    Eval(EvalArgs),
    /// Count model parameters, optionally for a published preset
    Params(ParamsArgs),
    /// Estimate training energy use and carbon emissions
    Carbon(CarbonArgs),
}

#[derive(Args)]
struct TokenizerTrainArgs {
    /// UTF-8 training text
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// Where to write the tokenizer model file
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// JSON config file; the tokenizer section sets the vocabulary target
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// UTF-8 training text
    #[arg(long, value_name = "PATH")]
    corpus: PathBuf,
    /// Where to write the trained checkpoint
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Tokenizer model file; when absent one is trained from the corpus
    /// and saved next to the checkpoint
    #[arg(long, value_name = "PATH")]
    tokenizer: Option<PathBuf>,
    /// Checkpoint to resume from; the architecture then comes from the
    /// checkpoint, not from flags or the config file
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// JSON config file with optional model, train, and tokenizer sections
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Optimizer steps to run
    #[arg(long, value_name = "INT")]
    steps: Option<usize>,
    /// Peak learning rate
    #[arg(long, value_name = "REAL")]
    lr: Option<f64>,
    /// Tokens per optimizer step
    #[arg(long, value_name = "INT")]
    batch_tokens: Option<usize>,
    /// Context window length
    #[arg(long, value_name = "INT")]
    seq_len: Option<usize>,
    /// Seed for weight initialization and data order
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained model checkpoint
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Tokenizer model file
    #[arg(long, value_name = "PATH")]
    tokenizer: PathBuf,
    /// Text to complete
    #[arg(long, value_name = "TEXT")]
    prompt: String,
    /// Sampling temperature; 0 selects greedy decoding
    #[arg(long, value_name = "REAL")]
    temperature: Option<f32>,
    /// Completion budget in tokens
    #[arg(long, value_name = "INT")]
    max_new_tokens: Option<usize>,
    /// Sampling seed
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Append a JSON transcript record to this file's contents
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// JSON config file; the sample section sets decoding defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model checkpoint
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Tokenizer model file
    #[arg(long, value_name = "PATH")]
    tokenizer: PathBuf,
    /// Task file, one JSON task per line
    #[arg(long, value_name = "PATH")]
    tasks: PathBuf,
    /// Sampling temperature for generative tasks; 0 selects greedy
    #[arg(long, value_name = "REAL")]
    temperature: Option<f32>,
    /// Completion budget for generative tasks
    #[arg(long, value_name = "INT")]
    max_new_tokens: Option<usize>,
    /// Sampling seed for generative tasks
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Write the full JSON report here
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// JSON config file; the eval section sets scoring defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Published model size: 7B, 13B, 33B, or 65B
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// JSON config file; the model section sets the architecture to count
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CarbonArgs {
    /// Total GPU-hours of the training run
    #[arg(long, value_name = "REAL")]
    gpu_hours: f64,
    /// Average power draw per GPU in watts (default 400)
    #[arg(long, value_name = "REAL")]
    gpu_watts: Option<f64>,
    /// Data-center power usage effectiveness (default 1.1)
    #[arg(long, value_name = "REAL")]
    pue: Option<f64>,
    /// Grid carbon intensity in kg CO2eq per KWh (default 0.385)
    #[arg(long, value_name = "REAL")]
    intensity: Option<f64>,
}

/// A failure plus its exit class.
pub enum CliError {
    /// Bad invocation: exit 2.
    Usage(String),
    /// Valid invocation that failed: exit 1.
    Runtime(String),
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Library errors about the run's configuration or argument domains are the
/// caller's fault; everything else failed at runtime.
fn classify(e: Error) -> CliError {
    match &e {
        Error::Config(_) | Error::Domain(_) => CliError::Usage(e.to_string()),
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::Usage(e.to_string())
        }
        _ => CliError::Runtime(e.to_string()),
    }
}

/// Reads a required text input; a missing path is a usage error.
pub fn read_input(path: &Path, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| {
        let msg = format!("{what} {}: {e}", path.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Usage(msg)
        } else {
            CliError::Runtime(msg)
        }
    })
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} not found", path.display())))
    }
}

fn write_output(path: &Path, contents: &str, what: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("{what} {}: {e}", path.display())))
}

/// Collapses whitespace so every failure is one machine-parseable line.
fn single_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = match e {
                CliError::Usage(m) => (2, m),
                CliError::Runtime(m) => (1, m),
            };
            eprintln!("error: {}", single_line(&msg));
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::TokenizerTrain(a) => cmd_tokenizer_train(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Params(a) => cmd_params(a),
        Command::Carbon(a) => cmd_carbon(a),
    }
}

fn cmd_tokenizer_train(a: TokenizerTrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let text = read_input(&a.corpus, "corpus")?;
    let tok = Tokenizer::train(std::slice::from_ref(&text), file.tokenizer_vocab())
        .map_err(classify)?;
    tok.save(&a.out).map_err(classify)?;
    println!(
        "trained tokenizer: {} tokens ({} merges) -> {}",
        tok.vocab_size(),
        tok.merges().len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    if a.checkpoint.is_some() && (a.seq_len.is_some() || file.model.is_some()) {
        return Err(usage(
            "the architecture comes from the checkpoint when resuming; \
             remove --seq-len and the model config section",
        ));
    }

    let (mut tcfg, explicit_warmup) = file.train_config();
    if let Some(v) = a.steps {
        tcfg.total_steps = v;
    }
    if let Some(v) = a.lr {
        tcfg.max_lr = v;
    }
    if let Some(v) = a.batch_tokens {
        tcfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        tcfg.seed = v;
    }
    if !explicit_warmup {
        tcfg.warmup_steps = derived_warmup(tcfg.total_steps);
    }

    let text = read_input(&a.corpus, "corpus")?;
    let tokenizer = match &a.tokenizer {
        Some(path) => {
            require_file(path, "tokenizer file")?;
            Tokenizer::load(path).map_err(classify)?
        }
        None => {
            let tok = Tokenizer::train(std::slice::from_ref(&text), file.tokenizer_vocab())
                .map_err(classify)?;
            let side = PathBuf::from(format!("{}.tokenizer", a.out.display()));
            tok.save(&side).map_err(classify)?;
            println!("trained tokenizer: {} tokens -> {}", tok.vocab_size(), side.display());
            tok
        }
    };

    let mut model = match &a.checkpoint {
        Some(path) => {
            require_file(path, "checkpoint")?;
            let (weights, cfg) = load_checkpoint(path).map_err(classify)?;
            if cfg.vocab_size != tokenizer.vocab_size() {
                return Err(usage(format!(
                    "checkpoint vocabulary {} does not match tokenizer vocabulary {}",
                    cfg.vocab_size,
                    tokenizer.vocab_size()
                )));
            }
            Model::new(cfg, weights).map_err(classify)?
        }
        None => {
            let mut mcfg = file.model_config();
            if let Some(v) = a.seq_len {
                mcfg.max_seq_len = v;
            }
            // The embedding has one row per tokenizer entry; an explicit
            // contradictory vocab_size is a conflict, absence is filled in.
            match file.model.as_ref().and_then(|m| m.vocab_size) {
                Some(v) if v != tokenizer.vocab_size() => {
                    return Err(usage(format!(
                        "config vocab_size {v} conflicts with tokenizer vocabulary {}",
                        tokenizer.vocab_size()
                    )));
                }
                _ => mcfg.vocab_size = tokenizer.vocab_size(),
            }
            Model::init(mcfg, tcfg.seed).map_err(classify)?
        }
    };

    let corpus = tokenizer.encode(&text, true);
    println!(
        "training: {} parameters, vocab {}, {} tokens of corpus, {} steps, batch {}, seq {}",
        model.config().count_params(),
        model.config().vocab_size,
        corpus.len(),
        tcfg.total_steps,
        tcfg.batch_size,
        model.config().max_seq_len
    );

    let history = train_loop(&mut model, &corpus, &tcfg, &ForwardOptions::default())
        .map_err(classify)?;
    let stride = (tcfg.total_steps / 10).max(1);
    for rec in &history {
        if rec.step == 1 || rec.step == tcfg.total_steps || rec.step % stride == 0 {
            println!("step {:>6}/{} loss {:.4}", rec.step, tcfg.total_steps, rec.loss);
        }
    }

    save_checkpoint(&model.weights, model.config(), &a.out).map_err(classify)?;
    println!("saved checkpoint -> {}", a.out.display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut params = file.sample_params();
    apply_sample_flags(&mut params, a.temperature, a.max_new_tokens, a.seed)?;

    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.tokenizer, "tokenizer file")?;
    let (weights, cfg) = load_checkpoint(&a.checkpoint).map_err(classify)?;
    let model = Model::new(cfg, weights).map_err(classify)?;
    let tokenizer = Tokenizer::load(&a.tokenizer).map_err(classify)?;

    let g = generate(&model, &tokenizer, &a.prompt, &params).map_err(classify)?;
    if g.lossy {
        eprintln!("warning: completion contained byte sequences that are not valid UTF-8");
    }
    if let Some(out) = &a.out {
        let line = transcript_line(&g, &params) + "\n";
        write_output(out, &line, "transcript file")?;
    }
    println!("{}", g.completion);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut params = file.eval_params();
    apply_sample_flags(&mut params.sample, a.temperature, a.max_new_tokens, a.seed)?;

    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.tokenizer, "tokenizer file")?;
    require_file(&a.tasks, "task file")?;
    let (weights, cfg) = load_checkpoint(&a.checkpoint).map_err(classify)?;
    let model = Model::new(cfg, weights).map_err(classify)?;
    let tokenizer = Tokenizer::load(&a.tokenizer).map_err(classify)?;
    let loaded = tinylm::eval::load_tasks_file(&a.tasks).map_err(classify)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }

    let report = tinylm::eval::run_eval(&model, &tokenizer, &loaded.tasks, &params)
        .map_err(classify)?;
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write_output(out, &json, "report file")?;
    }
    let correct = report.items.iter().filter(|i| i.correct).count();
    println!("accuracy {:.4} ({correct}/{} correct)", report.accuracy, report.items.len());
    Ok(())
}

/// One published row per model size. Dimension, heads, and layers live in
/// the preset itself; the optimization columns are documentation only.
struct PresetRow {
    name: &'static str,
    target: f64,
    target_label: &'static str,
    lr: &'static str,
    batch: &'static str,
    tokens: &'static str,
}

const PRESET_ROWS: [PresetRow; 4] = [
    PresetRow {
        name: "7B",
        target: 6.7e9,
        target_label: "6.7B",
        lr: "3.0e-4",
        batch: "4M",
        tokens: "1.0T",
    },
    PresetRow {
        name: "13B",
        target: 13.0e9,
        target_label: "13.0B",
        lr: "3.0e-4",
        batch: "4M",
        tokens: "1.0T",
    },
    PresetRow {
        name: "33B",
        target: 32.5e9,
        target_label: "32.5B",
        lr: "1.5e-4",
        batch: "4M",
        tokens: "1.4T",
    },
    PresetRow {
        name: "65B",
        target: 65.2e9,
        target_label: "65.2B",
        lr: "1.5e-4",
        batch: "4M",
        tokens: "1.4T",
    },
];

fn cmd_params(a: ParamsArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    match &a.preset {
        Some(name) => {
            if file.model.is_some() {
                return Err(usage("--preset conflicts with the model config section"));
            }
            let row = PRESET_ROWS
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| {
                    usage(format!("unknown preset {name:?}; expected 7B, 13B, 33B, or 65B"))
                })?;
            let cfg = ModelConfig::preset(name).expect("preset table covers the row");
            let count = cfg.count_params();
            let deviation = (count as f64 - row.target).abs() / row.target * 100.0;
            println!(
                "preset {}: dim {}, heads {}, layers {}, lr {}, batch {} tokens, {} training tokens",
                row.name, cfg.dim, cfg.n_heads, cfg.n_layers, row.lr, row.batch, row.tokens
            );
            println!(
                "parameters: {count} (published {}, deviation {deviation:.2}%)",
                row.target_label
            );
        }
        None => {
            let cfg = file.model_config();
            cfg.validate().map_err(classify)?;
            println!(
                "model: dim {}, heads {}, layers {}, vocab {}, seq {}",
                cfg.dim, cfg.n_heads, cfg.n_layers, cfg.vocab_size, cfg.max_seq_len
            );
            println!("parameters: {}", cfg.count_params());
        }
    }
    Ok(())
}

fn cmd_carbon(a: CarbonArgs) -> Result<(), CliError> {
    let mut inp = FootprintInput::new(a.gpu_hours);
    if let Some(v) = a.gpu_watts {
        inp.gpu_power_watts = v;
    }
    if let Some(v) = a.pue {
        inp.pue = v;
    }
    if let Some(v) = a.intensity {
        inp.carbon_intensity = v;
    }
    let fp = footprint(&inp).map_err(classify)?;
    println!("{} MWh / {} tCO2eq", display_mwh(fp.mwh), display_tco2eq(fp.tco2eq));
    println!("exact: {} MWh, {} tCO2eq", fp.mwh, fp.tco2eq);
    Ok(())
}

/// Flag layer for decoding controls. `--temperature 0` selects greedy
/// decoding; positive values select temperature sampling.
fn apply_sample_flags(
    params: &mut SampleParams,
    temperature: Option<f32>,
    max_new_tokens: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    if let Some(t) = temperature {
        if t > 0.0 {
            params.mode = SampleMode::Temperature;
            params.temperature = t;
        } else if t == 0.0 {
            params.mode = SampleMode::Greedy;
        } else {
            return Err(usage(format!("temperature must be non-negative, got {t}")));
        }
    }
    if let Some(n) = max_new_tokens {
        params.max_new_tokens = n;
    }
    if let Some(s) = seed {
        params.seed = s;
    }
    params.validate().map_err(classify)
}
