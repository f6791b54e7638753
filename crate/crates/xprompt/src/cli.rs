//! The `xprompt` command line: prepare-data, select-prompts, train,
//! evaluate, ablate, sweep.
//!
//! Exit codes: 0 on success, 1 for usage/validation problems, 2 for
//! runtime failures. Every artifact is written atomically (temp file +
//! rename). Flags mirror the training config field for field; a `--config`
//! JSON file supplies base values and explicit flags override it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::corpus::{
    atomic_write, device_reviews_spec, generate_synthetic_corpus, restaurant_reviews_spec,
    write_corpus, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablate, ablation_to_csv, evaluate_checkpoint, reports_to_csv,
    sweep_prompt_length, sweep_to_csv, CorpusRegistry, ExperimentSpec, TransferPair,
};
use crate::model::checkpoint;
use crate::prompts::{collect_aspect_tokens, extract_pivot_candidates, rank_candidates};
use crate::rng::child_seed;
use crate::training::{train, Ablation, TrainConfig};

/// Outcome of one CLI invocation.
#[derive(Debug)]
pub struct CommandResult {
    /// 0 success, 1 usage error, 2 runtime failure.
    pub exit_code: u8,
    /// Paths written by the command.
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        CliError::Runtime(error)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

#[derive(Parser)]
#[command(
    name = "xprompt",
    version,
    about = "Soft-prompt joint learning for cross-domain aspect term extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic domain corpora as CoNLL-style TSV files
    PrepareData(PrepareDataArgs),
    /// Extract, score and rank transferable prompt candidates
    SelectPrompts(SelectPromptsArgs),
    /// Train the joint model on one or more source domains
    Train(TrainArgs),
    /// Evaluate a checkpoint on a target domain's test split
    Evaluate(EvaluateArgs),
    /// Run the four-row component ablation per transfer pair
    Ablate(AblateArgs),
    /// Sweep the soft-prompt length and emit the (length, F1) curve
    Sweep(SweepArgs),
}

/// Training knobs shared by train/ablate/sweep. Every flag has the
/// documented default; values from --config are overridden by explicit
/// flags.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// JSON file with training config fields (flat object)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Weight of the aspect-extraction loss [default: 1.0]
    #[arg(long, allow_negative_numbers = true, value_name = "A")]
    alpha: Option<f64>,

    /// Weight of the masked-POS syntax loss [default: 0.5]
    #[arg(long, allow_negative_numbers = true, value_name = "B")]
    beta: Option<f64>,

    /// Fraction of POS tags masked per sentence [default: 0.25]
    #[arg(long, allow_negative_numbers = true, value_name = "R")]
    mask_rate: Option<f64>,

    /// Soft prompt token length m [default: 3]
    #[arg(long, value_name = "M")]
    m: Option<usize>,

    /// Initial learning rate [default: 0.002]
    #[arg(long = "lr", alias = "learning-rate", value_name = "LR")]
    learning_rate: Option<f64>,

    /// Training epochs [default: 20]
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,

    /// Batch size [default: 16]
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,

    /// Base seed for all random streams [default: 42]
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,

    /// Keep backbone weights fixed, training prompts and heads only
    /// [default: true]
    #[arg(long, value_name = "BOOL")]
    freeze_backbone: Option<bool>,

    /// Component ablation [default: full]
    #[arg(long, value_enum, value_name = "SETTING")]
    ablation: Option<Ablation>,

    /// Pivot threshold: a candidate must occur this often in every source
    /// domain [default: 5]
    #[arg(long, value_name = "N")]
    min_count: Option<usize>,

    /// Use pure-sum losses instead of token-mean batch reduction
    /// [default: false]
    #[arg(long)]
    sum_reduction: bool,

    /// Also mask POS tags at inference time [default: false]
    #[arg(long)]
    mask_at_inference: bool,

    /// Add the masked-POS loss over unlabelled target train sentences
    /// [default: false]
    #[arg(long)]
    target_syntax: bool,

    /// Select the m nearest bank rows per input instead of a shared bank
    /// [default: false]
    #[arg(long)]
    per_input_prompts: bool,

    /// Encoder hidden width d [default: 16]
    #[arg(long, value_name = "D")]
    hidden_width: Option<usize>,

    /// Encoder self-attention layers [default: 2]
    #[arg(long, value_name = "N")]
    num_layers: Option<usize>,

    /// Attention heads per layer [default: 2]
    #[arg(long, value_name = "N")]
    num_heads: Option<usize>,

    /// Longest encodable piece sequence [default: 512]
    #[arg(long, value_name = "N")]
    max_length: Option<usize>,

    /// Backbone checkpoint: a path, or a name resolved under
    /// $XPROMPT_CACHE_DIR
    #[arg(long, value_name = "PATH_OR_NAME")]
    backbone: Option<String>,
}

impl ConfigFlags {
    /// Config file first, then explicit flags on top.
    fn resolve(&self) -> CliResult<(TrainConfig, Option<PathBuf>)> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Runtime(Error::io(path, e)))?;
                serde_json::from_str::<TrainConfig>(&text)
                    .map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(alpha) = self.alpha {
            config.alpha = alpha;
        }
        if let Some(beta) = self.beta {
            config.beta = beta;
        }
        if let Some(mask_rate) = self.mask_rate {
            config.mask_rate = mask_rate;
        }
        if let Some(m) = self.m {
            config.m = m;
        }
        if let Some(lr) = self.learning_rate {
            config.learning_rate = lr;
        }
        if let Some(epochs) = self.epochs {
            config.epochs = epochs;
        }
        if let Some(batch_size) = self.batch_size {
            config.batch_size = batch_size;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(freeze) = self.freeze_backbone {
            config.freeze_backbone = freeze;
        }
        if let Some(ablation) = self.ablation {
            config.ablation = ablation;
        }
        if let Some(min_count) = self.min_count {
            config.min_count = min_count;
        }
        if self.sum_reduction {
            config.sum_reduction = true;
        }
        if self.mask_at_inference {
            config.mask_at_inference = true;
        }
        if self.target_syntax {
            config.target_syntax = true;
        }
        if self.per_input_prompts {
            config.per_input_prompts = true;
        }
        if let Some(d) = self.hidden_width {
            config.encoder.hidden_width = d;
        }
        if let Some(layers) = self.num_layers {
            config.encoder.num_layers = layers;
        }
        if let Some(heads) = self.num_heads {
            config.encoder.num_heads = heads;
        }
        if let Some(max_length) = self.max_length {
            config.encoder.max_length = max_length;
        }

        let backbone = match &self.backbone {
            Some(spec) => {
                config.encoder.pretrained = true;
                Some(resolve_backbone(spec)?)
            }
            None => None,
        };
        config
            .validate()
            .map_err(|e| usage(strip_prefix(&e.to_string())))?;
        Ok((config, backbone))
    }
}

fn strip_prefix(message: &str) -> String {
    message
        .strip_prefix("invalid configuration: ")
        .unwrap_or(message)
        .to_string()
}

fn resolve_backbone(spec: &str) -> CliResult<PathBuf> {
    let direct = PathBuf::from(spec);
    if direct.is_dir() {
        return Ok(direct);
    }
    if let Ok(cache) = std::env::var("XPROMPT_CACHE_DIR") {
        let cached = Path::new(&cache).join(spec);
        if cached.is_dir() {
            return Ok(cached);
        }
    }
    Err(usage(format!(
        "backbone {spec:?} is neither a directory nor a name under XPROMPT_CACHE_DIR"
    )))
}

#[derive(Args)]
struct PrepareDataArgs {
    /// Directory receiving one <domain>.tsv per generated corpus
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Synthetic-spec JSON; without it, the builtin device/restaurant
    /// transfer demo is generated
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,

    /// Sentences per builtin domain [default: 60]
    #[arg(long, value_name = "N")]
    sentences: Option<usize>,

    /// Generation seed [default: 42]
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct SelectPromptsArgs {
    /// Directory of <domain>.tsv corpora
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,

    /// Comma-separated labelled source domains
    #[arg(long, value_name = "A,B", value_delimiter = ',')]
    sources: Vec<String>,

    /// Ranked candidate/bank JSON output
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of <domain>.tsv corpora
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,

    /// Comma-separated labelled source domains
    #[arg(long, value_name = "A,B", value_delimiter = ',')]
    sources: Vec<String>,

    /// Target domain (vocabulary building and the target-syntax extension)
    #[arg(long, value_name = "T")]
    target: Option<String>,

    /// Checkpoint directory to write [default: ./checkpoint]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Training log (JSONL); defaults to <out>/train_log.jsonl
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,

    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory produced by `train`
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,

    /// Directory of <domain>.tsv corpora
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,

    /// Target domain whose test split is scored
    #[arg(long, value_name = "T")]
    target: String,

    /// Full JSON report path
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,

    /// CSV report path
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,

    /// Include per-sentence predicted/gold spans in the JSON report
    #[arg(long)]
    per_sentence: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory of <domain>.tsv corpora
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,

    /// Transfer pairs, e.g. "dev:res,res:dev"; multi-source as "a+b:c"
    #[arg(long, value_name = "PAIRS", value_delimiter = ',')]
    pairs: Vec<String>,

    /// Training runs per row, averaged [default: 1]
    #[arg(long, value_name = "N")]
    repetitions: Option<usize>,

    /// Ablation table CSV output
    #[arg(long, value_name = "FILE")]
    csv: PathBuf,

    /// Optional JSON report with full detail
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,

    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct SweepArgs {
    /// Directory of <domain>.tsv corpora
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,

    /// Single transfer pair, e.g. "dev:res"
    #[arg(long, value_name = "PAIR")]
    pair: String,

    /// Comma-separated prompt lengths, e.g. 1,2,3,4,5
    #[arg(long, value_name = "L,L,...", value_delimiter = ',')]
    lengths: Vec<usize>,

    /// Training runs per length, averaged [default: 1]
    #[arg(long, value_name = "N")]
    repetitions: Option<usize>,

    /// Curve CSV output (columns length,f1,seed)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    #[command(flatten)]
    flags: ConfigFlags,
}

/// Parse and run; never panics on bad input.
pub fn run<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(error) => {
            let code = match error.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = error.print();
            return CommandResult {
                exit_code: code,
                artifacts: Vec::new(),
            };
        }
    };
    match execute(cli.command) {
        Ok(artifacts) => CommandResult {
            exit_code: 0,
            artifacts,
        },
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            eprintln!("Run `xprompt --help` for usage.");
            CommandResult {
                exit_code: 1,
                artifacts: Vec::new(),
            }
        }
        Err(CliError::Runtime(error)) => {
            eprintln!("error: {error}");
            CommandResult {
                exit_code: 2,
                artifacts: Vec::new(),
            }
        }
    }
}

/// Entry point used by `main`.
pub fn main_result() -> CommandResult {
    run(std::env::args_os())
}

fn execute(command: Command) -> CliResult<Vec<PathBuf>> {
    match command {
        Command::PrepareData(args) => prepare_data(args),
        Command::SelectPrompts(args) => select_prompts(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Sweep(args) => run_sweep(args),
    }
}

fn prepare_data(args: PrepareDataArgs) -> CliResult<Vec<PathBuf>> {
    let seed = args.seed.unwrap_or(42);
    let sentences = args.sentences.unwrap_or(60);
    if sentences == 0 {
        return Err(usage("sentences must be ≥ 1"));
    }
    let specs: Vec<SyntheticSpec> = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(Error::io(path, e)))?;
            vec![serde_json::from_str(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?]
        }
        None => vec![
            device_reviews_spec("device", sentences),
            restaurant_reviews_spec("restaurant", sentences),
        ],
    };
    let mut artifacts = Vec::new();
    for (index, spec) in specs.iter().enumerate() {
        let corpus = generate_synthetic_corpus(
            child_seed(seed, "prepare-data", index as u64),
            spec,
        )?;
        let path = args.out.join(format!("{}.tsv", spec.domain_name));
        write_corpus(&corpus, &path)?;
        println!(
            "wrote {} ({} train / {} test sentences)",
            path.display(),
            corpus.train.len(),
            corpus.test.len()
        );
        artifacts.push(path);
    }
    Ok(artifacts)
}

fn select_prompts(args: SelectPromptsArgs) -> CliResult<Vec<PathBuf>> {
    if args.sources.is_empty() {
        return Err(usage("at least one --sources domain is required"));
    }
    let (config, backbone) = args.flags.resolve()?;
    let registry = CorpusRegistry::from_dir(&args.data_dir)?;
    let sources: Vec<_> = args
        .sources
        .iter()
        .map(|name| registry.get(name))
        .collect::<Result<_>>()?;

    let model = crate::training::build_model(&config, &sources, None, backbone.as_deref())?;
    let candidates = extract_pivot_candidates(&sources, config.min_count)?;
    let aspect_tokens = collect_aspect_tokens(&sources);
    let embedder = crate::model::BackboneEmbedder {
        encoder: &model.encoder,
        vocab: &model.char_vocab,
    };
    let ranked = rank_candidates(candidates, &embedder, &aspect_tokens)?;

    #[derive(serde::Serialize)]
    struct SelectionReport<'a> {
        m: usize,
        min_count: usize,
        candidates: &'a [crate::prompts::PromptCandidate],
        bank: &'a crate::prompts::PromptBank,
    }
    let report = SelectionReport {
        m: config.m,
        min_count: config.min_count,
        candidates: &ranked,
        bank: &model.bank,
    };
    let mut text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    text.push('\n');
    atomic_write(&args.out, text.as_bytes())?;
    println!(
        "selected {} candidates ({} banked) -> {}",
        ranked.len(),
        model.bank.m(),
        args.out.display()
    );
    Ok(vec![args.out])
}

fn run_train(args: TrainArgs) -> CliResult<Vec<PathBuf>> {
    if args.sources.is_empty() {
        return Err(usage("at least one --sources domain is required"));
    }
    let (config, backbone) = args.flags.resolve()?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("checkpoint"));
    let log_path = args
        .log
        .unwrap_or_else(|| out.join("train_log.jsonl"));

    let registry = CorpusRegistry::from_dir(&args.data_dir)?;
    let sources: Vec<_> = args
        .sources
        .iter()
        .map(|name| registry.get(name))
        .collect::<Result<_>>()?;
    let target = args
        .target
        .as_deref()
        .map(|name| registry.get(name))
        .transpose()?;

    let outcome = train(&config, &sources, target, backbone.as_deref(), Some(&out))?;
    checkpoint::save(&outcome.model, Some(&config), &out)?;
    atomic_write(&log_path, outcome.log_lines()?.as_bytes())?;
    let last = outcome.epochs.last();
    println!
        (
        "trained {}{} for {} epochs (final total loss {:.6}); checkpoint at {}",
        args.sources.join("+"),
        args.target
            .as_deref()
            .map(|t| format!("->{t}"))
            .unwrap_or_default(),
        outcome.epochs.len(),
        last.map(|e| e.total).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(vec![out, log_path])
}

fn run_evaluate(args: EvaluateArgs) -> CliResult<Vec<PathBuf>> {
    let registry = CorpusRegistry::from_dir(&args.data_dir)?;
    let target = registry.get(&args.target)?;
    let report = evaluate_checkpoint(&args.checkpoint, target, args.per_sentence)?;
    println!(
        "{}: precision {:.4}, recall {:.4}, F1 {:.4}",
        target.domain_name, report.precision, report.recall, report.f1
    );
    let mut artifacts = Vec::new();
    if let Some(path) = args.json {
        let mut text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        text.push('\n');
        atomic_write(&path, text.as_bytes())?;
        artifacts.push(path);
    }
    if let Some(path) = args.csv {
        atomic_write(&path, reports_to_csv(std::slice::from_ref(&report)).as_bytes())?;
        artifacts.push(path);
    }
    Ok(artifacts)
}

fn parse_pair(text: &str) -> CliResult<TransferPair> {
    let (sources, target) = text
        .split_once(':')
        .ok_or_else(|| usage(format!("pair {text:?} must look like source:target")))?;
    let sources: Vec<String> = sources
        .split('+')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let target = target.trim().to_string();
    if sources.is_empty() || target.is_empty() {
        return Err(usage(format!("pair {text:?} must name sources and a target")));
    }
    Ok(TransferPair { sources, target })
}

fn run_ablate(args: AblateArgs) -> CliResult<Vec<PathBuf>> {
    if args.pairs.is_empty() {
        return Err(usage("at least one --pairs entry is required"));
    }
    let (config, _backbone) = args.flags.resolve()?;
    let pairs: Vec<TransferPair> = args
        .pairs
        .iter()
        .map(|p| parse_pair(p))
        .collect::<CliResult<_>>()?;
    let spec = ExperimentSpec {
        pairs,
        config,
        repetitions: args.repetitions.unwrap_or(1),
        per_sentence: false,
    };
    spec.validate().map_err(|e| usage(strip_prefix(&e.to_string())))?;
    let registry = CorpusRegistry::from_dir(&args.data_dir)?;
    let rows = ablate(&spec, &registry)?;
    atomic_write(&args.csv, ablation_to_csv(&rows).as_bytes())?;
    let mut artifacts = vec![args.csv.clone()];
    if let Some(path) = args.json {
        let mut text = serde_json::to_string_pretty(&rows).map_err(Error::from)?;
        text.push('\n');
        atomic_write(&path, text.as_bytes())?;
        artifacts.push(path);
    }
    println!(
        "ablation over {} pair(s) x 4 settings -> {}",
        spec.pairs.len(),
        args.csv.display()
    );
    Ok(artifacts)
}

fn run_sweep(args: SweepArgs) -> CliResult<Vec<PathBuf>> {
    if args.lengths.is_empty() {
        return Err(usage("at least one --lengths value is required"));
    }
    if args.lengths.contains(&0) {
        return Err(usage("prompt lengths must be ≥ 1"));
    }
    let (config, _backbone) = args.flags.resolve()?;
    let pair = parse_pair(&args.pair)?;
    let spec = ExperimentSpec {
        pairs: vec![pair],
        config,
        repetitions: args.repetitions.unwrap_or(1),
        per_sentence: false,
    };
    spec.validate().map_err(|e| usage(strip_prefix(&e.to_string())))?;
    let registry = CorpusRegistry::from_dir(&args.data_dir)?;
    let (points, deduplicated) = sweep_prompt_length(&spec, &registry, &args.lengths)?;
    if deduplicated {
        eprintln!("warning: duplicate prompt lengths were removed");
    }
    atomic_write(&args.out, sweep_to_csv(&points).as_bytes())?;
    println!("swept {} prompt length(s) -> {}", points.len(), args.out.display());
    Ok(vec![args.out])
}

/// Render top-level help (used by tests).
pub fn help_text() -> String {
    Cli::command().render_long_help().to_string()
}
