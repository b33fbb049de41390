//! Subcommands behind the `kgd` binary.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use kgd_core::corpus::{self, DialogueExample, KnowledgeMode};
use kgd_core::decode::{self, AlphaMode, SweepItem, DEFAULT_ALPHAS};
use kgd_core::index::{Bm25Params, InvertedIndex};
use kgd_core::io::{read_to_string, write_atomic_str};
use kgd_core::metrics::{MetricReport, ResponseScorer};
use kgd_core::nets::{pack_input, Model};
use kgd_core::synth::{self, SynthConfig};
use kgd_core::textcore::{alpha_bucket, SEP};
use kgd_core::trainer::{self, candidates_for, TrainConfig, Trainer, CONFIG_FILE};
use kgd_core::Error;

pub mod chat;

#[derive(Debug, Parser)]
#[command(name = "kgd", version, about = "Knowledge-grounded dialogue: indexes, training, evaluation and chat")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index a knowledge corpus for BM25 retrieval.
    BuildKb(BuildKbArgs),
    /// Keep the dialogues that pass the grounding filters.
    FilterDialogues(FilterArgs),
    Train(TrainArgs),
    /// Decode a test set and report F1, BLEU and perplexity.
    Eval(EvalArgs),
    /// Mean similarity to the gold knowledge for each fixed grounding rate.
    SweepAlpha(SweepArgs),
    /// Interactive session on stdin.
    Chat(ChatArgs),
    /// Write the templated toy corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Doc,
    Sentence,
}

impl From<Mode> for KnowledgeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Doc => KnowledgeMode::Doc,
            Mode::Sentence => KnowledgeMode::Sentence,
        }
    }
}

#[derive(Debug, Args)]
pub struct BuildKbArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "sentence")]
    pub mode: Mode,
    /// Output prefix; writes `<prefix>.idx` and `<prefix>.sentences.txt`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.2)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.75)]
    pub b: f64,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Index prefix written by `build-kb`.
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dialogues, one JSON object per line.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation dialogues; split off the training file when absent.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub valid_fraction: f64,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` lines; flags below take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the small preset instead of the defaults.
    #[arg(long)]
    pub smoke: bool,
    /// Continue from a saved checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub validate_every: Option<u64>,
    #[arg(long)]
    pub disable_z_alpha: bool,
    #[arg(long)]
    pub disable_mi: bool,
    #[arg(long)]
    pub squeeze_posterior: bool,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    /// Candidates retrieved when an example has none of its own.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub test: PathBuf,
    /// Score these responses (one per line) instead of decoding.
    #[arg(long)]
    pub hypotheses: Option<PathBuf>,
    /// Fixed grounding rate; the predictor is used otherwise.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// TSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub test: PathBuf,
    /// Comma-separated rates; 0.1 to 0.9 by default.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Use only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for `knowledge.txt` and `dialogues.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub dialogues: usize,
    #[arg(long, default_value_t = 10)]
    pub candidates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_IO: i32 = 2;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } => EXIT_IO,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_FAILURE,
        message: message.into(),
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Runs one command, writing its summary or artifact to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> CliResult<()> {
    let text = match cli.command {
        Command::BuildKb(a) => build_kb(&a)?,
        Command::FilterDialogues(a) => filter_dialogues(&a)?,
        Command::Train(a) => train(&a)?,
        Command::Eval(a) => eval(&a)?,
        Command::SweepAlpha(a) => sweep_alpha(&a)?,
        Command::Synth(a) => write_synth(&a)?,
        Command::Chat(a) => {
            let session = chat::Session::open(&a)?;
            let stdin = std::io::stdin();
            return chat::run_repl(session, stdin.lock(), out).map_err(|e| CliError {
                code: EXIT_IO,
                message: e.to_string(),
            });
        }
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError {
        code: EXIT_IO,
        message: e.to_string(),
    })
}

pub fn build_kb(a: &BuildKbArgs) -> CliResult<String> {
    let sentences = corpus::load_knowledge(&a.input, a.mode.into())?;
    let index = InvertedIndex::build_with(&sentences, Bm25Params { k1: a.k1, b: a.b })?;
    index.save(&a.out)?;
    Ok(format!("sentences\t{}\navg_len\t{:.4}\n", index.len(), index.avg_len()))
}

pub fn filter_dialogues(a: &FilterArgs) -> CliResult<String> {
    let index = InvertedIndex::load(&a.kb)?;
    let (examples, bad) = corpus::parse_dialogues(&read_to_string(&a.input)?);
    for e in &bad {
        log::warn!("skipping {e}");
    }
    let (kept, mut report) = corpus::filter_examples(&examples, &index);
    report.malformed = bad.len();
    corpus::write_dialogues(&a.out, &kept)?;
    write_atomic_str(&a.report, &report.to_tsv())?;
    Ok(format!("accepted\t{}\ntotal\t{}\n", report.accepted, report.total()))
}

/// File values, then the explicit flags.
pub fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c = if a.smoke { TrainConfig::smoke() } else { TrainConfig::default() };
    let file = a.config.clone().or_else(|| a.resume.as_ref().map(|d| d.join(CONFIG_FILE)));
    if let Some(path) = file {
        c.apply_text(&read_to_string(&path)?)?;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.max_steps {
        c.max_steps = v;
    }
    if let Some(v) = a.lambda {
        c.lambda = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.base_lr = v;
    }
    if let Some(v) = a.validate_every {
        c.validate_every = v;
    }
    c.disable_z_alpha |= a.disable_z_alpha;
    c.disable_mi |= a.disable_mi;
    c.squeeze_posterior |= a.squeeze_posterior;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v.trim())?;
    }
    c.validate()?;
    Ok(c)
}

pub fn train(a: &TrainArgs) -> CliResult<String> {
    let config = train_config(a)?;
    let index = InvertedIndex::load(&a.kb)?;
    let all = corpus::load_benchmark(&a.train)?;
    let (train, valid) = match &a.valid {
        Some(p) => (all, corpus::load_benchmark(p)?),
        None if config.validate_every == 0 => (all, Vec::new()),
        None => corpus::split_train_valid(&all, a.valid_fraction, config.seed)?,
    };
    let outcome = match &a.resume {
        Some(dir) => Trainer::resume(dir, config, &train, &index)?.run(&valid, &a.out)?,
        None => trainer::train(config, &train, &valid, &index, &a.out)?,
    };
    let best = outcome.state.best_f1;
    let mut s = format!("steps\t{}\nbest_dir\t{}\n", outcome.state.step, outcome.best_dir.display());
    if best.is_finite() {
        s.push_str(&format!("best_f1\t{best:.6}\n"));
    }
    Ok(s)
}

/// A checkpoint with the settings it was trained under.
pub struct Loaded {
    pub model: Model,
    pub config: TrainConfig,
    pub index: InvertedIndex,
}

impl Loaded {
    pub fn open(a: &DecodeArgs) -> CliResult<Self> {
        let model = Model::load(&a.checkpoint)?;
        let path = a.checkpoint.join(CONFIG_FILE);
        let mut config = if path.exists() {
            TrainConfig::from_text(&read_to_string(&path)?)?
        } else {
            TrainConfig {
                net: model.config().clone(),
                ..TrainConfig::default()
            }
        };
        if let Some(k) = a.topk {
            config.l = k;
        }
        if let Some(b) = a.beam {
            config.beam = b;
        }
        config.validate()?;
        let index = InvertedIndex::load(&a.kb)?;
        Ok(Self { model, config, index })
    }

    pub fn alpha_mode(&self, alpha: Option<f64>) -> CliResult<AlphaMode> {
        match alpha {
            Some(a) if !(0.0..=1.0).contains(&a) => Err(usage(format!("alpha must lie in [0, 1], got {a}"))),
            Some(_) if self.config.disable_z_alpha => Err(usage("this checkpoint was trained without a grounding rate")),
            Some(a) => Ok(AlphaMode::Fixed(a)),
            None => Ok(self.config.alpha_mode()),
        }
    }
}

fn load_hypotheses(path: &Path, n: usize) -> CliResult<Vec<String>> {
    let text = read_to_string(path)?;
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    if lines.len() != n {
        return Err(usage(format!(
            "{} has {} lines but the test set has {n} examples",
            path.display(),
            lines.len()
        )));
    }
    Ok(lines)
}

/// Negative log-likelihood of the reference under the test-time packing.
fn reference_nll(m: &Loaded, ctx: &[Vec<u32>], cands: &[Vec<u32>], response: &[u32], alpha: AlphaMode) -> CliResult<(f64, usize)> {
    let (nets, p) = (&m.model.nets, &m.model.params);
    let packed = match decode::pack_for_scoring(nets, p, ctx, cands, response, alpha) {
        Ok(x) => x,
        Err(Error::Contract(_)) if !ctx.iter().all(Vec::is_empty) => {
            let bucket = match alpha {
                AlphaMode::Off => None,
                AlphaMode::Fixed(a) => Some(alpha_bucket(a)),
                AlphaMode::Predict => Some(0),
            };
            let cfg = &nets.config;
            let mut x = pack_input(ctx, &[], None, bucket, cfg.max_input_len, cfg.max_output_len)?;
            for &t in &response[..response.len().min(cfg.max_output_len)] {
                x.push_response(t);
            }
            x.push_response(SEP);
            x
        }
        Err(Error::Contract(msg)) => {
            log::warn!("example not scored: {msg}");
            return Ok((0.0, 0));
        }
        Err(e) => return Err(e.into()),
    };
    Ok(m.model.response_nll(&packed)?)
}

pub fn eval(a: &EvalArgs) -> CliResult<String> {
    let m = Loaded::open(&a.decode)?;
    let alpha = m.alpha_mode(a.alpha)?;
    let test = corpus::load_benchmark(&a.test)?;
    if test.is_empty() {
        return Err(usage("test set is empty"));
    }
    let given = match &a.hypotheses {
        Some(p) => Some(load_hypotheses(p, test.len())?),
        None => None,
    };
    let v = &m.model.vocab;
    let decode = m.config.decode_config();
    let mut hyps = Vec::with_capacity(test.len());
    let mut nll = Vec::with_capacity(test.len());
    for (i, ex) in test.iter().enumerate() {
        let ctx: Vec<Vec<u32>> = ex.context.iter().map(|u| v.encode_text(u)).collect();
        let cands: Vec<Vec<u32>> = candidates_for(ex, &m.index, m.config.l)
            .iter()
            .map(|k| v.encode_text(k))
            .collect();
        let hyp = match &given {
            Some(h) => h[i].clone(),
            None => match decode::generate_ids(&m.model.nets, &m.model.params, v, &ctx, &cands, alpha, None, &decode) {
                Ok(g) => g.text,
                Err(Error::Contract(msg)) => {
                    log::warn!("example {i} decoded as empty: {msg}");
                    String::new()
                }
                Err(e) => return Err(e.into()),
            },
        };
        hyps.push(hyp);
        nll.push(reference_nll(&m, &ctx, &cands, &v.encode_text(&ex.response), alpha)?);
    }
    let refs: Vec<&str> = test.iter().map(|e| e.response.as_str()).collect();
    let report = MetricReport::build(&hyps, &refs, &nll)?;
    emit(a.out.as_deref(), report.to_tsv())
}

/// Writes `text` to `path` and returns an empty summary, or returns `text`.
fn emit(path: Option<&Path>, text: String) -> CliResult<String> {
    match path {
        Some(p) => {
            write_atomic_str(p, &text)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

/// Candidates with the gold sentence guaranteed present.
pub fn sweep_item(ex: &DialogueExample, index: &InvertedIndex, l: usize) -> SweepItem {
    let mut candidates = candidates_for(ex, index, l);
    let gold = ex.gold().map(|g| match candidates.iter().position(|c| c == g) {
        Some(i) => i,
        None => {
            candidates.push(g.to_string());
            candidates.len() - 1
        }
    });
    SweepItem {
        context: ex.context.clone(),
        candidates,
        gold,
    }
}

pub fn sweep_alpha(a: &SweepArgs) -> CliResult<String> {
    let m = Loaded::open(&a.decode)?;
    if m.config.disable_z_alpha {
        return Err(usage("this checkpoint was trained without a grounding rate"));
    }
    let mut test = corpus::load_benchmark(&a.test)?;
    if let Some(n) = a.limit {
        test.truncate(n);
    }
    let items: Vec<SweepItem> = test.iter().map(|ex| sweep_item(ex, &m.index, m.config.l)).collect();
    let alphas = a.alphas.clone().unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
    if let Some(bad) = alphas.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(usage(format!("alpha must lie in [0, 1], got {bad}")));
    }
    let sweep = decode::sweep_alpha(&m.model, &items, &alphas, &m.config.decode_config())?;
    emit(a.out.as_deref(), sweep.to_tsv())
}

pub fn write_synth(a: &SynthArgs) -> CliResult<String> {
    let c = synth::generate(&SynthConfig {
        dialogues: a.dialogues,
        candidates: a.candidates,
        seed: a.seed,
    });
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut kb = c.knowledge.join("\n");
    kb.push('\n');
    write_atomic_str(&a.out.join("knowledge.txt"), &kb)?;
    corpus::write_dialogues(&a.out.join("dialogues.jsonl"), &c.dialogues)?;
    Ok(format!("knowledge\t{}\ndialogues\t{}\n", c.knowledge.len(), c.dialogues.len()))
}
