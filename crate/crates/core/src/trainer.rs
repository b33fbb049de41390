//! The training loop: a gate drawn per mini-batch picks either the selection
//! loss or an E-step followed by an M-step; validation F1 drives checkpoint
//! selection and early stopping.
//!
//! Two ChaCha8 streams carry all randomness. Stream 1 draws only the gate, so
//! the branch sequence for a seed can be replayed without any model work.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::DialogueExample;
use crate::decode::{generate_ids, AlphaMode, DecodeConfig};
use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::io::{parse_key_values, read_to_string, write_atomic_str};
use crate::metrics::unigram_f1;
use crate::nets::{Model, NetConfig, PackedInput};
use crate::objectives::{
    e_step_loss, ks_loss, m_step_loss, mi_loss, q_zk, sample_gumbel, true_posterior, CandidateDistribution,
    EncodedExample, MStepOptions,
};
use crate::tensor::{read_records, write_records, Adam, AdamConfig, GradBuffer, Graph, Precision, Var};
use crate::textcore::Vocab;

pub const LOG_FILE: &str = "train_log.tsv";
pub const VALID_LOG_FILE: &str = "valid_log.tsv";
pub const STATE_FILE: &str = "state.txt";
pub const OPTIM_FILE: &str = "optim.bin";
pub const CONFIG_FILE: &str = "train.txt";
pub const BEST_DIR: &str = "best";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub max_steps: u64,
    pub tau: f64,
    pub l: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup: u64,
    /// Validate every this many steps; 0 disables validation.
    pub validate_every: u64,
    pub n_noise: usize,
    pub seed: u64,
    pub patience: usize,
    pub disable_z_alpha: bool,
    pub disable_mi: bool,
    pub squeeze_posterior: bool,
    /// Soft-decoding steps for the mutual-information term.
    pub mi_steps: usize,
    pub max_grad_norm: f64,
    pub beam: usize,
    pub trigram_block: bool,
    /// Cap on validation examples; 0 uses all.
    pub valid_limit: usize,
    pub vocab_max: usize,
    pub vocab_min_count: usize,
    /// Architecture; `vocab_size` is replaced by the built vocabulary.
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            max_steps: 20_000,
            tau: 0.1,
            l: 10,
            batch_size: 8,
            base_lr: 3e-5,
            warmup: 500,
            validate_every: 500,
            n_noise: 9,
            seed: 0,
            patience: 1,
            disable_z_alpha: false,
            disable_mi: false,
            squeeze_posterior: false,
            mi_steps: 8,
            max_grad_norm: 1.0,
            beam: 5,
            trigram_block: false,
            valid_limit: 0,
            vocab_max: crate::textcore::DEFAULT_VOCAB_SIZE,
            vocab_min_count: 1,
            net: NetConfig::default(),
        }
    }
}

const NET_KEYS: [&str; 6] = ["hidden", "heads", "layers", "max_input_len", "max_output_len", "init_std"];

impl TrainConfig {
    /// Small sizes for the synthetic corpus.
    pub fn smoke() -> Self {
        Self {
            max_steps: 600,
            l: 4,
            batch_size: 4,
            base_lr: 2e-3,
            warmup: 50,
            validate_every: 0,
            n_noise: 2,
            mi_steps: 3,
            beam: 3,
            net: NetConfig {
                hidden: 32,
                heads: 2,
                layers: 2,
                max_input_len: 64,
                max_output_len: 16,
                init_std: 0.05,
                ..NetConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.l == 0 || self.batch_size == 0 {
            return Err(Error::config("l and batch_size must be at least 1"));
        }
        if self.base_lr <= 0.0 || self.max_grad_norm <= 0.0 {
            return Err(Error::config("base_lr and max_grad_norm must be positive"));
        }
        let mut net = self.net.clone();
        net.vocab_size = self.vocab_max;
        net.validate()
    }

    /// Sets one key; the keys are the field names, architecture keys included.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(format!("bad value {v:?} for {k}")))
        }
        fn flag(k: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::config(format!("bad boolean {v:?} for {k}"))),
            }
        }
        match key {
            "lambda" => self.lambda = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "l" => self.l = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "validate_every" => self.validate_every = num(key, value)?,
            "n_noise" => self.n_noise = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "disable_z_alpha" => self.disable_z_alpha = flag(key, value)?,
            "disable_mi" => self.disable_mi = flag(key, value)?,
            "squeeze_posterior" => self.squeeze_posterior = flag(key, value)?,
            "mi_steps" => self.mi_steps = num(key, value)?,
            "max_grad_norm" => self.max_grad_norm = num(key, value)?,
            "beam" => self.beam = num(key, value)?,
            "trigram_block" => self.trigram_block = flag(key, value)?,
            "valid_limit" => self.valid_limit = num(key, value)?,
            "vocab_max" => self.vocab_max = num(key, value)?,
            "vocab_min_count" => self.vocab_min_count = num(key, value)?,
            k if NET_KEYS.contains(&k) => self.net.set(k, value)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let n = &self.net;
        format!(
            "lambda={}\nmax_steps={}\ntau={}\nl={}\nbatch_size={}\nbase_lr={}\nwarmup={}\nvalidate_every={}\n\
             n_noise={}\nseed={}\npatience={}\ndisable_z_alpha={}\ndisable_mi={}\nsqueeze_posterior={}\n\
             mi_steps={}\nmax_grad_norm={}\nbeam={}\ntrigram_block={}\nvalid_limit={}\nvocab_max={}\n\
             vocab_min_count={}\nhidden={}\nheads={}\nlayers={}\nmax_input_len={}\nmax_output_len={}\ninit_std={}\n",
            self.lambda,
            self.max_steps,
            self.tau,
            self.l,
            self.batch_size,
            self.base_lr,
            self.warmup,
            self.validate_every,
            self.n_noise,
            self.seed,
            self.patience,
            self.disable_z_alpha,
            self.disable_mi,
            self.squeeze_posterior,
            self.mi_steps,
            self.max_grad_norm,
            self.beam,
            self.trigram_block,
            self.valid_limit,
            self.vocab_max,
            self.vocab_min_count,
            n.hidden,
            n.heads,
            n.layers,
            n.max_input_len,
            n.max_output_len,
            n.init_std,
        )
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup,
            max_grad_norm: Some(self.max_grad_norm),
            ..AdamConfig::default()
        }
    }

    pub fn alpha_mode(&self) -> AlphaMode {
        if self.disable_z_alpha {
            AlphaMode::Off
        } else {
            AlphaMode::Predict
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            max_len: self.net.max_output_len + 1,
            trigram_block: self.trigram_block,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Ks,
    Em,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Ks => "ks",
            Branch::Em => "em",
        }
    }
}

fn gate_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

fn draw_branch(gate: &mut ChaCha8Rng, lambda: f64) -> Branch {
    if gate.random::<f64>() < lambda {
        Branch::Ks
    } else {
        Branch::Em
    }
}

/// The branch sequence training would follow for `seed`, without training.
pub fn gate_sequence(lambda: f64, steps: u64, seed: u64) -> Vec<Branch> {
    let mut gate = gate_rng(seed);
    (0..steps).map(|_| draw_branch(&mut gate, lambda)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub best_f1: f64,
    pub since_improvement: usize,
    pub rng_word_pos: u128,
    pub gate_word_pos: u128,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            step: 0,
            best_f1: f64::NEG_INFINITY,
            since_improvement: 0,
            rng_word_pos: 0,
            gate_word_pos: 0,
        }
    }
}

impl TrainState {
    pub fn to_text(&self) -> String {
        format!(
            "step={}\nbest_f1={}\nsince_improvement={}\nrng_word_pos={}\ngate_word_pos={}\n",
            self.step, self.best_f1, self.since_improvement, self.rng_word_pos, self.gate_word_pos
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in parse_key_values(text)? {
            let bad = || Error::config(format!("bad state value {v:?} for {k}"));
            match k.as_str() {
                "step" => s.step = v.parse().map_err(|_| bad())?,
                "best_f1" => s.best_f1 = v.parse().map_err(|_| bad())?,
                "since_improvement" => s.since_improvement = v.parse().map_err(|_| bad())?,
                "rng_word_pos" => s.rng_word_pos = v.parse().map_err(|_| bad())?,
                "gate_word_pos" => s.gate_word_pos = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::config(format!("unknown state key {k:?}"))),
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Records `f1`; stops once it has been below the best for `patience`
/// consecutive validations. Returns whether the best improved as well.
pub fn early_stop(state: &mut TrainState, f1: f64, patience: usize) -> (StopDecision, bool) {
    let improved = f1 > state.best_f1;
    if improved {
        state.best_f1 = f1;
        state.since_improvement = 0;
    } else if f1 < state.best_f1 {
        state.since_improvement += 1;
    } else {
        state.since_improvement = 0;
    }
    let stop = if state.since_improvement >= patience.max(1) {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    };
    (stop, improved)
}

/// One logged optimizer step. Loss fields are means over the examples that
/// contributed; `None` marks terms the branch or ablation does not compute.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub branch: Branch,
    pub examples: usize,
    pub ks: Option<f64>,
    pub e_kl: Option<f64>,
    pub nll: Option<f64>,
    pub kl: Option<f64>,
    pub mse: Option<f64>,
    pub mi: Option<f64>,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step\tbranch\texamples\tks\te_kl\tnll\tkl\tmse\tmi\tlr";

impl LogRow {
    pub fn to_tsv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.branch.as_str(),
            self.examples,
            f(self.ks),
            f(self.e_kl),
            f(self.nll),
            f(self.kl),
            f(self.mse),
            f(self.mi),
            self.lr
        )
    }
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, x: f64) {
        self.sum += x;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// A training dialogue with its retrieved candidates `S(R)`, cached once.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub encoded: EncodedExample,
    pub retrieved: HashSet<u32>,
}

/// Retrieves `S(R)` for every dialogue; dialogues whose response retrieves
/// nothing are dropped and counted.
pub fn prepare_examples(
    vocab: &Vocab,
    dialogues: &[DialogueExample],
    index: &InvertedIndex,
    l: usize,
) -> (Vec<TrainExample>, usize) {
    let mut out = Vec::with_capacity(dialogues.len());
    let mut dropped = 0;
    for d in dialogues {
        let s = index.retrieve_topl(&d.response, l);
        if s.is_empty() || d.context.iter().all(|u| vocab.encode_text(u).is_empty()) {
            dropped += 1;
            continue;
        }
        let texts: Vec<String> = s.texts().into_iter().map(str::to_string).collect();
        out.push(TrainExample {
            encoded: EncodedExample::new(vocab, &d.context, &d.response, &texts),
            retrieved: s.ids().into_iter().collect(),
        });
    }
    (out, dropped)
}

/// Vocabulary over the training dialogues and the knowledge corpus.
pub fn build_vocab(config: &TrainConfig, dialogues: &[DialogueExample], index: &InvertedIndex) -> Result<Vocab> {
    let texts = dialogues
        .iter()
        .flat_map(|d| d.context.iter().map(String::as_str).chain(std::iter::once(d.response.as_str())))
        .chain(index.sentences().iter().map(|s| s.text.as_str()));
    Vocab::build(texts, config.vocab_max, config.vocab_min_count)
}

/// The example's own candidates, else the top `l` retrieved by its last context turn.
pub fn candidates_for(ex: &DialogueExample, index: &InvertedIndex, l: usize) -> Vec<String> {
    if !ex.candidate_knowledge.is_empty() {
        return ex.candidate_knowledge.clone();
    }
    let query = ex.context.last().map(String::as_str).unwrap_or_default();
    index.retrieve_topl(query, l).texts().into_iter().map(str::to_string).collect()
}

/// Decodes every example with the test-time pipeline and returns the mean
/// unigram F1. Examples without any candidate knowledge score 0.
pub fn validate(model: &Model, valid: &[DialogueExample], index: &InvertedIndex, config: &TrainConfig) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::contract("validation set is empty"));
    }
    let n = if config.valid_limit == 0 { valid.len() } else { config.valid_limit.min(valid.len()) };
    let v = &model.vocab;
    let decode = config.decode_config();
    let mut total = 0.0;
    for ex in &valid[..n] {
        let cands: Vec<Vec<u32>> = candidates_for(ex, index, config.l).iter().map(|k| v.encode_text(k)).collect();
        let ctx: Vec<Vec<u32>> = ex.context.iter().map(|u| v.encode_text(u)).collect();
        match generate_ids(&model.nets, &model.params, v, &ctx, &cands, config.alpha_mode(), None, &decode) {
            Ok(out) => total += unigram_f1(&out.text, &ex.response),
            Err(Error::Contract(m)) => log::debug!("validation example scored 0: {m}"),
            Err(e) => return Err(e),
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_dir: PathBuf,
    pub log_path: PathBuf,
    pub rows: Vec<LogRow>,
    pub validations: Vec<(u64, f64)>,
    pub state: TrainState,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub state: TrainState,
    adam: Adam,
    index: &'a InvertedIndex,
    data: Vec<TrainExample>,
    rng: ChaCha8Rng,
    gate: ChaCha8Rng,
    /// Dialogues dropped at preparation plus examples skipped during steps.
    pub skipped: usize,
    /// Packed generator inputs of the latest M-step, for inspection.
    pub last_packed: Vec<PackedInput>,
    /// Posteriors used by the latest M-step.
    pub last_q: Vec<CandidateDistribution>,
}

fn is_skip(e: &Error) -> bool {
    matches!(e, Error::Skip(_))
}

impl<'a> Trainer<'a> {
    /// Fresh model and optimizer for `dialogues`.
    pub fn new(config: TrainConfig, dialogues: &[DialogueExample], index: &'a InvertedIndex) -> Result<Self> {
        config.validate()?;
        let vocab = build_vocab(&config, dialogues, index)?;
        let net = NetConfig {
            seed: config.seed,
            ..config.net.clone()
        };
        let model = Model::new(net, vocab)?;
        Self::with_model(config, model, dialogues, index)
    }

    pub fn with_model(
        config: TrainConfig,
        model: Model,
        dialogues: &[DialogueExample],
        index: &'a InvertedIndex,
    ) -> Result<Self> {
        config.validate()?;
        let (data, dropped) = prepare_examples(&model.vocab, dialogues, index, config.l);
        if data.is_empty() {
            return Err(Error::config("empty filtered training set"));
        }
        if dropped > 0 {
            log::warn!("{dropped} dialogues retrieved no knowledge and were dropped");
        }
        let adam = Adam::new(config.adam(), &model.params);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            gate: gate_rng(config.seed),
            config,
            model,
            state: TrainState::default(),
            adam,
            index,
            data,
            skipped: dropped,
            last_packed: Vec::new(),
            last_q: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(dir: &Path, config: TrainConfig, dialogues: &[DialogueExample], index: &'a InvertedIndex) -> Result<Self> {
        let model = Model::load(dir)?;
        let mut t = Self::with_model(config, model, dialogues, index)?;
        let (_, records) = read_records(&dir.join(OPTIM_FILE))?;
        t.adam.load_records(&t.model.params, records)?;
        t.state = TrainState::from_text(&read_to_string(&dir.join(STATE_FILE))?)?;
        t.rng.set_word_pos(t.state.rng_word_pos);
        t.gate.set_word_pos(t.state.gate_word_pos);
        Ok(t)
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.state.rng_word_pos = self.rng.get_word_pos();
        self.state.gate_word_pos = self.gate.get_word_pos();
        self.model.save(dir)?;
        write_records(&dir.join(OPTIM_FILE), &self.adam.to_records(&self.model.params), Precision::F64)?;
        write_atomic_str(&dir.join(STATE_FILE), &self.state.to_text())?;
        write_atomic_str(&dir.join(CONFIG_FILE), &self.config.to_text())
    }

    pub fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn batch(&mut self) -> Vec<usize> {
        let n = self.data.len();
        (0..self.config.batch_size).map(|_| self.rng.random_range(0..n)).collect()
    }

    fn noise(&mut self, n: usize, exclude: &HashSet<u32>) -> Result<Vec<Vec<u32>>> {
        let n = n.min(self.index.len().saturating_sub(exclude.len()));
        let picked = self.index.sample_noise(n, &mut self.rng, exclude)?;
        Ok(picked.iter().map(|s| self.model.vocab.encode_text(&s.text)).collect())
    }

    /// One gated optimizer step.
    pub fn step(&mut self) -> Result<LogRow> {
        if self.state.step >= self.config.max_steps {
            return Err(Error::contract("step budget exhausted"));
        }
        let branch = draw_branch(&mut self.gate, self.config.lambda);
        let batch = self.batch();
        let row = match branch {
            Branch::Ks => self.ks_step(&batch)?,
            Branch::Em => self.em_step(&batch)?,
        };
        self.state.step += 1;
        self.state.rng_word_pos = self.rng.get_word_pos();
        self.state.gate_word_pos = self.gate.get_word_pos();
        Ok(row)
    }

    fn finish(&mut self, grads: &GradBuffer, advance: bool) -> Result<f64> {
        if grads.is_empty() {
            let lr = self.adam.effective_lr();
            if advance {
                self.adam.advance();
            }
            return Ok(lr);
        }
        if advance {
            self.adam.step(&mut self.model.params, grads)
        } else {
            self.adam.apply(&mut self.model.params, grads)
        }
    }

    fn ks_step(&mut self, batch: &[usize]) -> Result<LogRow> {
        let mut grads = GradBuffer::new(&self.model.params);
        let mut ks = Mean::default();
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let ex = &self.data[i];
            let Some(pos) = ex.encoded.best_sim() else { continue };
            let exclude = ex.retrieved.clone();
            let neg = match self.noise(1, &exclude)?.pop() {
                Some(n) if !n.is_empty() => n,
                _ => {
                    self.skipped += 1;
                    continue;
                }
            };
            let ex = &self.data[i].encoded;
            let g = Graph::new();
            let loss = ks_loss(&g, &self.model.nets, &self.model.params, &ex.context, &ex.candidates[pos], &neg)?;
            ks.add(loss.item());
            g.backward(loss)?.accumulate_into(&mut grads, scale);
        }
        let lr = self.finish(&grads, true)?;
        Ok(LogRow {
            step: self.state.step + 1,
            branch: Branch::Ks,
            examples: ks.n,
            ks: ks.get(),
            e_kl: None,
            nll: None,
            kl: None,
            mse: None,
            mi: None,
            lr,
        })
    }

    fn em_step(&mut self, batch: &[usize]) -> Result<LogRow> {
        let scale = 1.0 / batch.len() as f64;
        let mut e_kl = Mean::default();
        if !self.config.squeeze_posterior {
            let mut grads = GradBuffer::new(&self.model.params);
            for &i in batch {
                let ex = &self.data[i].encoded;
                let (nets, p) = (&self.model.nets, &self.model.params);
                let target = match true_posterior(nets, p, ex) {
                    Ok(t) => t,
                    Err(e) if is_skip(&e) => {
                        self.skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let g = Graph::new();
                let loss = e_step_loss(&g, nets, p, ex, &target)?;
                e_kl.add(loss.item());
                g.backward(loss)?.accumulate_into(&mut grads, scale);
            }
            self.finish(&grads, false)?;
        }

        let mut grads = GradBuffer::new(&self.model.params);
        let (mut nll, mut kl, mut mse, mut mi) = (Mean::default(), Mean::default(), Mean::default(), Mean::default());
        let opts = MStepOptions {
            disable_z_alpha: self.config.disable_z_alpha,
        };
        let use_mi = !self.config.disable_mi && !self.config.disable_z_alpha;
        self.last_packed.clear();
        self.last_q.clear();
        for &i in batch {
            let q = if self.config.squeeze_posterior {
                let Some(best) = self.data[i].encoded.best_sim() else { continue };
                CandidateDistribution::one_hot(self.data[i].encoded.candidates.len(), best)
            } else {
                match q_zk(&self.model.nets, &self.model.params, &self.data[i].encoded) {
                    Ok(q) => q,
                    Err(e) if is_skip(&e) => {
                        self.skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            };
            let chosen = q.sample(&mut self.rng);
            let exclude = self.data[i].retrieved.clone();
            let noise = self.noise(self.config.n_noise, &exclude)?;
            let ex = &self.data[i].encoded;
            let (nets, p) = (&self.model.nets, &self.model.params);
            let g = Graph::new();
            let (terms, packed) = m_step_loss(&g, nets, p, ex, &q, chosen, &noise, opts)?;
            nll.add(terms.nll.item());
            kl.add(terms.kl.item());
            if let Some(m) = terms.mse {
                mse.add(m.item());
            }
            let mut total: Var<'_> = terms.total;
            if use_mi {
                let rng = &mut self.rng;
                let term = mi_loss(
                    &g,
                    nets,
                    p,
                    &packed.prefix(),
                    ex.sims[chosen],
                    self.config.mi_steps,
                    self.config.tau,
                    |v| sample_gumbel(rng, v),
                )?;
                mi.add(term.item());
                total = total.add(term)?;
            }
            g.backward(total)?.accumulate_into(&mut grads, scale);
            self.last_packed.push(packed);
            self.last_q.push(q);
        }
        let lr = self.finish(&grads, true)?;
        Ok(LogRow {
            step: self.state.step + 1,
            branch: Branch::Em,
            examples: nll.n,
            ks: None,
            e_kl: e_kl.get(),
            nll: nll.get(),
            kl: kl.get(),
            mse: mse.get(),
            mi: mi.get(),
            lr,
        })
    }

    pub fn validate(&self, valid: &[DialogueExample]) -> Result<f64> {
        validate(&self.model, valid, self.index, &self.config)
    }

    /// Trains to `max_steps` or early stop, writing logs and checkpoints under
    /// `out_dir`. Without validation the final weights become "best".
    pub fn run(&mut self, valid: &[DialogueExample], out_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(LOG_FILE);
        let best_dir = out_dir.join(BEST_DIR);
        let mut log = format!("{LOG_HEADER}\n");
        let mut vlog = String::from("step\tf1\n");
        let mut rows = Vec::new();
        let mut validations = Vec::new();
        let mut saved_best = false;
        while self.state.step < self.config.max_steps {
            let row = self.step()?;
            let _ = writeln!(log, "{}", row.to_tsv());
            rows.push(row);
            let every = self.config.validate_every;
            if every > 0 && self.state.step.is_multiple_of(every) && !valid.is_empty() {
                let f1 = self.validate(valid)?;
                validations.push((self.state.step, f1));
                let _ = writeln!(vlog, "{}\t{f1}", self.state.step);
                let (decision, improved) = early_stop(&mut self.state, f1, self.config.patience);
                log::info!("step {} validation F1 {f1:.4}", self.state.step);
                self.save(&out_dir.join(format!("step-{}", self.state.step)))?;
                if improved {
                    self.save(&best_dir)?;
                    saved_best = true;
                }
                write_atomic_str(&log_path, &log)?;
                write_atomic_str(&out_dir.join(VALID_LOG_FILE), &vlog)?;
                if decision == StopDecision::Stop {
                    log::info!("early stop at step {}", self.state.step);
                    break;
                }
            }
        }
        if !saved_best {
            self.save(&best_dir)?;
        }
        write_atomic_str(&log_path, &log)?;
        write_atomic_str(&out_dir.join(VALID_LOG_FILE), &vlog)?;
        Ok(TrainOutcome {
            best_dir,
            log_path,
            rows,
            validations,
            state: self.state.clone(),
        })
    }
}

/// Builds a model for `train`, runs the loop and returns the outcome.
pub fn train(
    config: TrainConfig,
    train: &[DialogueExample],
    valid: &[DialogueExample],
    index: &InvertedIndex,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config, train, index)?;
    t.run(valid, out_dir)
}
