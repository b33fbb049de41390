//! Test-time generation: rank candidate knowledge, pack, fix or predict the
//! grounding rate, and beam-search a response.
//!
//! Responses end with `[SEP]`, the same token that closes the response block
//! during training.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::metrics::sim;
use crate::nets::{pack_input, EncoderInput, Model, Nets, PackedInput};
use crate::objectives::selector_logits;
use crate::tensor::{log_sum_exp, Graph, ParamStore};
use crate::textcore::{alpha_bucket, Vocab, SEP};

/// How the grounding-rate token is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    /// Use the predictor on the packed knowledge.
    Predict,
    Fixed(f64),
    /// No grounding-rate token (models trained without it).
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Maximum response tokens, the closing `[SEP]` included.
    pub max_len: usize,
    pub trigram_block: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            max_len: 32,
            trigram_block: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    /// Selector probability per input candidate.
    pub probs: Vec<f64>,
    pub packed: PackedInput,
    pub alpha: Option<f64>,
}

impl Ranked {
    pub fn bucket(&self) -> Option<usize> {
        self.packed.alpha_bucket
    }
}

/// Stable descending order of `probs`.
pub fn rank_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order
}

/// Ranks `candidates` by selector probability and packs them. With `pinned`,
/// that candidate goes first regardless of its score.
pub fn rank_and_pack(
    nets: &Nets,
    p: &ParamStore,
    context: &[Vec<u32>],
    candidates: &[Vec<u32>],
    alpha: AlphaMode,
    pinned: Option<usize>,
) -> Result<Ranked> {
    if candidates.iter().all(Vec::is_empty) {
        return Err(Error::contract("no non-empty knowledge candidates to rank"));
    }
    let s = selector_logits(&Graph::inference(), nets, p, context, candidates)?.value();
    let probs: Vec<f64> = s.data().iter().map(|&x| crate::tensor::sigmoid(x)).collect();
    let mut order = rank_order(&probs);
    if let Some(first) = pinned {
        order.retain(|&i| i != first);
        order.insert(0, first);
    }
    let ranked: Vec<Vec<u32>> = order.iter().map(|&i| candidates[i].clone()).collect();
    let (max_len, max_out) = (nets.config.max_input_len, nets.config.max_output_len);
    let pack = |bucket| pack_input(context, &ranked, None, bucket, max_len, max_out);
    let (packed, alpha) = match alpha {
        AlphaMode::Off => (pack(None)?, None),
        AlphaMode::Fixed(a) => (pack(Some(alpha_bucket(a)))?, Some(a)),
        AlphaMode::Predict => {
            let probe = pack(None)?;
            let knowledge: Vec<&[u32]> = probe.knowledge.iter().map(|&i| ranked[i].as_slice()).collect();
            let enc = EncoderInput::context_knowledge(context, &knowledge, max_len);
            let a = nets.alpha_predict(&Graph::inference(), p, &enc)?.item();
            (pack(Some(alpha_bucket(a)))?, Some(a))
        }
    };
    let packed = PackedInput {
        knowledge: packed.knowledge.iter().map(|&i| order[i]).collect(),
        ..packed
    };
    Ok(Ranked {
        order,
        probs,
        packed,
        alpha,
    })
}

/// The test-time packed input with `response` appended, for scoring.
pub fn pack_for_scoring(
    nets: &Nets,
    p: &ParamStore,
    context: &[Vec<u32>],
    candidates: &[Vec<u32>],
    response: &[u32],
    alpha: AlphaMode,
) -> Result<PackedInput> {
    let mut packed = rank_and_pack(nets, p, context, candidates, alpha, None)?.packed;
    for &t in &response[..response.len().min(nets.config.max_output_len)] {
        packed.push_response(t);
    }
    packed.push_response(SEP);
    Ok(packed)
}

/// Next-token log-probabilities given the response so far.
pub trait NextToken {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, response: &[u32]) -> Result<Vec<f64>>;
}

/// The generator conditioned on one packed prefix.
pub struct GeneratorStep<'a> {
    pub nets: &'a Nets,
    pub params: &'a ParamStore,
    pub prefix: PackedInput,
}

impl NextToken for GeneratorStep<'_> {
    fn vocab_size(&self) -> usize {
        self.nets.config.vocab_size
    }

    fn next_log_probs(&self, response: &[u32]) -> Result<Vec<f64>> {
        let mut input = self.prefix.clone();
        for &t in response {
            input.push_response(t);
        }
        let logits = self
            .nets
            .next_logits(&Graph::inference(), self.params, &input)?
            .value();
        let z = log_sum_exp(logits.data());
        Ok(logits.data().iter().map(|l| l - z).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Average log-probability per token.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    /// Tokens without the terminal `[SEP]`.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&SEP) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn repeats_trigram(tokens: &[u32], next: u32) -> bool {
    if tokens.len() < 2 {
        return false;
    }
    let n = tokens.len();
    let new = [tokens[n - 2], tokens[n - 1], next];
    tokens.windows(3).any(|w| w == new)
}

/// Length-normalized beam search. Each step keeps the `beam` expansions with
/// the best average log-probability; those ending in `[SEP]` retire. Search
/// stops when no beam survives or `max_len` tokens were produced, and the best
/// average among retired and surviving hypotheses wins.
pub fn beam_search<M: NextToken>(model: &M, config: &DecodeConfig) -> Result<BeamHypothesis> {
    let beam = config.beam.max(1);
    let mut alive = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..config.max_len {
        let mut expansions: Vec<BeamHypothesis> = Vec::with_capacity(alive.len() * beam);
        for h in &alive {
            let lp = model.next_log_probs(&h.tokens)?;
            let mut ids: Vec<usize> = (0..lp.len()).collect();
            ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            let mut taken = 0;
            for id in ids {
                if taken == beam {
                    break;
                }
                let id32 = id as u32;
                if config.trigram_block && repeats_trigram(&h.tokens, id32) {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(id32);
                expansions.push(BeamHypothesis {
                    tokens,
                    log_prob: h.log_prob + lp[id],
                    finished: id32 == SEP,
                });
                taken += 1;
            }
        }
        expansions.sort_by(|a, b| b.score().total_cmp(&a.score()).then(a.tokens.cmp(&b.tokens)));
        expansions.truncate(beam);
        alive.clear();
        for h in expansions {
            if h.finished {
                done.push(h);
            } else {
                alive.push(h);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    done.extend(alive);
    done.into_iter()
        .max_by(|a, b| a.score().total_cmp(&b.score()).then(b.tokens.cmp(&a.tokens)))
        .ok_or_else(|| Error::contract("beam search produced no hypothesis"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<u32>,
    pub ranked: Ranked,
}

/// Full pipeline on raw text.
pub fn generate<S: AsRef<str>>(
    model: &Model,
    context: &[S],
    candidates: &[S],
    alpha: AlphaMode,
    config: &DecodeConfig,
) -> Result<Generation> {
    let ctx: Vec<Vec<u32>> = context.iter().map(|u| model.vocab.encode_text(u.as_ref())).collect();
    let cands: Vec<Vec<u32>> = candidates.iter().map(|k| model.vocab.encode_text(k.as_ref())).collect();
    generate_ids(&model.nets, &model.params, &model.vocab, &ctx, &cands, alpha, None, config)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_ids(
    nets: &Nets,
    p: &ParamStore,
    vocab: &Vocab,
    context: &[Vec<u32>],
    candidates: &[Vec<u32>],
    alpha: AlphaMode,
    pinned: Option<usize>,
    config: &DecodeConfig,
) -> Result<Generation> {
    let ranked = rank_and_pack(nets, p, context, candidates, alpha, pinned)?;
    let step = GeneratorStep {
        nets,
        params: p,
        prefix: ranked.packed.clone(),
    };
    let cfg = DecodeConfig {
        max_len: config.max_len.min(nets.config.max_output_len + 1),
        ..*config
    };
    let best = beam_search(&step, &cfg)?;
    let tokens = best.content().to_vec();
    Ok(Generation {
        text: vocab.decode_text(&tokens),
        tokens,
        ranked,
    })
}

pub const DEFAULT_ALPHAS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub mean_sim: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// Examples skipped for lacking gold knowledge.
    pub skipped: usize,
}

impl Sweep {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("alpha\tmean_sim\tn_examples\n");
        for r in &self.rows {
            out.push_str(&format!("{:.1}\t{:.6}\t{}\n", r.alpha, r.mean_sim, r.n_examples));
        }
        out
    }
}

/// One sweep example: context, candidates and the index of the gold sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepItem {
    pub context: Vec<String>,
    pub candidates: Vec<String>,
    pub gold: Option<usize>,
}

/// Mean `Sim(generated, gold)` per fixed grounding rate, gold packed first.
pub fn sweep_alpha(model: &Model, items: &[SweepItem], alphas: &[f64], config: &DecodeConfig) -> Result<Sweep> {
    let mut skipped = 0;
    let mut usable = Vec::new();
    for it in items {
        match it.gold {
            Some(g) if g < it.candidates.len() => usable.push((it, g)),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("sweep skipped {skipped} examples without gold knowledge");
    }
    let v = &model.vocab;
    let mut rows = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let mut total = 0.0;
        for (it, g) in &usable {
            let ctx: Vec<Vec<u32>> = it.context.iter().map(|u| v.encode_text(u)).collect();
            let cands: Vec<Vec<u32>> = it.candidates.iter().map(|k| v.encode_text(k)).collect();
            let out = generate_ids(&model.nets, &model.params, v, &ctx, &cands, AlphaMode::Fixed(a), Some(*g), config)?;
            total += sim(&out.text, &it.candidates[*g]);
        }
        rows.push(SweepRow {
            alpha: a,
            mean_sim: if usable.is_empty() { 0.0 } else { total / usable.len() as f64 },
            n_examples: usable.len(),
        });
    }
    Ok(Sweep { rows, skipped })
}

/// Fraction of distinct tokens, used to spot degenerate repetition.
pub fn distinct_ratio(tokens: &[u32]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    tokens.iter().collect::<HashSet<_>>().len() as f64 / tokens.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use proptest::prelude::*;

    /// First-order Markov toy: log-probs depend on the previous token only.
    struct Markov {
        table: Vec<Vec<f64>>,
    }

    impl Markov {
        fn new(logits: Vec<Vec<f64>>) -> Self {
            let table = logits
                .into_iter()
                .map(|row| {
                    let z = log_sum_exp(&row);
                    row.iter().map(|x| x - z).collect()
                })
                .collect();
            Self { table }
        }
    }

    impl NextToken for Markov {
        fn vocab_size(&self) -> usize {
            self.table[0].len()
        }

        fn next_log_probs(&self, response: &[u32]) -> Result<Vec<f64>> {
            let state = response.last().map_or(0, |&t| t as usize + 1);
            Ok(self.table[state].clone())
        }
    }

    /// Tokens: 0, 1 and SEP (= 2).
    fn toy(seed: u64) -> Markov {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Markov::new((0..4).map(|_| (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).collect())
    }

    fn exhaustive(m: &Markov, max_len: usize) -> f64 {
        fn go(m: &Markov, prefix: &mut Vec<u32>, lp: f64, max_len: usize, best: &mut f64) {
            let next = m.next_log_probs(prefix).unwrap();
            for t in 0..3u32 {
                prefix.push(t);
                let l = lp + next[t as usize];
                if t == SEP || prefix.len() == max_len {
                    *best = best.max(l / prefix.len() as f64);
                } else {
                    go(m, prefix, l, max_len, best);
                }
                prefix.pop();
            }
        }
        let mut best = f64::NEG_INFINITY;
        go(m, &mut Vec::new(), 0.0, max_len, &mut best);
        best
    }

    #[test]
    fn hand_set_toy_matches_exhaustive() {
        let m = Markov::new(vec![
            vec![0.0, 1.0, -2.0],
            vec![2.0, -1.0, 0.5],
            vec![-1.0, 0.0, 1.5],
            vec![0.0, 0.0, 0.0],
        ]);
        let cfg = DecodeConfig { beam: 5, max_len: 4, trigram_block: false };
        let best = beam_search(&m, &cfg).unwrap();
        assert!((best.score() - exhaustive(&m, 4)).abs() < 1e-12);
    }

    #[test]
    fn random_toys_match_exhaustive() {
        let cfg = DecodeConfig { beam: 5, max_len: 4, trigram_block: false };
        let mut agree = 0;
        for seed in 0..50 {
            let m = toy(seed);
            let b = beam_search(&m, &cfg).unwrap();
            if (b.score() - exhaustive(&m, 4)).abs() < 1e-12 {
                agree += 1;
            }
        }
        assert_eq!(agree, 50);
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..20 {
            let m = toy(seed);
            let b = beam_search(&m, &DecodeConfig { beam: 1, max_len: 6, trigram_block: false }).unwrap();
            let mut greedy = Vec::new();
            let mut lp = 0.0;
            for _ in 0..6 {
                let next = m.next_log_probs(&greedy).unwrap();
                let t = crate::objectives::argmax(&next) as u32;
                greedy.push(t);
                lp += next[t as usize];
                if t == SEP {
                    break;
                }
            }
            assert_eq!(b.tokens, greedy);
            assert!((b.log_prob - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn trigram_blocking() {
        assert!(repeats_trigram(&[1, 2, 3, 1, 2], 3));
        assert!(!repeats_trigram(&[1, 2, 3, 1, 2], 4));
        let m = Markov::new(vec![vec![5.0, 0.0, -9.0]; 4]);
        let b = beam_search(&m, &DecodeConfig { beam: 1, max_len: 6, trigram_block: true }).unwrap();
        for w in b.tokens.windows(3).collect::<Vec<_>>().iter().enumerate() {
            let (i, w) = w;
            assert!(!b.tokens.windows(3).skip(i + 1).any(|x| x == *w));
        }
    }

    fn tiny_model() -> (Nets, ParamStore) {
        Nets::init(NetConfig {
            vocab_size: 30,
            hidden: 16,
            heads: 2,
            layers: 1,
            max_input_len: 48,
            max_output_len: 6,
            init_std: 0.3,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn ranking_follows_selector() {
        let (nets, p) = tiny_model();
        let ctx = vec![vec![16, 17]];
        let cands = vec![vec![20, 21], vec![22], vec![23, 24, 25], vec![26]];
        let r = rank_and_pack(&nets, &p, &ctx, &cands, AlphaMode::Fixed(0.7), None).unwrap();
        let s = selector_logits(&Graph::inference(), &nets, &p, &ctx, &cands).unwrap().value();
        let mut expect: Vec<usize> = (0..4).collect();
        expect.sort_by(|&a, &b| s.data()[b].partial_cmp(&s.data()[a]).unwrap());
        assert_eq!(r.order, expect);
        assert_eq!(r.bucket(), Some(7));
        assert_eq!(r.packed.knowledge[0], expect[0]);
        let one = rank_and_pack(&nets, &p, &ctx, &cands[1..2], AlphaMode::Predict, None).unwrap();
        assert_eq!(one.packed.knowledge, vec![0]);
        assert!(one.alpha.unwrap() > 0.0 && one.alpha.unwrap() < 1.0);
        let pinned = rank_and_pack(&nets, &p, &ctx, &cands, AlphaMode::Off, Some(expect[3])).unwrap();
        assert_eq!(pinned.order[0], expect[3]);
        assert!(!pinned.packed.has_alpha_token());
        assert!(rank_and_pack(&nets, &p, &ctx, &[vec![]], AlphaMode::Off, None).is_err());
    }

    #[test]
    fn stable_ties() {
        assert_eq!(rank_order(&[0.9, 0.1]), vec![0, 1]);
        assert_eq!(rank_order(&[0.5, 0.9, 0.5]), vec![1, 0, 2]);
    }

    #[test]
    fn generator_decoding_is_deterministic() {
        let (nets, p) = tiny_model();
        let prefix = pack_input(&[vec![16]], &[vec![20]], None, Some(3), 48, 6).unwrap();
        let step = GeneratorStep { nets: &nets, params: &p, prefix };
        let cfg = DecodeConfig { beam: 3, max_len: 7, trigram_block: false };
        let a = beam_search(&step, &cfg).unwrap();
        assert_eq!(a, beam_search(&step, &cfg).unwrap());
        assert!(a.tokens.len() <= 7);
    }

    #[test]
    fn wider_beams_never_score_lower_on_toys() {
        let mut worse = 0;
        for seed in 0..300 {
            let m = toy(seed);
            let mut prev = f64::NEG_INFINITY;
            for beam in 1..6 {
                let s = beam_search(&m, &DecodeConfig { beam, max_len: 6, trigram_block: false }).unwrap().score();
                if s < prev - 1e-12 {
                    worse += 1;
                }
                prev = prev.max(s);
            }
        }
        assert_eq!(worse, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn hypothesis_log_prob_is_a_sum_of_steps(seed in 0u64..10_000, beam in 1usize..6) {
            let m = toy(seed);
            let b = beam_search(&m, &DecodeConfig { beam, max_len: 5, trigram_block: false }).unwrap();
            let mut lp = 0.0;
            for i in 0..b.tokens.len() {
                let step = m.next_log_probs(&b.tokens[..i]).unwrap()[b.tokens[i] as usize];
                prop_assert!(step <= 0.0);
                lp += step;
            }
            prop_assert!((lp - b.log_prob).abs() < 1e-12);
            prop_assert!(!b.finished || *b.tokens.last().unwrap() == SEP);
        }
    }
}
