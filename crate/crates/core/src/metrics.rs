//! Similarity and evaluation metrics.
//!
//! `sim` is smoothed sentence BLEU-2 and drives both the corpus filter and the
//! grounding-rate target. F1 uses its own normalization (lowercase, punctuation
//! stripped, whitespace collapsed) and does not drop articles.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::textcore::tokenize;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram count.
fn clipped(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, hyp.len().saturating_sub(n - 1))
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Sentence BLEU-2 of hypothesis `a` against reference `b`.
///
/// A zero match count at order n becomes `1 / (count_n + 1)`; nonzero counts are
/// used as is.
pub fn sim(a: &str, b: &str) -> f64 {
    sim_tokens(&tokenize(a), &tokenize(b))
}

pub fn sim_tokens(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=2 {
        let (m, c) = clipped(hyp, reference, n);
        let p = if m > 0 {
            m as f64 / c as f64
        } else {
            1.0 / (c as f64 + 1.0)
        };
        log_p += p.ln() / 2.0;
    }
    (brevity_penalty(hyp.len(), reference.len()) * log_p.exp()).clamp(0.0, 1.0)
}

fn f1_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn unigram_f1(hypothesis: &str, reference: &str) -> f64 {
    let h = f1_tokens(hypothesis);
    let r = f1_tokens(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let (overlap, _) = clipped(&h, &r, 1);
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / h.len() as f64;
    let rc = overlap as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Corpus BLEU-n for every n in `1..=max_n`, uniform weights.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
    max_n: usize,
) -> Result<BTreeMap<usize, f64>> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::contract(format!(
            "corpus_bleu needs equal non-empty inputs, got {} hypotheses and {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = vec![0usize; max_n + 1];
    let mut totals = vec![0usize; max_n + 1];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h = tokenize(h.as_ref());
        let r = tokenize(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let (m, c) = clipped(&h, &r, n);
            matches[n] += m;
            totals[n] += c;
        }
    }
    let bp = brevity_penalty(hyp_len, ref_len);
    let mut out = BTreeMap::new();
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=max_n {
        if matches[n] == 0 {
            zero = true;
        } else {
            log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        }
        let score = if zero { 0.0 } else { bp * (log_sum / n as f64).exp() };
        out.insert(n, score);
    }
    Ok(out)
}

/// Anything that can report the summed NLL of a gold response.
pub trait ResponseScorer {
    type Input;

    /// (summed negative log-likelihood, number of scored tokens).
    fn response_nll(&self, input: &Self::Input) -> Result<(f64, usize)>;
}

pub fn perplexity<S: ResponseScorer>(scorer: &S, inputs: &[S::Input]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0;
    for input in inputs {
        let (n, c) = scorer.response_nll(input)?;
        nll += n;
        count += c;
    }
    if count == 0 {
        return Err(Error::contract("perplexity over zero response tokens"));
    }
    Ok((nll / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleMetrics {
    pub nll: f64,
    pub tokens: usize,
    pub f1: f64,
    pub bleu: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ppl: f64,
    pub f1: f64,
    pub bleu: BTreeMap<usize, f64>,
    pub examples: Vec<ExampleMetrics>,
}

impl MetricReport {
    /// Aggregates per-example records given the hypothesis/reference pairs.
    /// Examples scored with zero tokens leave `ppl` as NaN.
    pub fn build<H: AsRef<str>, R: AsRef<str>>(
        hyps: &[H],
        refs: &[R],
        nll: &[(f64, usize)],
    ) -> Result<Self> {
        if nll.len() != hyps.len() {
            return Err(Error::contract("one NLL record per example is required"));
        }
        let bleu = corpus_bleu(hyps, refs, 4)?;
        let mut examples = Vec::with_capacity(hyps.len());
        for ((h, r), &(n, t)) in hyps.iter().zip(refs).zip(nll) {
            examples.push(ExampleMetrics {
                nll: n,
                tokens: t,
                f1: unigram_f1(h.as_ref(), r.as_ref()),
                bleu: corpus_bleu(&[h.as_ref()], &[r.as_ref()], 4)?,
            });
        }
        let total_tokens: usize = nll.iter().map(|x| x.1).sum();
        let ppl = if total_tokens == 0 {
            f64::NAN
        } else {
            (nll.iter().map(|x| x.0).sum::<f64>() / total_tokens as f64).exp()
        };
        let f1 = examples.iter().map(|e| e.f1).sum::<f64>() / examples.len() as f64;
        Ok(Self {
            ppl,
            f1,
            bleu,
            examples,
        })
    }

    /// One row per example plus a final `all` row. The `ppl` column holds the
    /// example's own perplexity; summing `nll` and `tokens` reproduces the total.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("example\tppl\tnll\ttokens\tf1\tbleu1\tbleu2\tbleu3\tbleu4\n");
        let mut row = |label: &str, ppl: f64, nll: f64, tokens: usize, f1: f64, b: &BTreeMap<usize, f64>| {
            out.push_str(&format!("{label}\t{ppl:.6}\t{nll:.6}\t{tokens}\t{f1:.6}"));
            for n in 1..=4 {
                out.push_str(&format!("\t{:.6}", b.get(&n).copied().unwrap_or(0.0)));
            }
            out.push('\n');
        };
        for (i, e) in self.examples.iter().enumerate() {
            let ppl = if e.tokens == 0 { f64::NAN } else { (e.nll / e.tokens as f64).exp() };
            row(&i.to_string(), ppl, e.nll, e.tokens, e.f1, &e.bleu);
        }
        let tokens = self.examples.iter().map(|e| e.tokens).sum();
        let nll = self.examples.iter().map(|e| e.nll).sum();
        row("all", self.ppl, nll, tokens, self.f1, &self.bleu);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sim_cases() {
        assert_eq!(sim("the cat sat on the mat", "the cat sat on the mat"), 1.0);
        assert_eq!(sim("", "anything at all"), 0.0);
        // No matches: p1 = 1/4, p2 = 1/3, equal lengths.
        let expect = (0.25f64 * (1.0 / 3.0)).sqrt();
        assert!((sim("a b c", "x y z") - expect).abs() < 1e-15);
        // Two of three unigrams, one of two bigrams; hypothesis longer than reference.
        let expect = ((2.0 / 3.0) * 0.5f64).sqrt();
        assert!((sim("a b c", "a b") - expect).abs() < 1e-15);
        // Brevity: one token against four.
        let expect = (1.0f64 * 1.0).sqrt() * (1.0f64 - 4.0).exp();
        assert!((sim("a", "a b c d") - expect).abs() < 1e-15);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(unigram_f1("the cat sat", "the cat ran"), 2.0 / 3.0);
        assert_eq!(unigram_f1("Hello, World!", "hello world"), 1.0);
        assert_eq!(unigram_f1("a b", "c d"), 0.0);
        assert_eq!(unigram_f1("", ""), 0.0);
    }

    #[test]
    fn bleu_cases() {
        let b = corpus_bleu(&["the cat is here"], &["the cat is here"], 4).unwrap();
        assert!(b.values().all(|&v| (v - 1.0).abs() < 1e-12));
        // hyp "the cat the dog" vs ref "the cat sat down":
        // 1-grams: the(2→1) cat(1) dog(0) → 2/4; 2-grams: "the cat" → 1/3; 3-grams 0/2.
        let b = corpus_bleu(&["the cat the dog"], &["the cat sat down"], 4).unwrap();
        assert!((b[&1] - 0.5).abs() < 1e-12);
        assert!((b[&2] - (0.5f64 * (1.0 / 3.0)).sqrt()).abs() < 1e-12);
        assert_eq!(b[&3], 0.0);
        assert_eq!(b[&4], 0.0);
        let b = corpus_bleu(&["", ""], &["a b", "c"], 4).unwrap();
        assert!(b.values().all(|&v| v == 0.0));
        assert!(corpus_bleu(&["a"], &["a", "b"], 4).is_err());
    }

    struct Uniform(usize);

    impl ResponseScorer for Uniform {
        type Input = usize;
        fn response_nll(&self, n: &usize) -> Result<(f64, usize)> {
            Ok((*n as f64 * (self.0 as f64).ln(), *n))
        }
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        let ppl = perplexity(&Uniform(50), &[3, 7, 1]).unwrap();
        assert!((ppl - 50.0).abs() < 1e-9);
        assert!(perplexity(&Uniform(50), &[0]).is_err());
    }

    #[test]
    fn report_tsv_has_aggregate_row() {
        let r = MetricReport::build(&["a b c"], &["a b c"], &[(0.0, 3)]).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.ppl, 1.0);
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.lines().last().unwrap().starts_with("all\t1.000000"));
    }

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-e]{1,2}|[.,!]", 0..12).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn bounded(a in words(), b in words()) {
            let s = sim(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            let f = unigram_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn self_sim_is_one(a in words()) {
            prop_assume!(tokenize(&a).len() >= 2);
            prop_assert_eq!(sim(&a, &a), 1.0);
        }

        #[test]
        fn bleu_permutation_invariant(pairs in proptest::collection::vec((words(), words()), 1..6)) {
            let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
            let fwd = corpus_bleu(&h, &r, 4).unwrap();
            let hr: Vec<String> = h.iter().rev().cloned().collect();
            let rr: Vec<String> = r.iter().rev().cloned().collect();
            let rev = corpus_bleu(&hr, &rr, 4).unwrap();
            for n in 1..=4 {
                prop_assert!((fwd[&n] - rev[&n]).abs() < 1e-12);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&fwd[&n]));
            }
        }
    }
}
