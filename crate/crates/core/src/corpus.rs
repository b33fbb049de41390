//! Knowledge and dialogue corpora, the response filter, and data splits.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::metrics;
use crate::textcore::{is_stopword, split_sentences, tokenize};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KnowledgeSentence {
    pub id: u32,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnowledgeMode {
    /// One document per line, split into sentences.
    Doc,
    Sentence,
}

impl std::str::FromStr for KnowledgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doc" => Ok(Self::Doc),
            "sentence" => Ok(Self::Sentence),
            other => Err(Error::config(format!("unknown knowledge mode {other:?}"))),
        }
    }
}

/// Sentences of a knowledge corpus; lines without tokens are skipped.
pub fn knowledge_sentences(text: &str, mode: KnowledgeMode) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        match mode {
            KnowledgeMode::Sentence => out.push(line.trim().to_string()),
            KnowledgeMode::Doc => out.extend(split_sentences(line)),
        }
    }
    out.retain(|s| !tokenize(s).is_empty());
    out
}

pub fn load_knowledge(path: &Path, mode: KnowledgeMode) -> Result<Vec<String>> {
    Ok(knowledge_sentences(&crate::io::read_to_string(path)?, mode))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DialogueExample {
    pub context: Vec<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_knowledge: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_knowledge: Vec<String>,
}

#[derive(Deserialize)]
struct RawExample {
    context: Vec<String>,
    response: String,
    #[serde(default)]
    knowledge: Vec<String>,
    #[serde(default)]
    gold_knowledge: Option<String>,
}

#[derive(Serialize)]
struct RawOut<'a> {
    context: &'a [String],
    response: &'a str,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    knowledge: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_knowledge: Option<&'a str>,
}

impl DialogueExample {
    pub fn new(context: Vec<String>, response: impl Into<String>) -> Self {
        Self {
            context,
            response: response.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() || self.context.iter().all(|u| u.trim().is_empty()) {
            return Err(Error::contract("dialogue context is empty"));
        }
        if self.response.trim().is_empty() {
            return Err(Error::contract("dialogue response is empty"));
        }
        Ok(())
    }

    pub fn gold(&self) -> Option<&str> {
        self.gold_knowledge.first().map(String::as_str)
    }

    pub fn gold_index(&self) -> Option<usize> {
        let g = self.gold()?;
        self.candidate_knowledge.iter().position(|c| c == g)
    }

    /// Parses one JSON line. A gold sentence missing from a non-empty candidate
    /// list is rejected; with no candidate list the gold becomes the only one.
    pub fn from_json_line(line: &str, line_no: usize) -> Result<Self> {
        let raw: RawExample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut ex = Self {
            context: raw.context,
            response: raw.response,
            gold_knowledge: raw.gold_knowledge.into_iter().collect(),
            candidate_knowledge: raw.knowledge,
        };
        if let Some(g) = ex.gold() {
            if ex.candidate_knowledge.is_empty() {
                ex.candidate_knowledge.push(g.to_string());
            } else if ex.gold_index().is_none() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "gold_knowledge is not among the knowledge candidates".into(),
                });
            }
        }
        ex.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        Ok(ex)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RawOut {
            context: &self.context,
            response: &self.response,
            knowledge: &self.candidate_knowledge,
            gold_knowledge: self.gold(),
        })
        .expect("dialogue example serializes")
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Strict loader for evaluation files: the first malformed line is an error.
pub fn load_benchmark(path: &Path) -> Result<Vec<DialogueExample>> {
    parse_benchmark(&crate::io::read_to_string(path)?)
}

pub fn parse_benchmark(text: &str) -> Result<Vec<DialogueExample>> {
    content_lines(text)
        .map(|(n, l)| DialogueExample::from_json_line(l, n))
        .collect()
}

/// Lenient loader: malformed lines are returned as errors next to the parsed rows.
pub fn parse_dialogues(text: &str) -> (Vec<DialogueExample>, Vec<Error>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (n, l) in content_lines(text) {
        match DialogueExample::from_json_line(l, n) {
            Ok(ex) => ok.push(ex),
            Err(e) => bad.push(e),
        }
    }
    (ok, bad)
}

pub fn write_dialogues(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&ex.to_json_line());
        text.push('\n');
    }
    crate::io::write_atomic_str(path, &text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterRule {
    Length = 1,
    ContentRatio = 2,
    UniqueRatio = 3,
    KnowledgeSim = 4,
    KnowledgeLength = 5,
}

impl FilterRule {
    pub const ALL: [FilterRule; 5] = [
        Self::Length,
        Self::ContentRatio,
        Self::UniqueRatio,
        Self::KnowledgeSim,
        Self::KnowledgeLength,
    ];

    pub fn id(self) -> usize {
        self as usize
    }
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule{}", self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterOutcome {
    Accept,
    Reject(FilterRule),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterThresholds {
    pub min_len_exclusive: usize,
    pub max_len_exclusive: usize,
    pub content_ratio: (f64, f64),
    pub unique_ratio: f64,
    pub min_sim: f64,
    pub min_knowledge_len_exclusive: usize,
    pub l: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_len_exclusive: 10,
            max_len_exclusive: 50,
            content_ratio: (0.25, 0.6),
            unique_ratio: 0.5,
            min_sim: 0.1,
            min_knowledge_len_exclusive: 10,
            l: 10,
        }
    }
}

/// Distinct content words (alphanumeric, not stopwords) over all tokens.
pub fn content_ratio(tokens: &[String]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let set: HashSet<&str> = tokens
        .iter()
        .map(String::as_str)
        .filter(|t| t.chars().all(char::is_alphanumeric) && !is_stopword(t))
        .collect();
    set.len() as f64 / tokens.len() as f64
}

pub fn unique_ratio(tokens: &[String]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let set: HashSet<&str> = tokens.iter().map(String::as_str).collect();
    set.len() as f64 / tokens.len() as f64
}

/// First rule the response fails, checked in order 1 to 5.
pub fn apply_filters_with<F>(
    example: &DialogueExample,
    index: &InvertedIndex,
    thresholds: &FilterThresholds,
    sim: F,
) -> FilterOutcome
where
    F: Fn(&str, &str) -> f64,
{
    let t = thresholds;
    let tokens = tokenize(&example.response);
    let n = tokens.len();
    if !(n > t.min_len_exclusive && n < t.max_len_exclusive) {
        return FilterOutcome::Reject(FilterRule::Length);
    }
    let cr = content_ratio(&tokens);
    if !(cr > t.content_ratio.0 && cr < t.content_ratio.1) {
        return FilterOutcome::Reject(FilterRule::ContentRatio);
    }
    if !(unique_ratio(&tokens) > t.unique_ratio) {
        return FilterOutcome::Reject(FilterRule::UniqueRatio);
    }
    let candidates = index.retrieve_topl(&example.response, t.l);
    let mut best: Option<(f64, usize)> = None;
    for c in &candidates.items {
        let s = sim(&example.response, &c.sentence.text);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, c.sentence.token_count));
        }
    }
    match best {
        Some((s, _)) if s < t.min_sim => FilterOutcome::Reject(FilterRule::KnowledgeSim),
        None => FilterOutcome::Reject(FilterRule::KnowledgeSim),
        Some((_, len)) if len <= t.min_knowledge_len_exclusive => {
            FilterOutcome::Reject(FilterRule::KnowledgeLength)
        }
        Some(_) => FilterOutcome::Accept,
    }
}

pub fn apply_filters(example: &DialogueExample, index: &InvertedIndex) -> FilterOutcome {
    apply_filters_with(example, index, &FilterThresholds::default(), metrics::sim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FilterReport {
    /// Rejections per rule, index 0 is rule 1.
    pub rejected: [usize; 5],
    pub accepted: usize,
    pub malformed: usize,
}

impl FilterReport {
    pub fn record(&mut self, outcome: FilterOutcome) {
        match outcome {
            FilterOutcome::Accept => self.accepted += 1,
            FilterOutcome::Reject(r) => self.rejected[r.id() - 1] += 1,
        }
    }

    pub fn merge(&mut self, other: &FilterReport) {
        for (a, b) in self.rejected.iter_mut().zip(other.rejected) {
            *a += b;
        }
        self.accepted += other.accepted;
        self.malformed += other.malformed;
    }

    pub fn total(&self) -> usize {
        self.rejected.iter().sum::<usize>() + self.accepted + self.malformed
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("category\tcount\n");
        for r in FilterRule::ALL {
            out.push_str(&format!("{r}\t{}\n", self.rejected[r.id() - 1]));
        }
        out.push_str(&format!("malformed\t{}\n", self.malformed));
        out.push_str(&format!("accepted\t{}\n", self.accepted));
        out
    }
}

pub fn filter_examples(
    examples: &[DialogueExample],
    index: &InvertedIndex,
) -> (Vec<DialogueExample>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for ex in examples {
        let outcome = apply_filters(ex, index);
        report.record(outcome);
        if outcome == FilterOutcome::Accept {
            kept.push(ex.clone());
        }
    }
    (kept, report)
}

/// Random partition; each side keeps the input order.
pub fn split_train_valid<T: Clone>(
    examples: &[T],
    valid_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if examples.len() < 2 {
        return Err(Error::config("need at least 2 examples to split"));
    }
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::config(format!(
            "valid_fraction must lie in (0, 1), got {valid_fraction}"
        )));
    }
    let n = examples.len();
    let n_valid = ((n as f64 * valid_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_valid = vec![false; n];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_valid);
    let mut valid = Vec::with_capacity(n_valid);
    for (i, ex) in examples.iter().enumerate() {
        if is_valid[i] {
            valid.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((train, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(response: &str) -> DialogueExample {
        DialogueExample::new(vec!["hello there".into()], response)
    }

    fn kb() -> InvertedIndex {
        InvertedIndex::build(&[
            "the eiffel tower in paris was completed in 1889 for the world fair",
            "mount everest rises above the himalaya border between nepal and tibet",
            "honey bees communicate through a waggle dance",
        ])
        .unwrap()
    }

    #[test]
    fn rule_examples() {
        let idx = kb();
        assert_eq!(
            apply_filters(&ex("one two three four five six seven eight"), &idx),
            FilterOutcome::Reject(FilterRule::Length)
        );
        // "no" is a stopword, so rule 2 trips before rule 3 would.
        let no = ex("no no no no no no no no no no no no");
        assert_eq!(unique_ratio(&tokenize(&no.response)), 1.0 / 12.0);
        assert_eq!(apply_filters(&no, &idx), FilterOutcome::Reject(FilterRule::ContentRatio));
        let k = "the eiffel tower in paris was completed in 1889 for the world fair";
        assert_eq!(apply_filters(&ex(k), &idx), FilterOutcome::Accept);
    }

    #[test]
    fn report_tsv_and_reconcile() {
        let mut r = FilterReport::default();
        r.record(FilterOutcome::Accept);
        r.record(FilterOutcome::Reject(FilterRule::UniqueRatio));
        r.malformed = 1;
        assert_eq!(r.total(), 3);
        let tsv = r.to_tsv();
        assert!(tsv.contains("rule3\t1\n"));
        assert!(tsv.ends_with("accepted\t1\n"));
    }

    #[test]
    fn benchmark_parsing() {
        let text = r#"{"context":["hi"],"response":"yo","knowledge":["a","b","c"],"gold_knowledge":"b"}

{"context":["x"],"response":"y"}"#;
        let v = parse_benchmark(text).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].gold_index(), Some(1));
        assert_eq!(v[0].candidate_knowledge, vec!["a", "b", "c"]);
        let bad = "{\"context\":[\"x\"],\"response\":\"y\"}\n{\"context\":[\"x\"]}";
        match parse_benchmark(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_benchmark("").unwrap().is_empty());
        let (ok, errs) = parse_dialogues("{}\n{\"context\":[\"a\"],\"response\":\"b\"}\n");
        assert_eq!((ok.len(), errs.len()), (1, 1));
    }

    #[test]
    fn json_roundtrip() {
        let mut e = ex("a reply");
        e.candidate_knowledge = vec!["k1".into(), "k2".into()];
        e.gold_knowledge = vec!["k2".into()];
        let back = DialogueExample::from_json_line(&e.to_json_line(), 1).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn knowledge_modes() {
        let text = "First fact. Second fact!\n\nThird one here.\n";
        assert_eq!(knowledge_sentences(text, KnowledgeMode::Doc).len(), 3);
        assert_eq!(knowledge_sentences(text, KnowledgeMode::Sentence).len(), 2);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let v: Vec<usize> = (0..100).collect();
        let (t, va) = split_train_valid(&v, 0.1, 7).unwrap();
        assert_eq!((t.len(), va.len()), (90, 10));
        assert_eq!(split_train_valid(&v, 0.1, 7).unwrap(), (t.clone(), va.clone()));
        let mut all: Vec<usize> = t.into_iter().chain(va).collect();
        all.sort();
        assert_eq!(all, v);
        assert!(split_train_valid(&[1], 0.5, 0).is_err());
        assert!(split_train_valid(&[1, 2], 1.0, 0).is_err());
    }

    fn response() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                Just("the".to_string()),
                Just("a".to_string()),
                Just(".".to_string()),
                "[a-z]{3,6}"
            ],
            5..30,
        )
        .prop_map(|w| w.join(" "))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn filter_is_order_independent_and_rechecks(rs in proptest::collection::vec(response(), 1..12), seed in 0u64..1000) {
            let idx = kb();
            let examples: Vec<DialogueExample> = rs.iter().map(|r| ex(r)).collect();
            let (kept, report) = filter_examples(&examples, &idx);
            prop_assert_eq!(report.total(), examples.len());
            let mut shuffled = examples.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (kept2, report2) = filter_examples(&shuffled, &idx);
            prop_assert_eq!(report, report2);
            let mut a: Vec<String> = kept.iter().map(|e| e.response.clone()).collect();
            let mut b: Vec<String> = kept2.iter().map(|e| e.response.clone()).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            for e in &kept {
                let t = tokenize(&e.response);
                prop_assert!(t.len() > 10 && t.len() < 50);
                let cr = content_ratio(&t);
                prop_assert!(cr > 0.25 && cr < 0.6);
                prop_assert!(unique_ratio(&t) > 0.5);
            }
        }
    }
}
