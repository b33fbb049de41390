//! Browser bindings for three small pieces of the pipeline: Gumbel-softmax
//! sampling, BM25 retrieval with similarity scores, and the response filter.
//!
//! Every export returns JSON. The logic lives in plain Rust functions next to
//! each export so the crate can be tested without a JS host.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use kgd_core::corpus::{self, DialogueExample, FilterOutcome, FilterThresholds, KnowledgeMode};
use kgd_core::index::InvertedIndex;
use kgd_core::metrics::sim;
use kgd_core::objectives::{gumbel_softmax_with_noise, sample_gumbel};
use kgd_core::tensor::{Graph, Tensor};
use kgd_core::textcore::tokenize;

/// Draws kept verbatim in the summary.
const SHOWN_DRAWS: usize = 5;
pub const MAX_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Serialize)]
pub struct GumbelSummary {
    pub tau: f64,
    pub samples: usize,
    /// `softmax(logits)`.
    pub probs: Vec<f64>,
    /// Mean relaxed sample.
    pub mean: Vec<f64>,
    /// How often each index holds the largest weight.
    pub argmax_freq: Vec<f64>,
    /// Mean of the largest weight; near 1 means near one-hot.
    pub mean_max: f64,
    pub draws: Vec<Vec<f64>>,
}

fn relaxed(logits: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>, String> {
    let g = Graph::inference();
    let x = g.constant(Tensor::new(vec![1, logits.len()], logits.to_vec()).map_err(|e| e.to_string())?);
    let w = gumbel_softmax_with_noise(&g, x, noise, tau).map_err(|e| e.to_string())?;
    Ok(w.value().data().to_vec())
}

pub fn gumbel_summary(logits: &[f64], tau: f64, samples: usize, seed: u64) -> Result<GumbelSummary, String> {
    if logits.is_empty() {
        return Err("enter at least one logit".into());
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err("logits must be finite numbers".into());
    }
    if !(1..=MAX_SAMPLES).contains(&samples) {
        return Err(format!("samples must lie in 1..={MAX_SAMPLES}"));
    }
    let n = logits.len();
    let probs = relaxed(logits, &vec![0.0; n], 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = vec![0.0; n];
    let mut hits = vec![0usize; n];
    let mut mean_max = 0.0;
    let mut draws = Vec::new();
    for s in 0..samples {
        let w = relaxed(logits, &sample_gumbel(&mut rng, n), tau)?;
        let (arg, max) = w
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        hits[arg] += 1;
        mean_max += max;
        for (m, v) in mean.iter_mut().zip(&w) {
            *m += v;
        }
        if s < SHOWN_DRAWS {
            draws.push(w);
        }
    }
    let k = samples as f64;
    Ok(GumbelSummary {
        tau,
        samples,
        probs,
        mean: mean.into_iter().map(|m| m / k).collect(),
        argmax_freq: hits.into_iter().map(|h| h as f64 / k).collect(),
        mean_max: mean_max / k,
        draws,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| format!("{{\"error\":{:?}}}", e.to_string()))
}

#[wasm_bindgen]
pub fn gumbel_explore(logits: &[f64], tau: f64, samples: usize, seed: u64) -> Result<String, JsError> {
    gumbel_summary(logits, tau, samples, seed)
        .map(|s| to_json(&s))
        .map_err(|e| JsError::new(&e))
}

#[derive(Debug, Clone, Serialize)]
pub struct Hit {
    pub id: u32,
    pub score: f64,
    /// Similarity of the query to this sentence.
    pub sim: f64,
    pub text: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterCheck {
    pub tokens: usize,
    pub content_ratio: f64,
    pub unique_ratio: f64,
    /// Most similar of the retrieved sentences, if any was retrieved.
    pub best_knowledge: Option<String>,
    pub best_sim: f64,
    pub best_knowledge_len: usize,
    /// `accepted`, or the first failing rule as `ruleN`.
    pub outcome: String,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Serialize)]
pub struct Thresholds {
    pub length: (usize, usize),
    pub content_ratio: (f64, f64),
    pub unique_ratio: f64,
    pub min_sim: f64,
    pub min_knowledge_len: usize,
}

impl From<FilterThresholds> for Thresholds {
    fn from(t: FilterThresholds) -> Self {
        Self {
            length: (t.min_len_exclusive, t.max_len_exclusive),
            content_ratio: t.content_ratio,
            unique_ratio: t.unique_ratio,
            min_sim: t.min_sim,
            min_knowledge_len: t.min_knowledge_len_exclusive,
        }
    }
}

/// A knowledge corpus pasted into the page.
#[wasm_bindgen]
pub struct KnowledgeBase {
    index: InvertedIndex,
}

impl KnowledgeBase {
    pub fn from_text(text: &str, doc_mode: bool) -> Result<Self, String> {
        let mode = if doc_mode { KnowledgeMode::Doc } else { KnowledgeMode::Sentence };
        let sentences = corpus::knowledge_sentences(text, mode);
        if sentences.is_empty() {
            return Err("the knowledge box has no sentences".into());
        }
        let index = InvertedIndex::build(&sentences).map_err(|e| e.to_string())?;
        Ok(Self { index })
    }

    pub fn hits(&self, query: &str, k: usize) -> Vec<Hit> {
        self.index
            .retrieve_topl(query, k)
            .items
            .into_iter()
            .map(|c| Hit {
                id: c.sentence.id,
                score: c.score,
                sim: sim(query, &c.sentence.text),
                text: c.sentence.text,
            })
            .collect()
    }

    pub fn filter_check(&self, response: &str) -> FilterCheck {
        let t = FilterThresholds::default();
        let toks = tokenize(response);
        let best = self
            .index
            .retrieve_topl(response, t.l)
            .items
            .into_iter()
            .map(|c| (sim(response, &c.sentence.text), c.sentence))
            .fold(None, |acc: Option<(f64, _)>, (s, k)| match acc {
                Some((b, _)) if s <= b => acc,
                _ => Some((s, k)),
            });
        let ex = DialogueExample::new(vec!["demo".into()], response);
        let outcome = match corpus::apply_filters(&ex, &self.index) {
            FilterOutcome::Accept => "accepted".to_string(),
            FilterOutcome::Reject(r) => r.to_string(),
        };
        FilterCheck {
            tokens: toks.len(),
            content_ratio: corpus::content_ratio(&toks),
            unique_ratio: corpus::unique_ratio(&toks),
            best_sim: best.as_ref().map_or(0.0, |b| b.0),
            best_knowledge_len: best.as_ref().map_or(0, |b| b.1.token_count),
            best_knowledge: best.map(|b| b.1.text),
            outcome,
            thresholds: t.into(),
        }
    }
}

#[wasm_bindgen]
impl KnowledgeBase {
    #[wasm_bindgen(constructor)]
    pub fn new(text: &str, doc_mode: bool) -> Result<KnowledgeBase, JsError> {
        Self::from_text(text, doc_mode).map_err(|e| JsError::new(&e))
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.index.avg_len()
    }

    pub fn search(&self, query: &str, k: usize) -> String {
        to_json(&self.hits(query, k))
    }

    pub fn check(&self, response: &str) -> String {
        to_json(&self.filter_check(response))
    }
}
