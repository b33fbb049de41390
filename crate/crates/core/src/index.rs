//! BM25 inverted index over knowledge sentences.
//!
//! Scoring follows the Okapi form
//! `sum_t idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avglen))`
//! with `idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`, summed over the
//! distinct query terms. Every sentence containing a query term scores > 0.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::KnowledgeSentence;
use crate::error::{Error, Result};
use crate::textcore::tokenize;

pub const INDEX_MAGIC: &[u8; 6] = b"ZRIDX1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0) || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::config(format!(
                "BM25 needs k1 > 0 and 0 <= b <= 1, got k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub sentence: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sentence: KnowledgeSentence,
    pub score: f64,
}

/// Top-`l` retrievals for one query, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub query_id: Option<usize>,
    pub items: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.items.iter().map(|c| c.sentence.id).collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.items.iter().map(|c| c.sentence.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    postings: HashMap<String, Vec<Posting>>,
    sentences: Vec<KnowledgeSentence>,
    avg_len: f64,
}

impl InvertedIndex {
    pub fn build<S: AsRef<str>>(sentences: &[S]) -> Result<Self> {
        Self::build_with(sentences, Bm25Params::default())
    }

    pub fn build_with<S: AsRef<str>>(sentences: &[S], params: Bm25Params) -> Result<Self> {
        params.validate()?;
        if sentences.is_empty() {
            return Err(Error::config("cannot index an empty knowledge corpus"));
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut stored = Vec::with_capacity(sentences.len());
        let mut total_len = 0usize;
        for (id, text) in sentences.iter().enumerate() {
            let text = text.as_ref();
            let tokens = tokenize(text);
            total_len += tokens.len();
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_string()).or_default().push(Posting {
                    sentence: id as u32,
                    tf: count,
                });
            }
            stored.push(KnowledgeSentence {
                id: id as u32,
                text: text.to_string(),
                token_count: tokens.len(),
            });
        }
        for list in postings.values_mut() {
            list.sort_by_key(|p| p.sentence);
        }
        Ok(Self {
            params,
            postings,
            avg_len: total_len as f64 / sentences.len() as f64,
            sentences: stored,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, |p| p.len())
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], |p| p.as_slice())
    }

    pub fn sentence(&self, id: u32) -> &KnowledgeSentence {
        &self.sentences[id as usize]
    }

    pub fn sentences(&self) -> &[KnowledgeSentence] {
        &self.sentences
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, len: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len as f64 / self.avg_len))
    }

    /// The `l` highest-scoring sentences, ties broken by smaller id.
    pub fn retrieve_topl(&self, query: &str, l: usize) -> CandidateSet {
        let mut terms: Vec<String> = tokenize(query);
        terms.sort();
        terms.dedup();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for p in list {
                let len = self.sentences[p.sentence as usize].token_count;
                *scores.entry(p.sentence).or_default() += idf * self.term_weight(p.tf, len);
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(l);
        CandidateSet {
            query_id: None,
            items: ranked
                .into_iter()
                .map(|(id, score)| Candidate {
                    sentence: self.sentences[id as usize].clone(),
                    score,
                })
                .collect(),
        }
    }

    /// `n` distinct sentences not in `exclude`.
    pub fn sample_noise<R: Rng>(
        &self,
        n: usize,
        rng: &mut R,
        exclude: &HashSet<u32>,
    ) -> Result<Vec<KnowledgeSentence>> {
        let total = self.len();
        let excluded = exclude.iter().filter(|&&i| (i as usize) < total).count();
        if n > total - excluded {
            return Err(Error::config(format!(
                "cannot draw {n} noise sentences from {} available",
                total - excluded
            )));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let available = total - excluded;
        let ids: Vec<u32> = if n * 4 <= available {
            let mut chosen = Vec::with_capacity(n);
            let mut seen = HashSet::new();
            while chosen.len() < n {
                let id = rng.random_range(0..total) as u32;
                if !exclude.contains(&id) && seen.insert(id) {
                    chosen.push(id);
                }
            }
            chosen
        } else {
            let pool: Vec<u32> = (0..total as u32).filter(|i| !exclude.contains(i)).collect();
            sample(rng, pool.len(), n).iter().map(|i| pool[i]).collect()
        };
        Ok(ids.into_iter().map(|i| self.sentence(i).clone()).collect())
    }

    pub fn sample_noise_seeded(
        &self,
        n: usize,
        seed: u64,
        exclude: &HashSet<u32>,
    ) -> Result<Vec<KnowledgeSentence>> {
        self.sample_noise(n, &mut ChaCha8Rng::seed_from_u64(seed), exclude)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&self.params.k1.to_le_bytes());
        out.extend_from_slice(&self.params.b.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for s in &self.sentences {
            out.extend_from_slice(&(s.token_count as u32).to_le_bytes());
        }
        let mut terms: Vec<&String> = self.postings.keys().collect();
        terms.sort();
        out.extend_from_slice(&(terms.len() as u32).to_le_bytes());
        for term in terms {
            out.extend_from_slice(&(term.len() as u32).to_le_bytes());
            out.extend_from_slice(term.as_bytes());
            let list = &self.postings[term];
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for p in list {
                out.extend_from_slice(&p.sentence.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], sentences: Vec<String>, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(|| bad("truncated index"))?;
            pos += n;
            Ok(s)
        };
        if take(6)? != INDEX_MAGIC {
            return Err(bad("missing ZRIDX1 header"));
        }
        let k1 = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let b = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let params = Bm25Params { k1, b };
        params.validate()?;
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if n != sentences.len() {
            return Err(bad(&format!(
                "index holds {n} sentences but sidecar has {}",
                sentences.len()
            )));
        }
        let mut lens = Vec::with_capacity(n);
        for _ in 0..n {
            lens.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let num_terms = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut postings = HashMap::with_capacity(num_terms);
        for _ in 0..num_terms {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let term = std::str::from_utf8(take(len)?)
                .map_err(|_| bad("term is not UTF-8"))?
                .to_string();
            let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let sentence = u32::from_le_bytes(take(4)?.try_into().unwrap());
                let tf = u32::from_le_bytes(take(4)?.try_into().unwrap());
                if sentence as usize >= n {
                    return Err(bad("posting refers to a sentence beyond N"));
                }
                list.push(Posting { sentence, tf });
            }
            postings.insert(term, list);
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes after postings"));
        }
        let total: usize = lens.iter().sum();
        let stored = sentences
            .into_iter()
            .zip(lens)
            .enumerate()
            .map(|(id, (text, token_count))| KnowledgeSentence {
                id: id as u32,
                text,
                token_count,
            })
            .collect();
        Ok(Self {
            params,
            postings,
            sentences: stored,
            avg_len: total as f64 / n.max(1) as f64,
        })
    }

    /// Writes `<prefix>.idx` and the `<prefix>.sentences.txt` sidecar.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let (idx, side) = index_paths(prefix);
        crate::io::write_atomic(&idx, &self.to_bytes())?;
        let mut text = String::new();
        for s in &self.sentences {
            text.push_str(&s.text.replace('\n', " "));
            text.push('\n');
        }
        crate::io::write_atomic_str(&side, &text)
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let (idx, side) = index_paths(prefix);
        let buf = std::fs::read(&idx).map_err(|e| Error::io(&idx, e))?;
        let sentences = crate::io::read_to_string(&side)?
            .lines()
            .map(str::to_string)
            .collect();
        Self::from_bytes(&buf, sentences, &idx)
    }
}

pub fn index_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".idx"), with(".sentences.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics() {
        let idx = InvertedIndex::build(&["the cat sat", "a dog ran", "cat and cat food"]).unwrap();
        assert_eq!(idx.doc_freq("cat"), 2);
        assert_eq!(idx.len(), 3);
        let idx2 = InvertedIndex::build(&["a b", "a b c d"]).unwrap();
        assert_eq!(idx2.avg_len(), 3.0);
        let total_cat: u32 = idx.postings("cat").iter().map(|p| p.tf).sum();
        assert_eq!(total_cat, 3);
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(InvertedIndex::build(&empty), Err(Error::Config(_))));
        assert!(InvertedIndex::build_with(&["a"], Bm25Params { k1: 0.0, b: 0.5 }).is_err());
    }

    #[test]
    fn rebuild_is_identical() {
        let s = ["alpha beta", "gamma delta beta", "beta beta"];
        let a = InvertedIndex::build(&s).unwrap();
        let b = InvertedIndex::build(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn self_retrieval_and_misses() {
        let s = ["red apple pie", "blue ocean wave", "green forest tree"];
        let idx = InvertedIndex::build(&s).unwrap();
        let c = idx.retrieve_topl("blue ocean wave", 2);
        assert_eq!(c.items[0].sentence.id, 1);
        assert!(idx.retrieve_topl("zzzz", 10).is_empty());
    }

    #[test]
    fn ties_break_by_smaller_id() {
        let idx = InvertedIndex::build(&["x y", "x y", "q"]).unwrap();
        let c = idx.retrieve_topl("x", 5);
        assert_eq!(c.ids(), vec![0, 1]);
        assert_eq!(c.items[0].score, c.items[1].score);
    }

    #[test]
    fn noise_sampling() {
        let s: Vec<String> = (0..10).map(|i| format!("w{i} common")).collect();
        let idx = InvertedIndex::build(&s).unwrap();
        assert!(idx.sample_noise_seeded(0, 1, &HashSet::new()).unwrap().is_empty());
        let exclude: HashSet<u32> = (0..8).collect();
        let mut got: Vec<u32> = idx
            .sample_noise_seeded(2, 3, &exclude)
            .unwrap()
            .iter()
            .map(|k| k.id)
            .collect();
        got.sort();
        assert_eq!(got, vec![8, 9]);
        assert!(idx.sample_noise_seeded(3, 3, &exclude).is_err());
        let a = idx.sample_noise_seeded(4, 9, &HashSet::new()).unwrap();
        let b = idx.sample_noise_seeded(4, 9, &HashSet::new()).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<u32> = a.iter().map(|k| k.id).collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("kb");
        let idx = InvertedIndex::build(&["one two", "two three four", "five"]).unwrap();
        idx.save(&prefix).unwrap();
        let back = InvertedIndex::load(&prefix).unwrap();
        assert_eq!(back, idx);
        let (p, _) = index_paths(&prefix);
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], b"ZRIDX1");
    }
}
