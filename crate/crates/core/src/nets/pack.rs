//! Token layouts fed to the networks.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, NEG_INF_MASK};
use crate::textcore::{alpha_token, CLS, PAD, SEP};

pub const SEG_CONTEXT: u8 = 0;
pub const SEG_KNOWLEDGE: u8 = 1;
pub const SEG_RESPONSE: u8 = 2;

/// `[CLS] [ZA_b]? c.. [SEP] S1..Sk [SEP] r.. [SEP]`.
///
/// Positions count non-pad tokens only, so inserting `[PAD]` rows anywhere
/// leaves every other row's inputs unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub positions: Vec<usize>,
    /// Index of the first response-block slot.
    pub prefix_len: usize,
    pub alpha_bucket: Option<usize>,
    /// Indices (into the ranked list given to `pack_input`) of the packed sentences.
    pub knowledge: Vec<usize>,
    /// Slot range of the context tokens.
    pub context_span: (usize, usize),
    /// Slot range of the knowledge tokens, excluding the closing `[SEP]`.
    pub knowledge_span: (usize, usize),
}

/// Drops oldest utterances while the context exceeds `budget`, then keeps the
/// last `budget` tokens of what is left.
pub fn truncate_context(context: &[Vec<u32>], budget: usize) -> Vec<u32> {
    let mut start = 0;
    let total = |s: usize| context[s..].iter().map(Vec::len).sum::<usize>();
    while start + 1 < context.len() && total(start) > budget {
        start += 1;
    }
    let flat: Vec<u32> = context[start..].iter().flatten().copied().collect();
    let skip = flat.len().saturating_sub(budget);
    flat[skip..].to_vec()
}

/// Packs the generator input. `max_output` slots (plus the closing `[SEP]`) are
/// always reserved for the response so training and decoding see the same
/// knowledge budget; a given response is cut to `max_output` tokens.
pub fn pack_input(
    context: &[Vec<u32>],
    knowledge: &[Vec<u32>],
    response: Option<&[u32]>,
    alpha_bucket: Option<usize>,
    max_len: usize,
    max_output: usize,
) -> Result<PackedInput> {
    if context.iter().all(Vec::is_empty) {
        return Err(Error::contract("cannot pack an empty context"));
    }
    let fixed = 1 + usize::from(alpha_bucket.is_some()) + 1 + 1 + max_output + 1;
    let ctx_budget = (max_len / 2).min(max_len.saturating_sub(fixed));
    if ctx_budget == 0 {
        return Err(Error::config(format!(
            "max_len {max_len} leaves no room for context with {max_output} output tokens"
        )));
    }
    let ctx = truncate_context(context, ctx_budget);

    let mut p = PackedInput {
        ids: Vec::with_capacity(max_len),
        segments: Vec::with_capacity(max_len),
        positions: Vec::with_capacity(max_len),
        prefix_len: 0,
        alpha_bucket,
        knowledge: Vec::new(),
        context_span: (0, 0),
        knowledge_span: (0, 0),
    };
    p.push(CLS, SEG_CONTEXT);
    if let Some(b) = alpha_bucket {
        p.push(alpha_token(b), SEG_CONTEXT);
    }
    let cs = p.ids.len();
    for &t in &ctx {
        p.push(t, SEG_CONTEXT);
    }
    p.context_span = (cs, p.ids.len());
    p.push(SEP, SEG_CONTEXT);

    let budget = max_len - p.ids.len() - 1 - (max_output + 1);
    let ks = p.ids.len();
    let mut used = 0;
    for (i, s) in knowledge.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        if used + s.len() > budget {
            break;
        }
        used += s.len();
        p.knowledge.push(i);
        for &t in s {
            p.push(t, SEG_KNOWLEDGE);
        }
    }
    p.knowledge_span = (ks, p.ids.len());
    p.push(SEP, SEG_KNOWLEDGE);
    p.prefix_len = p.ids.len();

    if let Some(r) = response {
        for &t in &r[..r.len().min(max_output)] {
            p.push(t, SEG_RESPONSE);
        }
        p.push(SEP, SEG_RESPONSE);
    }
    Ok(p)
}

impl PackedInput {
    fn push(&mut self, id: u32, segment: u8) {
        let pos = self
            .ids
            .iter()
            .zip(&self.positions)
            .rev()
            .find(|(&i, _)| i != PAD)
            .map_or(0, |(_, &p)| p + 1);
        self.ids.push(id);
        self.segments.push(segment);
        self.positions.push(pos);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn response(&self) -> &[u32] {
        &self.ids[self.prefix_len..]
    }

    /// Response tokens that carry a prediction target (the block including `[SEP]`).
    pub fn num_targets(&self) -> usize {
        self.response().iter().filter(|&&t| t != PAD).count()
    }

    pub fn has_alpha_token(&self) -> bool {
        self.ids.iter().any(|&t| crate::textcore::is_alpha_token(t))
    }

    /// Appends one response token (decoding).
    pub fn push_response(&mut self, id: u32) {
        self.push(id, SEG_RESPONSE);
    }

    /// Same input with the response block removed.
    pub fn prefix(&self) -> PackedInput {
        let mut p = self.clone();
        p.ids.truncate(self.prefix_len);
        p.segments.truncate(self.prefix_len);
        p.positions.truncate(self.prefix_len);
        p
    }

    /// Inserts `n` `[PAD]` slots before slot `at`, which must lie in the prefix.
    pub fn insert_padding(&mut self, at: usize, n: usize) -> Result<()> {
        if at > self.prefix_len {
            return Err(Error::contract("padding may only be inserted into the prefix"));
        }
        let seg = self.segments[at.min(self.len() - 1)];
        let pos = self.positions[at.min(self.len() - 1)];
        for _ in 0..n {
            self.ids.insert(at, PAD);
            self.segments.insert(at, seg);
            self.positions.insert(at, pos);
        }
        let shift = |s: &mut usize| {
            if *s >= at {
                *s += n
            }
        };
        shift(&mut self.prefix_len);
        shift(&mut self.context_span.0);
        shift(&mut self.context_span.1);
        shift(&mut self.knowledge_span.0);
        shift(&mut self.knowledge_span.1);
        Ok(())
    }

    /// Additive attention mask: prefix slots see the whole prefix, response
    /// slots see the prefix and earlier response slots, and no slot sees a pad.
    pub fn attention_mask(&self) -> Tensor {
        let n = self.len();
        let mut m = Tensor::filled(&[n, n], NEG_INF_MASK);
        let d = m.data_mut();
        for i in 0..n {
            let limit = if i < self.prefix_len { self.prefix_len } else { i + 1 };
            for j in 0..limit.min(n) {
                if self.ids[j] != PAD {
                    d[i * n + j] = 0.0;
                }
            }
            d[i * n + i] = 0.0;
        }
        m
    }
}

/// A bidirectional encoder input for the matcher and the other scoring heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    fn build(parts: &[(&[u32], u8)]) -> Self {
        let mut ids = vec![CLS];
        let mut segments = vec![SEG_CONTEXT];
        for (tokens, seg) in parts {
            ids.extend_from_slice(tokens);
            ids.push(SEP);
            segments.extend(std::iter::repeat_n(*seg, tokens.len() + 1));
        }
        Self { ids, segments }
    }

    /// `[CLS] c [SEP] r [SEP] z [SEP]`, each part cut to fit `max_len`. The
    /// context keeps its last tokens, response and knowledge their first.
    pub fn matcher(context: &[Vec<u32>], response: &[u32], z: &[u32], max_len: usize) -> Self {
        let room = max_len.saturating_sub(4);
        let third = room / 3;
        let r = &response[..response.len().min(third)];
        let z = &z[..z.len().min(third)];
        let c = truncate_context(context, room - r.len() - z.len());
        Self::build(&[(&c, SEG_CONTEXT), (r, SEG_RESPONSE), (z, SEG_KNOWLEDGE)])
    }

    /// `[CLS] c [SEP] z.. [SEP]` with `z` the concatenation of `knowledge`.
    pub fn context_knowledge(context: &[Vec<u32>], knowledge: &[&[u32]], max_len: usize) -> Self {
        let room = max_len.saturating_sub(3);
        let z: Vec<u32> = knowledge.iter().flat_map(|k| k.iter().copied()).collect();
        let z = &z[..z.len().min(room / 2)];
        let c = truncate_context(context, room - z.len());
        Self::build(&[(&c, SEG_CONTEXT), (z, SEG_KNOWLEDGE)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcore::{alpha_bucket, ZA_BASE};

    fn sent(start: u32, n: u32) -> Vec<u32> {
        (start..start + n).collect()
    }

    #[test]
    fn greedy_whole_sentences() {
        let ctx = vec![sent(100, 4)];
        let k = vec![sent(200, 10), sent(300, 10), sent(400, 10)];
        // 1 CLS + 1 ZA + 4 ctx + 1 SEP + 1 SEP + (4 + 1) response reserve = 13 fixed.
        let p = pack_input(&ctx, &k, None, Some(3), 13 + 25, 4).unwrap();
        assert_eq!(p.knowledge, vec![0, 1]);
        assert_eq!(p.knowledge_span.1 - p.knowledge_span.0, 20);
        assert!(p.len() + 5 <= 38);
    }

    #[test]
    fn layout_and_segments() {
        let ctx = vec![vec![100, 101], vec![102]];
        let k = vec![vec![200, 201]];
        let p = pack_input(&ctx, &k, Some(&[300, 301]), Some(2), 64, 8).unwrap();
        assert_eq!(
            p.ids,
            vec![CLS, ZA_BASE + 2, 100, 101, 102, SEP, 200, 201, SEP, 300, 301, SEP]
        );
        assert_eq!(p.segments, vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2]);
        assert_eq!(p.positions, (0..12).collect::<Vec<_>>());
        assert_eq!(p.prefix_len, 9);
        assert_eq!(p.num_targets(), 3);
        let no_alpha = pack_input(&ctx, &k, None, None, 64, 8).unwrap();
        assert!(!no_alpha.has_alpha_token());
        assert_eq!(alpha_bucket(0.25), 2);
    }

    #[test]
    fn context_truncation() {
        let ctx = vec![sent(100, 30), sent(200, 10)];
        assert_eq!(truncate_context(&ctx, 20), sent(200, 10));
        assert_eq!(truncate_context(&[sent(100, 30)], 5), sent(125, 5));
        assert!(pack_input(&[vec![]], &[], None, None, 64, 8).is_err());
    }

    #[test]
    fn mask_shape() {
        let p = pack_input(&[vec![100]], &[vec![200]], Some(&[300, 301]), None, 32, 4).unwrap();
        let m = p.attention_mask();
        let n = p.len();
        let at = |i: usize, j: usize| m.data()[i * n + j];
        // Prefix is bidirectional.
        assert_eq!(at(0, p.prefix_len - 1), 0.0);
        // Response slots are causal.
        assert_eq!(at(p.prefix_len, p.prefix_len + 1), NEG_INF_MASK);
        assert_eq!(at(p.prefix_len + 1, p.prefix_len), 0.0);
        // Prefix never sees the response.
        assert_eq!(at(0, p.prefix_len), NEG_INF_MASK);
    }

    #[test]
    fn padding_keeps_positions() {
        let mut p = pack_input(&[vec![100]], &[vec![200, 201]], Some(&[300]), None, 32, 4).unwrap();
        let before: Vec<(u32, usize)> = p.ids.iter().copied().zip(p.positions.clone()).collect();
        p.insert_padding(p.knowledge_span.0 + 1, 3).unwrap();
        let after: Vec<(u32, usize)> = p
            .ids
            .iter()
            .copied()
            .zip(p.positions.clone())
            .filter(|(i, _)| *i != PAD)
            .collect();
        assert_eq!(before, after);
        assert_eq!(p.response(), &[300, SEP]);
    }

    #[test]
    fn encoder_layouts() {
        let e = EncoderInput::matcher(&[vec![100, 101]], &[300], &[200, 201], 32);
        assert_eq!(e.ids, vec![CLS, 100, 101, SEP, 300, SEP, 200, 201, SEP]);
        assert_eq!(e.segments, vec![0, 0, 0, 0, 2, 2, 1, 1, 1]);
        let long: Vec<u32> = (0..100).collect();
        assert!(EncoderInput::matcher(&[long.clone()], &long, &long, 40).len() <= 40);
        assert!(EncoderInput::context_knowledge(&[long.clone()], &[&long], 40).len() <= 40);
    }
}
