//! The generator, knowledge selector, matcher, grounding-rate predictor and
//! grounding-rate auditor.
//!
//! All networks share one token/position/segment embedding table. The
//! generator is a pre-LN transformer run under a prefix/causal mask; the
//! selector reuses its backbone bidirectionally with a scalar head on `[CLS]`.
//! The matcher, predictor and auditor each own a three-layer stack.

mod pack;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use pack::{
    pack_input, truncate_context, EncoderInput, PackedInput, SEG_CONTEXT, SEG_KNOWLEDGE,
    SEG_RESPONSE,
};

use crate::error::{Error, Result};
use crate::tensor::{read_records, write_records, Graph, ParamId, ParamStore, Precision, Tensor, Var};
use crate::textcore::{Vocab, CLS, UNK};

/// Layer count of the matcher, predictor and auditor stacks.
pub const AUX_LAYERS: usize = 3;

const SEGMENTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::textcore::DEFAULT_VOCAB_SIZE,
            hidden: 128,
            heads: 4,
            layers: 4,
            max_input_len: 128,
            max_output_len: 32,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_input_len < 16 {
            return Err(Error::config("max_input_len must be at least 16"));
        }
        if self.max_output_len + 4 > self.max_input_len / 2 {
            return Err(Error::config(
                "max_output_len + 4 must fit in half of max_input_len",
            ));
        }
        if self.layers == 0 || self.vocab_size <= crate::textcore::NUM_RESERVED {
            return Err(Error::config("need at least one layer and a non-trivial vocabulary"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "vocab_size={}\nhidden={}\nheads={}\nlayers={}\nmax_input_len={}\nmax_output_len={}\ninit_std={}\nseed={}\n",
            self.vocab_size,
            self.hidden,
            self.heads,
            self.layers,
            self.max_input_len,
            self.max_output_len,
            self.init_std,
            self.seed
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in crate::io::parse_key_values(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field by name; unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("bad value {v:?} for {k}")))
        }
        match key {
            "vocab_size" => self.vocab_size = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "max_input_len" => self.max_input_len = num(key, value)?,
            "max_output_len" => self.max_output_len = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct StackIds {
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    w: ParamId,
    b: ParamId,
}

/// Parameter layout plus the forward passes. Values live in a separate
/// [`ParamStore`] so the same layout can evaluate perturbed copies.
#[derive(Debug, Clone)]
pub struct Nets {
    pub config: NetConfig,
    tok: ParamId,
    pos: ParamId,
    seg: ParamId,
    gen: StackIds,
    readout: HeadIds,
    selector: HeadIds,
    matcher: StackIds,
    matcher_head: HeadIds,
    alpha: StackIds,
    alpha_head: HeadIds,
    audit: StackIds,
    audit_head: HeadIds,
}

fn insert_stack(
    store: &mut ParamStore,
    prefix: &str,
    layers: usize,
    h: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StackIds> {
    let mut out = Vec::with_capacity(layers);
    for i in 0..layers {
        let n = |s: &str| format!("{prefix}.l{i}.{s}");
        out.push(LayerIds {
            ln1_g: store.insert_filled(&n("ln1.g"), &[1, h], 1.0)?,
            ln1_b: store.insert_filled(&n("ln1.b"), &[1, h], 0.0)?,
            wq: store.insert_normal(&n("attn.wq"), &[h, h], std, rng)?,
            wk: store.insert_normal(&n("attn.wk"), &[h, h], std, rng)?,
            wv: store.insert_normal(&n("attn.wv"), &[h, h], std, rng)?,
            wo: store.insert_normal(&n("attn.wo"), &[h, h], std, rng)?,
            bo: store.insert_filled(&n("attn.bo"), &[1, h], 0.0)?,
            ln2_g: store.insert_filled(&n("ln2.g"), &[1, h], 1.0)?,
            ln2_b: store.insert_filled(&n("ln2.b"), &[1, h], 0.0)?,
            w1: store.insert_normal(&n("ffn.w1"), &[h, 4 * h], std, rng)?,
            b1: store.insert_filled(&n("ffn.b1"), &[1, 4 * h], 0.0)?,
            w2: store.insert_normal(&n("ffn.w2"), &[4 * h, h], std, rng)?,
            b2: store.insert_filled(&n("ffn.b2"), &[1, h], 0.0)?,
        });
    }
    Ok(StackIds {
        layers: out,
        lnf_g: store.insert_filled(&format!("{prefix}.lnf.g"), &[1, h], 1.0)?,
        lnf_b: store.insert_filled(&format!("{prefix}.lnf.b"), &[1, h], 0.0)?,
    })
}

fn insert_head(
    store: &mut ParamStore,
    prefix: &str,
    h: usize,
    out: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<HeadIds> {
    Ok(HeadIds {
        w: store.insert_normal(&format!("{prefix}.w"), &[h, out], std, rng)?,
        b: store.insert_filled(&format!("{prefix}.b"), &[1, out], 0.0)?,
    })
}

fn ids_usize(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

impl Nets {
    /// Fresh seeded parameters.
    pub fn init(config: NetConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let (h, std) = (config.hidden, config.init_std);
        let tok = s.insert_normal("emb.tok", &[config.vocab_size, h], std, &mut rng)?;
        let pos = s.insert_normal("emb.pos", &[config.max_input_len, h], std, &mut rng)?;
        let seg = s.insert_normal("emb.seg", &[SEGMENTS, h], std, &mut rng)?;
        let gen = insert_stack(&mut s, "gen", config.layers, h, std, &mut rng)?;
        let readout = insert_head(&mut s, "gen.readout", h, config.vocab_size, std, &mut rng)?;
        let selector = insert_head(&mut s, "sel.head", h, 1, std, &mut rng)?;
        let matcher = insert_stack(&mut s, "match", AUX_LAYERS, h, std, &mut rng)?;
        let matcher_head = insert_head(&mut s, "match.head", h, 1, std, &mut rng)?;
        let alpha = insert_stack(&mut s, "alpha", AUX_LAYERS, h, std, &mut rng)?;
        let alpha_head = insert_head(&mut s, "alpha.head", h, 1, std, &mut rng)?;
        let audit = insert_stack(&mut s, "audit", AUX_LAYERS, h, std, &mut rng)?;
        let audit_head = insert_head(&mut s, "audit.head", h, 1, std, &mut rng)?;
        Ok((
            Self {
                config,
                tok,
                pos,
                seg,
                gen,
                readout,
                selector,
                matcher,
                matcher_head,
                alpha,
                alpha_head,
                audit,
                audit_head,
            },
            s,
        ))
    }

    pub fn token_table<'g>(&self, g: &'g Graph, p: &ParamStore) -> Var<'g> {
        g.param(p, self.tok)
    }

    fn embed_rows<'g>(
        &self,
        g: &'g Graph,
        p: &ParamStore,
        tokens: Var<'g>,
        positions: &[usize],
        segments: &[u8],
    ) -> Result<Var<'g>> {
        if positions.len() > self.config.max_input_len
            || positions.iter().any(|&x| x >= self.config.max_input_len)
        {
            return Err(Error::contract(format!(
                "input of {} slots exceeds max_input_len {}",
                positions.len(),
                self.config.max_input_len
            )));
        }
        let segs: Vec<usize> = segments.iter().map(|&s| s as usize).collect();
        let pos = g.param(p, self.pos).gather_rows(positions)?;
        let seg = g.param(p, self.seg).gather_rows(&segs)?;
        tokens.add(pos)?.add(seg)
    }

    fn embed<'g>(
        &self,
        g: &'g Graph,
        p: &ParamStore,
        ids: &[u32],
        positions: &[usize],
        segments: &[u8],
    ) -> Result<Var<'g>> {
        let tokens = g.param(p, self.tok).gather_rows(&ids_usize(ids))?;
        self.embed_rows(g, p, tokens, positions, segments)
    }

    fn layer_norm<'g>(&self, g: &'g Graph, p: &ParamStore, x: Var<'g>, gain: ParamId, bias: ParamId) -> Result<Var<'g>> {
        x.layer_norm().mul_row(g.param(p, gain))?.add_row(g.param(p, bias))
    }

    fn stack<'g>(
        &self,
        g: &'g Graph,
        p: &ParamStore,
        stack: &StackIds,
        mut x: Var<'g>,
        mask: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let heads = self.config.heads;
        let dh = self.config.hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in &stack.layers {
            let h = self.layer_norm(g, p, x, l.ln1_g, l.ln1_b)?;
            let q = h.matmul(g.param(p, l.wq))?;
            let k = h.matmul(g.param(p, l.wk))?;
            let v = h.matmul(g.param(p, l.wv))?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = q.slice_cols(hd * dh, dh)?;
                let kh = k.slice_cols(hd * dh, dh)?;
                let vh = v.slice_cols(hd * dh, dh)?;
                let mut s = qh.matmul_t(kh)?.scale(scale);
                if let Some(m) = mask {
                    s = s.add(m)?;
                }
                outs.push(s.softmax().matmul(vh)?);
            }
            let att = Var::concat_cols(&outs)?
                .matmul(g.param(p, l.wo))?
                .add_row(g.param(p, l.bo))?;
            x = x.add(att)?;
            let h2 = self.layer_norm(g, p, x, l.ln2_g, l.ln2_b)?;
            let f = h2
                .matmul(g.param(p, l.w1))?
                .add_row(g.param(p, l.b1))?
                .gelu()
                .matmul(g.param(p, l.w2))?
                .add_row(g.param(p, l.b2))?;
            x = x.add(f)?;
        }
        self.layer_norm(g, p, x, stack.lnf_g, stack.lnf_b)
    }

    fn head<'g>(&self, g: &'g Graph, p: &ParamStore, head: HeadIds, rows: Var<'g>) -> Result<Var<'g>> {
        rows.matmul(g.param(p, head.w))?.add_row(g.param(p, head.b))
    }

    fn cls_scalar<'g>(&self, g: &'g Graph, p: &ParamStore, head: HeadIds, hidden: Var<'g>) -> Result<Var<'g>> {
        self.head(g, p, head, hidden.slice_rows(0, 1)?)?.reshape(&[])
    }

    /// Generator hidden states under the packed input's mask.
    fn generator_hidden<'g>(&self, g: &'g Graph, p: &ParamStore, input: &PackedInput, tokens: Option<Var<'g>>) -> Result<Var<'g>> {
        let x = match tokens {
            Some(t) => self.embed_rows(g, p, t, &input.positions, &input.segments)?,
            None => self.embed(g, p, &input.ids, &input.positions, &input.segments)?,
        };
        let mask = g.constant(input.attention_mask());
        self.stack(g, p, &self.gen, x, Some(mask))
    }

    /// Logits `[m + 1, v]` for an input whose response block holds `m` slots.
    /// Row `t` predicts response slot `t` from the slots before it; the last
    /// row predicts the token after the block.
    pub fn generator_logits<'g>(&self, g: &'g Graph, p: &ParamStore, input: &PackedInput) -> Result<Var<'g>> {
        let h = self.generator_hidden(g, p, input, None)?;
        let rows = h.slice_rows(input.prefix_len - 1, input.len() - input.prefix_len + 1)?;
        self.head(g, p, self.readout, rows)
    }

    /// Next-token logits `[1, v]` after the whole input.
    pub fn next_logits<'g>(&self, g: &'g Graph, p: &ParamStore, input: &PackedInput) -> Result<Var<'g>> {
        let h = self.generator_hidden(g, p, input, None)?;
        self.head(g, p, self.readout, h.slice_rows(input.len() - 1, 1)?)
    }

    /// Summed response NLL with the number of target tokens.
    pub fn response_nll<'g>(&self, g: &'g Graph, p: &ParamStore, input: &PackedInput) -> Result<(Var<'g>, usize)> {
        let m = input.len() - input.prefix_len;
        if m == 0 {
            return Err(Error::contract("packed input carries no response"));
        }
        let logits = self.generator_logits(g, p, input)?.slice_rows(0, m)?;
        let targets = ids_usize(input.response());
        Ok((logits.cross_entropy_sum(&targets)?, m))
    }

    /// Next-token logits `[1, v]` when the response block is given as
    /// embedding rows `[m, h]` instead of token ids (soft decoding).
    pub fn next_logits_soft<'g>(
        &self,
        g: &'g Graph,
        p: &ParamStore,
        prefix: &PackedInput,
        soft: &[Var<'g>],
    ) -> Result<Var<'g>> {
        let mut layout = prefix.prefix();
        for _ in soft {
            layout.push_response(UNK);
        }
        let hard = g.param(p, self.tok).gather_rows(&ids_usize(&layout.ids[..layout.prefix_len]))?;
        let mut parts = vec![hard];
        parts.extend_from_slice(soft);
        let tokens = Var::concat_rows(&parts)?;
        let h = self.generator_hidden(g, p, &layout, Some(tokens))?;
        self.head(g, p, self.readout, h.slice_rows(layout.len() - 1, 1)?)
    }

    /// Pre-sigmoid selector logit for `[CLS] c [SEP] z [SEP]`.
    pub fn selector_logit<'g>(&self, g: &'g Graph, p: &ParamStore, input: &EncoderInput) -> Result<Var<'g>> {
        let x = self.embed(g, p, &input.ids, &input.positions(), &input.segments)?;
        let h = self.stack(g, p, &self.gen, x, None)?;
        self.cls_scalar(g, p, self.selector, h)
    }

    pub fn selector_prob(&self, p: &ParamStore, input: &EncoderInput) -> Result<f64> {
        Ok(crate::tensor::sigmoid(self.selector_logit(&Graph::inference(), p, input)?.item()))
    }

    /// Matching score F(C, R, Z) for `[CLS] c [SEP] r [SEP] z [SEP]`.
    pub fn matcher_score<'g>(&self, g: &'g Graph, p: &ParamStore, input: &EncoderInput) -> Result<Var<'g>> {
        let x = self.embed(g, p, &input.ids, &input.positions(), &input.segments)?;
        let h = self.stack(g, p, &self.matcher, x, None)?;
        self.cls_scalar(g, p, self.matcher_head, h)
    }

    /// Predicted grounding rate in (0, 1) for `[CLS] c [SEP] z.. [SEP]`.
    pub fn alpha_predict<'g>(&self, g: &'g Graph, p: &ParamStore, input: &EncoderInput) -> Result<Var<'g>> {
        let x = self.embed(g, p, &input.ids, &input.positions(), &input.segments)?;
        let h = self.stack(g, p, &self.alpha, x, None)?;
        Ok(self.cls_scalar(g, p, self.alpha_head, h)?.sigmoid())
    }

    /// Grounding rate recovered from response embedding rows `[m, h]`, which may
    /// be hard table rows or soft mixtures.
    pub fn alpha_audit<'g>(&self, g: &'g Graph, p: &ParamStore, rows: Var<'g>) -> Result<Var<'g>> {
        let cls = g.param(p, self.tok).gather_rows(&[CLS as usize])?;
        let tokens = Var::concat_rows(&[cls, rows])?;
        let n = tokens.value().rows();
        let positions: Vec<usize> = (0..n).collect();
        let mut segments = vec![SEG_RESPONSE; n];
        segments[0] = SEG_CONTEXT;
        let x = self.embed_rows(g, p, tokens, &positions, &segments)?;
        let h = self.stack(g, p, &self.audit, x, None)?;
        Ok(self.cls_scalar(g, p, self.audit_head, h)?.sigmoid())
    }

    /// Hard embedding rows for token ids (the auditor's teacher-forced input).
    pub fn token_rows<'g>(&self, g: &'g Graph, p: &ParamStore, ids: &[u32]) -> Result<Var<'g>> {
        g.param(p, self.tok).gather_rows(&ids_usize(ids))
    }
}

/// Networks, values and vocabulary travelling together as a checkpoint.
#[derive(Debug, Clone)]
pub struct Model {
    pub nets: Nets,
    pub params: ParamStore,
    pub vocab: Vocab,
}

pub const MODEL_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const NET_CONFIG_FILE: &str = "net.txt";

impl Model {
    pub fn new(mut config: NetConfig, vocab: Vocab) -> Result<Self> {
        config.vocab_size = vocab.len();
        let (nets, params) = Nets::init(config)?;
        Ok(Self { nets, params, vocab })
    }

    pub fn config(&self) -> &NetConfig {
        &self.nets.config
    }

    /// `name<TAB>dims` per parameter, `x`-joined dims.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{name}\t{}\n", dims.join("x")));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let records: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        write_records(&dir.join(MODEL_FILE), &records, Precision::F64)?;
        crate::io::write_atomic_str(&dir.join(MANIFEST_FILE), &self.manifest())?;
        crate::io::write_atomic_str(&dir.join(NET_CONFIG_FILE), &self.nets.config.to_text())?;
        self.vocab.save(&dir.join(VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = NetConfig::from_text(&crate::io::read_to_string(&dir.join(NET_CONFIG_FILE))?)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != config.vocab_size {
            return Err(Error::format(
                dir.join(VOCAB_FILE),
                format!("vocabulary has {} tokens, model expects {}", vocab.len(), config.vocab_size),
            ));
        }
        let (nets, mut params) = Nets::init(config)?;
        let (_, records) = read_records(&dir.join(MODEL_FILE))?;
        params.load_values(records)?;
        Ok(Self { nets, params, vocab })
    }
}

impl crate::metrics::ResponseScorer for Model {
    type Input = PackedInput;

    fn response_nll(&self, input: &PackedInput) -> Result<(f64, usize)> {
        let g = Graph::inference();
        let (nll, m) = self.nets.response_nll(&g, &self.params, input)?;
        Ok((nll.item(), m))
    }
}

#[cfg(test)]
mod tests;
