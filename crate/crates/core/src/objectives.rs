//! Posteriors over retrieved knowledge and the training losses built on them.
//!
//! Candidate sets are small (the top-l retrievals), so the exact posterior is
//! computed by enumeration. All normalization happens in log space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::sim;
use crate::nets::{pack_input, EncoderInput, Nets, PackedInput};
use crate::tensor::{log_sigmoid, log_sum_exp, Graph, ParamStore, Tensor, Var};
use crate::textcore::{alpha_bucket, Vocab};

/// Floor applied to KL targets so `log 0` never appears.
pub const KL_FLOOR: f64 = 1e-12;

fn skip(reason: &str) -> Error {
    Error::Skip(reason.to_string())
}

/// A probability vector aligned with a candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDistribution {
    pub probs: Vec<f64>,
}

impl CandidateDistribution {
    /// Normalizes unnormalized log-weights.
    pub fn from_log_weights(logw: &[f64]) -> Result<Self> {
        if logw.is_empty() {
            return Err(skip("empty candidate set"));
        }
        let z = log_sum_exp(logw);
        if !z.is_finite() {
            return Err(skip("all candidate weights underflow"));
        }
        Ok(Self {
            probs: logw.iter().map(|w| (w - z).exp()).collect(),
        })
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSample {
    pub index: usize,
    pub z_alpha: f64,
}

/// `KL(q || p)` with `p` floored at [`KL_FLOOR`]; terms with `q = 0` vanish.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.max(KL_FLOOR).ln()))
        .sum()
}

/// `log softmax(log sigmoid(s))`: the selector's Bernoulli scores renormalized
/// over the candidate set.
pub fn log_prior(selector_logits: &[f64]) -> Vec<f64> {
    let ls: Vec<f64> = selector_logits.iter().map(|&s| log_sigmoid(s)).collect();
    let z = log_sum_exp(&ls);
    ls.iter().map(|x| x - z).collect()
}

/// `p(i) ∝ prior_i * exp(loglik_i)` where `log_prior_unnorm` may be unnormalized.
pub fn posterior_from_logs(log_prior_unnorm: &[f64], loglik: &[f64]) -> Result<CandidateDistribution> {
    let w: Vec<f64> = log_prior_unnorm.iter().zip(loglik).map(|(a, b)| a + b).collect();
    CandidateDistribution::from_log_weights(&w)
}

/// One dialogue turn with its retrieved candidates, already encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub context: Vec<Vec<u32>>,
    pub response: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    /// `Sim(R, K_i)` for every candidate.
    pub sims: Vec<f64>,
}

impl EncodedExample {
    pub fn new<S: AsRef<str>>(vocab: &Vocab, context: &[S], response: &str, candidates: &[S]) -> Self {
        Self {
            context: context.iter().map(|u| vocab.encode_text(u.as_ref())).collect(),
            response: vocab.encode_text(response),
            candidates: candidates.iter().map(|k| vocab.encode_text(k.as_ref())).collect(),
            sims: candidates.iter().map(|k| sim(response, k.as_ref())).collect(),
        }
    }

    /// Index of the candidate most similar to the response (first on ties).
    pub fn best_sim(&self) -> Option<usize> {
        (!self.candidates.is_empty()).then(|| argmax(&self.sims))
    }
}

fn row_of<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let rows: Vec<Var<'g>> = parts.iter().map(|v| v.reshape(&[1, 1])).collect::<Result<_>>()?;
    Var::concat_cols(&rows)
}

/// Matcher scores `F(C, R, K_i)` as a `[1, l]` row.
pub fn matcher_logits<'g>(g: &'g Graph, nets: &Nets, p: &ParamStore, ex: &EncodedExample) -> Result<Var<'g>> {
    if ex.candidates.is_empty() {
        return Err(skip("empty candidate set"));
    }
    let max = nets.config.max_input_len;
    let scores: Vec<Var<'g>> = ex
        .candidates
        .iter()
        .map(|k| nets.matcher_score(g, p, &EncoderInput::matcher(&ex.context, &ex.response, k, max)))
        .collect::<Result<_>>()?;
    row_of(&scores)
}

/// The retrieval posterior: softmax of matcher scores over the candidates.
pub fn q_zk(nets: &Nets, p: &ParamStore, ex: &EncodedExample) -> Result<CandidateDistribution> {
    let s = matcher_logits(&Graph::inference(), nets, p, ex)?.value();
    CandidateDistribution::from_log_weights(s.data())
}

/// Selector logits for `[CLS] c [SEP] K_i [SEP]` as a `[1, l]` row.
pub fn selector_logits<'g>(g: &'g Graph, nets: &Nets, p: &ParamStore, context: &[Vec<u32>], candidates: &[Vec<u32>]) -> Result<Var<'g>> {
    if candidates.is_empty() {
        return Err(skip("empty candidate set"));
    }
    let max = nets.config.max_input_len;
    let s: Vec<Var<'g>> = candidates
        .iter()
        .map(|k| nets.selector_logit(g, p, &EncoderInput::context_knowledge(context, &[k], max)))
        .collect::<Result<_>>()?;
    row_of(&s)
}

pub fn pack_single(nets: &Nets, ex: &EncodedExample, knowledge: &[u32], alpha: Option<usize>) -> Result<PackedInput> {
    pack_input(
        &ex.context,
        &[knowledge.to_vec()],
        Some(&ex.response),
        alpha,
        nets.config.max_input_len,
        nets.config.max_output_len,
    )
}

/// `log p(R | C, K_i)` for every candidate, without the grounding-rate token.
pub fn candidate_log_likelihoods(nets: &Nets, p: &ParamStore, ex: &EncodedExample) -> Result<Vec<f64>> {
    ex.candidates
        .iter()
        .map(|k| {
            let input = pack_single(nets, ex, k, None)?;
            Ok(-nets.response_nll(&Graph::inference(), p, &input)?.0.item())
        })
        .collect()
}

/// Exact posterior `p(Z_k | C, R)` by enumeration over the candidates.
pub fn true_posterior(nets: &Nets, p: &ParamStore, ex: &EncodedExample) -> Result<CandidateDistribution> {
    let s = selector_logits(&Graph::inference(), nets, p, &ex.context, &ex.candidates)?.value();
    let prior: Vec<f64> = s.data().iter().map(|&x| log_sigmoid(x)).collect();
    posterior_from_logs(&prior, &candidate_log_likelihoods(nets, p, ex)?)
}

/// `KL(q || target)` on a recorded graph; gradients reach the matcher only.
pub fn e_step_loss<'g>(
    g: &'g Graph,
    nets: &Nets,
    p: &ParamStore,
    ex: &EncodedExample,
    target: &CandidateDistribution,
) -> Result<Var<'g>> {
    let logits = matcher_logits(g, nets, p, ex)?;
    kl_to_constant(g, logits, &target.probs)
}

/// `KL(softmax(logits) || target)` with the target floored.
pub fn kl_to_constant<'g>(g: &'g Graph, logits: Var<'g>, target: &[f64]) -> Result<Var<'g>> {
    let log_t: Vec<f64> = target.iter().map(|t| t.max(KL_FLOOR).ln()).collect();
    let log_t = g.constant(Tensor::row(log_t));
    Ok(logits.softmax().mul(logits.log_softmax().sub(log_t)?)?.sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepOptions {
    /// Drop the grounding-rate token and the rate-regression term.
    pub disable_z_alpha: bool,
}

/// The M-step terms for one sampled knowledge sentence.
#[derive(Debug, Clone, Copy)]
pub struct MStepTerms<'g> {
    /// Mean response NLL per target token.
    pub nll: Var<'g>,
    pub kl: Var<'g>,
    pub mse: Option<Var<'g>>,
    pub total: Var<'g>,
    /// Number of response targets behind `nll`.
    pub tokens: usize,
}

/// Knowledge block for training: the sampled sentence mixed with noise, ranked
/// by current selector probabilities (descending, stable).
pub fn rank_by_selector(nets: &Nets, p: &ParamStore, context: &[Vec<u32>], pool: Vec<Vec<u32>>) -> Result<Vec<Vec<u32>>> {
    if pool.len() <= 1 {
        return Ok(pool);
    }
    let s = selector_logits(&Graph::inference(), nets, p, context, &pool)?.value();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| s.data()[b].total_cmp(&s.data()[a]));
    Ok(order.into_iter().map(|i| pool[i].clone()).collect())
}

#[allow(clippy::too_many_arguments)]
pub fn m_step_loss<'g>(
    g: &'g Graph,
    nets: &Nets,
    p: &ParamStore,
    ex: &EncodedExample,
    q: &CandidateDistribution,
    chosen: usize,
    noise: &[Vec<u32>],
    opts: MStepOptions,
) -> Result<(MStepTerms<'g>, PackedInput)> {
    if chosen >= ex.candidates.len() {
        return Err(Error::contract("sampled candidate out of range"));
    }
    let z_alpha = ex.sims[chosen];
    let zk = &ex.candidates[chosen];
    let mut pool = vec![zk.clone()];
    pool.extend(noise.iter().cloned());
    let ranked = rank_by_selector(nets, p, &ex.context, pool)?;
    let bucket = (!opts.disable_z_alpha).then(|| alpha_bucket(z_alpha));
    let packed = pack_input(
        &ex.context,
        &ranked,
        Some(&ex.response),
        bucket,
        nets.config.max_input_len,
        nets.config.max_output_len,
    )?;
    let (nll_sum, tokens) = nets.response_nll(g, p, &packed)?;
    let nll = nll_sum.scale(1.0 / tokens as f64);

    let sel = selector_logits(g, nets, p, &ex.context, &ex.candidates)?;
    let log_prior = sel.log_sigmoid().log_softmax();
    let entropy_part: f64 = q.probs.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    let cross = log_prior.mul(g.constant(Tensor::row(q.probs.clone())))?.sum();
    let kl = cross.neg().add_scalar(entropy_part);

    let mut total = nll.add(kl)?;
    let mse = if opts.disable_z_alpha {
        None
    } else {
        let enc = EncoderInput::context_knowledge(&ex.context, &[zk], nets.config.max_input_len);
        let pred = nets.alpha_predict(g, p, &enc)?;
        let e = pred.add_scalar(-z_alpha).square();
        total = total.add(e)?;
        Some(e)
    };
    Ok((
        MStepTerms {
            nll,
            kl,
            mse,
            total,
            tokens,
        },
        packed,
    ))
}

/// `-log p(y=1 | C, Z_pos) - log p(y=0 | C, Z_neg)`.
pub fn ks_loss<'g>(
    g: &'g Graph,
    nets: &Nets,
    p: &ParamStore,
    context: &[Vec<u32>],
    positive: &[u32],
    negative: &[u32],
) -> Result<Var<'g>> {
    let s = selector_logits(g, nets, p, context, &[positive.to_vec(), negative.to_vec()])?;
    ks_from_logits(s)
}

/// The selection loss from a `[1, 2]` row of (positive, negative) logits.
pub fn ks_from_logits(s: Var<'_>) -> Result<Var<'_>> {
    let pos = s.slice_cols(0, 1)?.log_sigmoid();
    let neg = s.slice_cols(1, 1)?.neg().log_sigmoid();
    Ok(pos.add(neg)?.sum().neg())
}

/// `-ln(-ln u)` for `u` uniform on the open unit interval.
pub fn sample_gumbel<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((logits + noise) / tau)` for a `[1, v]` row of logits.
pub fn gumbel_softmax_with_noise<'g>(g: &'g Graph, logits: Var<'g>, noise: &[f64], tau: f64) -> Result<Var<'g>> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("gumbel temperature must be positive, got {tau}")));
    }
    let shape = logits.shape();
    let xi = g.constant(Tensor::new(shape, noise.to_vec())?);
    Ok(logits.add(xi)?.scale(1.0 / tau).softmax())
}

/// Mixture weights and the soft embedding `weights · table`.
pub fn gumbel_softmax_sample<'g, R: Rng>(
    g: &'g Graph,
    logits: Var<'g>,
    table: Var<'g>,
    tau: f64,
    rng: &mut R,
) -> Result<(Var<'g>, Var<'g>)> {
    let noise = sample_gumbel(rng, logits.value().len());
    let w = gumbel_softmax_with_noise(g, logits, &noise, tau)?;
    Ok((w, w.matmul(table)?))
}

/// Soft-decodes `steps` tokens from `prefix` and regresses the auditor's
/// reading onto `z_alpha`. `noise(v)` supplies the Gumbel draws per step.
#[allow(clippy::too_many_arguments)]
pub fn mi_loss<'g, F>(
    g: &'g Graph,
    nets: &Nets,
    p: &ParamStore,
    prefix: &PackedInput,
    z_alpha: f64,
    steps: usize,
    tau: f64,
    mut noise: F,
) -> Result<Var<'g>>
where
    F: FnMut(usize) -> Vec<f64>,
{
    let steps = steps.clamp(1, nets.config.max_output_len);
    let table = nets.token_table(g, p);
    let mut rows: Vec<Var<'g>> = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = nets.next_logits_soft(g, p, prefix, &rows)?;
        let xi = noise(nets.config.vocab_size);
        let w = gumbel_softmax_with_noise(g, logits, &xi, tau)?;
        rows.push(w.matmul(table)?);
    }
    let audit = nets.alpha_audit(g, p, Var::concat_rows(&rows)?)?;
    Ok(audit.add_scalar(-z_alpha).square())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub log_marginal: f64,
    pub elbo: f64,
    pub kl_to_posterior: f64,
}

impl ElboTerms {
    pub fn residual(&self) -> f64 {
        (self.log_marginal - (self.elbo + self.kl_to_posterior)).abs()
    }
}

/// Evaluates `log m = ELBO(q) + KL(q || posterior)` for a normalized log prior,
/// per-candidate log-likelihoods and any distribution `q`.
pub fn elbo_terms(log_prior: &[f64], loglik: &[f64], q: &[f64]) -> Result<ElboTerms> {
    let joint: Vec<f64> = log_prior.iter().zip(loglik).map(|(a, b)| a + b).collect();
    let log_marginal = log_sum_exp(&joint);
    if !log_marginal.is_finite() {
        return Err(skip("all candidate weights underflow"));
    }
    let expected: f64 = q.iter().zip(loglik).filter(|(&qi, _)| qi > 0.0).map(|(qi, l)| qi * l).sum();
    let log_post: Vec<f64> = joint.iter().map(|j| j - log_marginal).collect();
    let kl_prior = kl_logs(q, log_prior);
    let kl_post = kl_logs(q, &log_post);
    Ok(ElboTerms {
        log_marginal,
        elbo: expected - kl_prior,
        kl_to_posterior: kl_post,
    })
}

fn kl_logs(q: &[f64], log_p: &[f64]) -> f64 {
    q.iter()
        .zip(log_p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &lp)| qi * (qi.ln() - lp))
        .sum()
}

/// The identity residual on a model: prior from the selector, likelihoods
/// from the generator with a fixed grounding-rate bucket.
pub fn elbo_identity_check(
    nets: &Nets,
    p: &ParamStore,
    ex: &EncodedExample,
    z_alpha: f64,
    q: &[f64],
) -> Result<ElboTerms> {
    let s = selector_logits(&Graph::inference(), nets, p, &ex.context, &ex.candidates)?.value();
    let prior = log_prior(s.data());
    let bucket = Some(alpha_bucket(z_alpha));
    let loglik: Vec<f64> = ex
        .candidates
        .iter()
        .map(|k| {
            let input = pack_single(nets, ex, k, bucket)?;
            Ok(-nets.response_nll(&Graph::inference(), p, &input)?.0.item())
        })
        .collect::<Result<_>>()?;
    elbo_terms(&prior, &loglik, q)
}
