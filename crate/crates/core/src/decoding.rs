//! Candidate generation: beam search and nucleus (top-p) sampling.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Autoregressive next-token scorer.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn eos(&self) -> usize;

    /// State after the start token, with logits for the first position.
    fn start(&self) -> (Self::State, Vec<f64>);

    /// Consumes `token` and returns logits for the following position.
    fn step(&self, state: &mut Self::State, token: usize) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Beam,
    Nucleus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Generated tokens, ending with the end token unless `hit_max_len`.
    pub tokens: Vec<usize>,
    /// Log-probabilities under the distribution the token was drawn from.
    pub token_logprobs: Vec<f64>,
    /// Log-probabilities under the untruncated model at temperature 1.
    pub model_logprobs: Vec<f64>,
    pub sum_logprob: f64,
    pub source: Source,
    pub hit_max_len: bool,
}

impl Candidate {
    /// Tokens without the trailing end token.
    pub fn words(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Natural-log softmax that tolerates `-inf` logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    log_softmax(&scaled).into_iter().map(f64::exp).collect()
}

fn length_normalized(sum: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        sum
    } else {
        sum / (len.max(1) as f64).powf(alpha)
    }
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<usize>,
    logprobs: Vec<f64>,
    sum: f64,
    state: S,
    logits: Vec<f64>,
}

fn finish<S>(h: &Hyp<S>, hit_max_len: bool) -> Candidate {
    Candidate {
        tokens: h.tokens.clone(),
        token_logprobs: h.logprobs.clone(),
        model_logprobs: h.logprobs.clone(),
        sum_logprob: h.sum,
        source: Source::Beam,
        hit_max_len,
    }
}

fn cmp_candidates(a: &Candidate, b: &Candidate, alpha: f64) -> Ordering {
    let sa = length_normalized(a.sum_logprob, a.tokens.len(), alpha);
    let sb = length_normalized(b.sum_logprob, b.tokens.len(), alpha);
    sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over `score = sum_logprob / len^alpha`.
///
/// Each step ranks every expansion of the live beams. An expansion ending in
/// the end token retires into the finished pool when it ranks within the top
/// `beam_width`; the best `beam_width` other expansions stay live. Beams still
/// live after `max_len` tokens are retired and flagged. Returns up to
/// `beam_width` distinct candidates, best first.
pub fn beam_search<M: StepModel>(model: &M, beam_width: usize, max_len: usize, alpha: f64) -> Result<Vec<Candidate>> {
    if max_len < 1 {
        return Err(Error::config("max_len must be at least 1"));
    }
    if beam_width < 1 {
        return Err(Error::config("beam width must be at least 1"));
    }
    let eos = model.eos();
    let (s0, l0) = model.start();
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        sum: 0.0,
        state: s0,
        logits: l0,
    }];
    let mut finished: Vec<Candidate> = Vec::new();

    for step in 0..max_len {
        let len = step + 1;
        let mut expansions: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            for (tok, lp) in log_softmax(&h.logits).into_iter().enumerate() {
                if lp.is_finite() {
                    let sum = h.sum + lp;
                    expansions.push((hi, tok, lp, sum));
                }
            }
        }
        expansions.sort_by(|a, b| {
            length_normalized(b.3, len, alpha)
                .partial_cmp(&length_normalized(a.3, len, alpha))
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });

        let last = len == max_len;
        let mut next = Vec::with_capacity(beam_width);
        for (rank, &(hi, tok, lp, sum)) in expansions.iter().enumerate() {
            if rank >= beam_width && next.len() == beam_width {
                break;
            }
            let parent = &live[hi];
            if tok == eos {
                if rank < beam_width {
                    let mut tokens = parent.tokens.clone();
                    tokens.push(tok);
                    let mut logprobs = parent.logprobs.clone();
                    logprobs.push(lp);
                    finished.push(Candidate {
                        tokens,
                        token_logprobs: logprobs.clone(),
                        model_logprobs: logprobs,
                        sum_logprob: sum,
                        source: Source::Beam,
                        hit_max_len: false,
                    });
                }
                continue;
            }
            if next.len() < beam_width {
                let mut h = Hyp {
                    tokens: parent.tokens.clone(),
                    logprobs: parent.logprobs.clone(),
                    sum,
                    state: parent.state.clone(),
                    logits: Vec::new(),
                };
                h.tokens.push(tok);
                h.logprobs.push(lp);
                if last {
                    finished.push(finish(&h, true));
                } else {
                    h.logits = model.step(&mut h.state, tok);
                    next.push(h);
                }
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= beam_width {
            finished.sort_by(|a, b| cmp_candidates(a, b, alpha));
            let worst = &finished[beam_width - 1];
            let worst_score = length_normalized(worst.sum_logprob, worst.tokens.len(), alpha);
            let best_live = live
                .iter()
                .map(|h| length_normalized(h.sum, h.tokens.len(), alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            // scores only fall as beams grow when alpha is 0
            if alpha == 0.0 && best_live <= worst_score {
                break;
            }
        }
    }
    finished.sort_by(|a, b| cmp_candidates(a, b, alpha));
    let mut out: Vec<Candidate> = Vec::new();
    for c in finished {
        if !out.iter().any(|o| o.tokens == c.tokens) {
            out.push(c);
        }
    }
    out.truncate(beam_width);
    Ok(out)
}

/// Argmax decoding.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Vec<usize> {
    let eos = model.eos();
    let (mut state, mut logits) = model.start();
    let mut out = Vec::new();
    for _ in 0..max_len {
        let tok = argmax(&logits);
        out.push(tok);
        if tok == eos {
            break;
        }
        logits = model.step(&mut state, tok);
    }
    out
}

fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

/// Smallest set of most probable tokens whose mass reaches `p`, plus every
/// token tied with the last one admitted, renormalized. Returns
/// `(token, probability)` pairs in descending probability order.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    while kept < order.len() {
        mass += probs[order[kept]];
        kept += 1;
        if mass >= p {
            break;
        }
    }
    if kept > 0 {
        let boundary = probs[order[kept - 1]];
        while kept < order.len() && probs[order[kept]] == boundary {
            mass += probs[order[kept]];
            kept += 1;
        }
    }
    order[..kept].iter().map(|&i| (i, probs[i] / mass)).collect()
}

fn sample_from(kept: &[(usize, f64)], rng: &mut impl Rng) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(tok, pr) in kept {
        acc += pr;
        if u < acc {
            return (tok, pr);
        }
    }
    *kept.last().expect("nucleus keeps at least one token")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleusParams {
    pub top_p: f64,
    pub temperature: f64,
    pub n_candidates: usize,
    pub max_len: usize,
}

impl Default for NucleusParams {
    /// Threshold 0.95, temperature 0.5, 30 candidates.
    fn default() -> Self {
        NucleusParams {
            top_p: 0.95,
            temperature: 0.5,
            n_candidates: 30,
            max_len: 24,
        }
    }
}

impl NucleusParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.n_candidates == 0 || self.max_len == 0 {
            return Err(Error::config("candidate count and max_len must be positive"));
        }
        Ok(())
    }
}

/// Draws `n_candidates` independent rollouts. Rollout `r` uses stream `r`
/// of a generator seeded with `seed`, so any subset can be regenerated
/// alone. Duplicates are kept.
pub fn nucleus_sample<M: StepModel>(model: &M, params: &NucleusParams, seed: u64) -> Result<Vec<Candidate>> {
    params.validate()?;
    let eos = model.eos();
    let mut out = Vec::with_capacity(params.n_candidates);
    for r in 0..params.n_candidates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let (mut state, mut logits) = model.start();
        let mut c = Candidate {
            tokens: Vec::new(),
            token_logprobs: Vec::new(),
            model_logprobs: Vec::new(),
            sum_logprob: 0.0,
            source: Source::Nucleus,
            hit_max_len: false,
        };
        loop {
            let probs = softmax_with_temperature(&logits, params.temperature);
            let kept = nucleus_filter(&probs, params.top_p);
            let (tok, pr) = sample_from(&kept, &mut rng);
            c.tokens.push(tok);
            c.token_logprobs.push(pr.ln());
            c.model_logprobs.push(log_softmax(&logits)[tok]);
            if tok == eos {
                break;
            }
            if c.tokens.len() >= params.max_len {
                c.hit_max_len = true;
                break;
            }
            logits = model.step(&mut state, tok);
        }
        c.sum_logprob = c.token_logprobs.iter().sum();
        out.push(c);
    }
    Ok(out)
}

/// One line of a candidates JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub item_id: String,
    pub candidate_index: usize,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
    pub source: Source,
    #[serde(default)]
    pub hit_max_len: bool,
    #[serde(default)]
    pub config_hash: String,
}
