//! Caption metrics: METEOR-lite, CIDEr-D, SPICE (pluggable), SPIDEr,
//! SPIDEr-FL, FENSE and vocabulary size.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rerank::{FluencyDetector, FluencyFlags};
use crate::synthworld::{oracle_text_embedding, EventVocab, SeqEmbedding};

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(String::from)
        .collect()
}

/// Exact-match unigram alignment. Each candidate token takes the reference
/// position right after its predecessor's when that extends a chunk,
/// otherwise the unused matching position that starts the longest run of
/// agreement with the rest of the candidate (earliest on ties). Returns the
/// reference position per candidate token.
fn align(cand: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    let mut out: Vec<Option<usize>> = Vec::with_capacity(cand.len());
    for (i, tok) in cand.iter().enumerate() {
        let follow = match i.checked_sub(1).and_then(|p| out[p]) {
            Some(j) if j + 1 < reference.len() && !used[j + 1] && &reference[j + 1] == tok => Some(j + 1),
            _ => None,
        };
        let run = |j: usize| {
            (0..)
                .take_while(|&k| {
                    i + k < cand.len() && j + k < reference.len() && !used[j + k] && cand[i + k] == reference[j + k]
                })
                .count()
        };
        let pick = follow.or_else(|| {
            (0..reference.len())
                .filter(|&j| !used[j] && &reference[j] == tok)
                .fold(None, |best: Option<(usize, usize)>, j| match best {
                    Some((_, r)) if r >= run(j) => best,
                    _ => Some((j, run(j))),
                })
                .map(|(j, _)| j)
        });
        if let Some(j) = pick {
            used[j] = true;
        }
        out.push(pick);
    }
    out
}

fn meteor_single(cand: &[String], reference: &[String]) -> f64 {
    let alignment = align(cand, reference);
    let m = alignment.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &alignment {
        match (prev, a) {
            (Some(p), Some(j)) if p + 1 == *j => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

/// Exact-match METEOR, maximised over references.
pub fn meteor_lite(cand: &[String], refs: &[Vec<String>]) -> f64 {
    refs.iter().map(|r| meteor_single(cand, r)).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderConfig {
    pub n: usize,
    pub sigma: f64,
}

impl Default for CiderConfig {
    fn default() -> Self {
        CiderConfig { n: 4, sigma: 6.0 }
    }
}

type Counts = BTreeMap<Vec<String>, f64>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts {
    let mut c = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *c.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    c
}

struct Weighted {
    vec: Counts,
    norm2: f64,
}

fn weigh(counts: &Counts, idf: &dyn Fn(&[String]) -> f64) -> Weighted {
    let vec: Counts = counts.iter().map(|(g, c)| (g.clone(), c * idf(g))).collect();
    let norm2 = vec.values().map(|v| v * v).sum();
    Weighted { vec, norm2 }
}

fn clipped_cosine(h: &Weighted, r: &Weighted) -> f64 {
    if h.norm2 == 0.0 || r.norm2 == 0.0 {
        return 0.0;
    }
    let dot: f64 = h
        .vec
        .iter()
        .filter_map(|(g, hv)| r.vec.get(g).map(|rv| hv.min(*rv) * rv))
        .sum();
    dot / (h.norm2 * r.norm2).sqrt()
}

/// Per-item CIDEr-D scores. Document frequencies come from the references
/// only; unseen n-grams count as appearing once.
pub fn cider_d(items: &[(Vec<String>, Vec<Vec<String>>)], cfg: CiderConfig) -> Vec<f64> {
    if items.is_empty() {
        return Vec::new();
    }
    let ln_items = (items.len() as f64).ln();
    let mut totals = vec![0.0; items.len()];
    for n in 1..=cfg.n {
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        let ref_counts: Vec<Vec<Counts>> = items
            .iter()
            .map(|(_, refs)| refs.iter().map(|r| ngram_counts(r, n)).collect())
            .collect();
        for rc in &ref_counts {
            let seen: BTreeSet<&Vec<String>> = rc.iter().flat_map(|c| c.keys()).collect();
            for g in seen {
                *df.entry(g.clone()).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| ln_items - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, (cand, refs)) in items.iter().enumerate() {
            let h = weigh(&ngram_counts(cand, n), &idf);
            let mut acc = 0.0;
            for (r_tokens, rc) in refs.iter().zip(&ref_counts[i]) {
                let r = weigh(rc, &idf);
                let delta = cand.len() as f64 - r_tokens.len() as f64;
                acc += clipped_cosine(&h, &r) * (-(delta * delta) / (2.0 * cfg.sigma * cfg.sigma)).exp();
            }
            totals[i] += acc / refs.len() as f64;
        }
    }
    totals.into_iter().map(|t| 10.0 * t / cfg.n as f64).collect()
}

pub trait SpiceBackend: Sync {
    /// Label written next to the scores.
    fn name(&self) -> &str;

    fn score(&self, cand: &[String], refs: &[Vec<String>]) -> Result<f64>;
}

pub const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "while", "as", "then", "of", "in", "on", "at", "to", "with", "from",
    "by", "for", "is", "are", "was", "were", "be", "it", "its", "this", "that", "there", "some", "into", "onto",
];

/// F1 between the candidate's content words and the union of the
/// references' content words.
#[derive(Clone, Debug, Default)]
pub struct SpiceProxy;

impl SpiceProxy {
    fn content(tokens: &[String]) -> BTreeSet<&str> {
        tokens
            .iter()
            .map(String::as_str)
            .filter(|t| !STOP_WORDS.contains(t))
            .collect()
    }
}

impl SpiceBackend for SpiceProxy {
    fn name(&self) -> &str {
        "spice_proxy"
    }

    fn score(&self, cand: &[String], refs: &[Vec<String>]) -> Result<f64> {
        let c = Self::content(cand);
        let r: BTreeSet<&str> = refs.iter().flat_map(|r| Self::content(r)).collect();
        let hit = c.intersection(&r).count();
        if hit == 0 {
            return Ok(0.0);
        }
        let p = hit as f64 / c.len() as f64;
        let rc = hit as f64 / r.len() as f64;
        Ok(2.0 * p * rc / (p + rc))
    }
}

pub fn spider(cider: f64, spice: f64) -> f64 {
    (cider + spice) / 2.0
}

pub const DEFAULT_PENALTY_FACTOR: f64 = 0.1;

pub fn apply_fluency_penalty(score: f64, flags: &FluencyFlags, factor: f64) -> f64 {
    if flags.is_empty() {
        score
    } else {
        score * factor
    }
}

pub trait TextEmbedder: Sync {
    fn name(&self) -> &str;

    fn embed(&self, tokens: &[String]) -> SeqEmbedding;
}

/// Event-indicator sentence embedding of the synthetic world.
#[derive(Clone, Debug)]
pub struct OracleEmbedder {
    pub vocab: EventVocab,
}

impl TextEmbedder for OracleEmbedder {
    fn name(&self) -> &str {
        "fense_toy"
    }

    fn embed(&self, tokens: &[String]) -> SeqEmbedding {
        oracle_text_embedding(&tokens.join(" "), &self.vocab)
    }
}

fn cosine(a: &SeqEmbedding, b: &SeqEmbedding) -> Result<f64> {
    let na = a.dot(a)?.sqrt();
    let nb = b.dot(b)?.sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Mean embedding cosine to the references; returns (similarity, fense).
pub fn fense(
    cand: &[String],
    refs: &[Vec<String>],
    embedder: &dyn TextEmbedder,
    flags: &FluencyFlags,
    factor: f64,
) -> Result<(f64, f64)> {
    if refs.is_empty() {
        return Err(Error::Metric("fense needs at least one reference".into()));
    }
    let c = embedder.embed(cand);
    let mut sim = 0.0;
    for r in refs {
        sim += cosine(&c, &embedder.embed(r))?;
    }
    sim /= refs.len() as f64;
    Ok((sim, apply_fluency_penalty(sim, flags, factor)))
}

/// Number of distinct tokens across all candidates.
pub fn vocab_size<S: AsRef<[String]>>(cands: &[S]) -> usize {
    cands
        .iter()
        .flat_map(|c| c.as_ref().iter())
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCorpus {
    pub items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for it in &self.items {
            if !ids.insert(&it.item_id) {
                return Err(Error::Metric(format!("duplicate item id '{}'", it.item_id)));
            }
            if it.references.is_empty() {
                return Err(Error::Metric(format!("item '{}' has no references", it.item_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub cider_n: usize,
    pub cider_sigma: f64,
    pub penalty_factor: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            cider_n: 4,
            cider_sigma: 6.0,
            penalty_factor: DEFAULT_PENALTY_FACTOR,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cider_n == 0 || !(self.cider_sigma > 0.0) {
            return Err(Error::config("CIDEr-D needs n ≥ 1 and sigma > 0"));
        }
        if !(self.penalty_factor > 0.0 && self.penalty_factor <= 1.0) {
            return Err(Error::config("fluency penalty factor must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub item_id: String,
    pub meteor: f64,
    pub cider_d: f64,
    pub spice: Option<f64>,
    pub spider: Option<f64>,
    pub spider_fl: Option<f64>,
    pub fense_similarity: f64,
    pub fense: f64,
    pub flags: FluencyFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub meteor: f64,
    pub cider_d: f64,
    pub spice: f64,
    pub spider: f64,
    pub spider_fl: f64,
    pub fense: f64,
    pub vocab: usize,
    pub n_items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    #[serde(flatten)]
    pub metrics: MetricConfig,
    pub meteor_variant: String,
    pub spice_backend: String,
    pub fense_embedder: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub corpus: CorpusScores,
    pub items: Vec<ItemScores>,
    pub config: ReportConfig,
    pub warnings: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores every item with shared tokenization and fluency flags. A failing
/// SPICE backend drops that item from the SPICE-derived corpus means and
/// adds a warning.
pub fn evaluate(
    corpus: &EvalCorpus,
    cfg: &MetricConfig,
    spice: &dyn SpiceBackend,
    embedder: &dyn TextEmbedder,
    detector: &dyn FluencyDetector,
) -> Result<MetricReport> {
    corpus.validate()?;
    cfg.validate()?;
    let tokenized: Vec<(Vec<String>, Vec<Vec<String>>)> = corpus
        .items
        .iter()
        .map(|it| (tokenize(&it.candidate), it.references.iter().map(|r| tokenize(r)).collect()))
        .collect();
    let cider = cider_d(
        &tokenized,
        CiderConfig {
            n: cfg.cider_n,
            sigma: cfg.cider_sigma,
        },
    );
    let mut warnings = Vec::new();
    let mut items = Vec::with_capacity(corpus.items.len());
    for (i, (it, (cand, refs))) in corpus.items.iter().zip(&tokenized).enumerate() {
        let flags = detector.detect(cand);
        let spice_v = match spice.score(cand, refs) {
            Ok(v) => Some(v),
            Err(e) => {
                warnings.push(format!("{}: {} failed: {e}", it.item_id, spice.name()));
                None
            }
        };
        let spider_v = spice_v.map(|s| spider(cider[i], s));
        let (sim, fense_v) = fense(cand, refs, embedder, &flags, cfg.penalty_factor)?;
        items.push(ItemScores {
            item_id: it.item_id.clone(),
            meteor: meteor_lite(cand, refs),
            cider_d: cider[i],
            spice: spice_v,
            spider: spider_v,
            spider_fl: spider_v.map(|s| apply_fluency_penalty(s, &flags, cfg.penalty_factor)),
            fense_similarity: sim,
            fense: fense_v,
            flags,
        });
    }
    let cands: Vec<&Vec<String>> = tokenized.iter().map(|(c, _)| c).collect();
    let corpus_scores = CorpusScores {
        meteor: mean(items.iter().map(|s| s.meteor)),
        cider_d: mean(items.iter().map(|s| s.cider_d)),
        spice: mean(items.iter().filter_map(|s| s.spice)),
        spider: mean(items.iter().filter_map(|s| s.spider)),
        spider_fl: mean(items.iter().filter_map(|s| s.spider_fl)),
        fense: mean(items.iter().map(|s| s.fense)),
        vocab: cands.iter().flat_map(|c| c.iter()).collect::<BTreeSet<_>>().len(),
        n_items: items.len(),
    };
    Ok(MetricReport {
        corpus: corpus_scores,
        items,
        config: ReportConfig {
            metrics: *cfg,
            meteor_variant: "meteor_lite".into(),
            spice_backend: spice.name().into(),
            fense_embedder: embedder.name().into(),
            extra: BTreeMap::new(),
        },
        warnings,
    })
}
