//! Fluency filtering and encoder / decoder / hybrid reranking.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{EventVocab, SeqEmbedding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluencyFlag {
    RepeatedNgram,
    IncompleteEnding,
    TooShort,
    NoContentWord,
}

pub type FluencyFlags = BTreeSet<FluencyFlag>;

pub trait FluencyDetector: Sync {
    fn detect(&self, tokens: &[String]) -> FluencyFlags;
}

/// Articles, conjunctions and prepositions that cannot end a caption.
pub const DANGLING_WORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "while", "as", "then", "of", "in", "on", "at", "to", "with", "from",
    "by", "for", "into", "onto", "over", "under", "near", "through",
];

pub const MIN_TOKENS: usize = 3;

/// Rule-based stand-in for a learned fluency classifier.
#[derive(Clone, Debug)]
pub struct RuleDetector {
    content_words: BTreeSet<String>,
    dangling: BTreeSet<String>,
}

impl RuleDetector {
    pub fn new<I, S>(content_words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        RuleDetector {
            content_words: content_words.into_iter().map(Into::into).collect(),
            dangling: DANGLING_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn from_vocab(vocab: &EventVocab) -> Self {
        Self::new(vocab.content_words())
    }

    pub fn detect_text(&self, caption: &str) -> FluencyFlags {
        let toks: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
        self.detect(&toks)
    }
}

/// True when some n-gram (n ≤ 4) occurs three times in a row.
pub fn has_repeated_ngram(tokens: &[String]) -> bool {
    (1..=4).any(|n| {
        tokens.len() >= 3 * n
            && (0..=tokens.len() - 3 * n)
                .any(|i| tokens[i..i + n] == tokens[i + n..i + 2 * n] && tokens[i..i + n] == tokens[i + 2 * n..i + 3 * n])
    })
}

impl FluencyDetector for RuleDetector {
    fn detect(&self, tokens: &[String]) -> FluencyFlags {
        let mut flags = FluencyFlags::new();
        if has_repeated_ngram(tokens) {
            flags.insert(FluencyFlag::RepeatedNgram);
        }
        if tokens.last().is_some_and(|t| self.dangling.contains(t)) {
            flags.insert(FluencyFlag::IncompleteEnding);
        }
        if tokens.len() < MIN_TOKENS {
            flags.insert(FluencyFlag::TooShort);
        }
        if !tokens.iter().any(|t| self.content_words.contains(t)) {
            flags.insert(FluencyFlag::NoContentWord);
        }
        flags
    }
}

/// Cosine of two unit embeddings; an all-zero text embedding scores 0.
pub fn encoder_score(audio: &SeqEmbedding, text: &SeqEmbedding) -> Result<f64> {
    let d = audio.dot(text)?;
    if text.vector.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    Ok(d)
}

/// Mean per-token log-probability under teacher forcing.
pub fn decoder_score(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::input("cannot score an empty caption"));
    }
    Ok(token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankMode {
    Encoder,
    Decoder,
    Hybrid,
    BeamPassthrough,
}

impl std::str::FromStr for RerankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(RerankMode::Encoder),
            "decoder" => Ok(RerankMode::Decoder),
            "hybrid" => Ok(RerankMode::Hybrid),
            "beam_passthrough" => Ok(RerankMode::BeamPassthrough),
            other => Err(Error::config(format!("unknown rerank mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankWeights {
    pub w_enc: f64,
    pub w_dec: f64,
}

impl Default for RerankWeights {
    fn default() -> Self {
        RerankWeights { w_enc: 0.6, w_dec: 0.4 }
    }
}

impl RerankWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_enc < 0.0 || self.w_dec < 0.0 || (self.w_enc + self.w_dec - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "rerank weights must be non-negative and sum to 1, got ({}, {})",
                self.w_enc, self.w_dec
            )));
        }
        Ok(())
    }
}

/// A candidate with its raw scores, ready for ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub tokens: Vec<String>,
    pub encoder_score: f64,
    pub decoder_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankScores {
    pub encoder_score: f64,
    pub decoder_score: f64,
    pub encoder_norm: f64,
    pub decoder_norm: f64,
    pub hybrid: f64,
    pub fluency_flags: FluencyFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub tokens: Vec<String>,
    pub scores: RerankScores,
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Dedups, filters flagged candidates, normalizes each raw score over the
/// survivors and orders them by the mode's score. If every candidate is
/// flagged, the one with the best decoder score is kept.
pub fn rank(
    candidates: &[ScoredCandidate],
    detector: &dyn FluencyDetector,
    weights: RerankWeights,
    mode: RerankMode,
) -> Result<Vec<Ranked>> {
    if candidates.is_empty() {
        return Err(Error::input("no candidates to rank"));
    }
    weights.validate()?;
    let mut unique: Vec<(&ScoredCandidate, FluencyFlags)> = Vec::new();
    for c in candidates {
        if !unique.iter().any(|(u, _)| u.tokens == c.tokens) {
            unique.push((c, detector.detect(&c.tokens)));
        }
    }
    let clean: Vec<_> = unique.iter().filter(|(_, f)| f.is_empty()).cloned().collect();
    let survivors = if clean.is_empty() {
        let best = unique
            .iter()
            .min_by(|a, b| tie_break(a.0, b.0))
            .cloned()
            .expect("non-empty");
        vec![best]
    } else {
        clean
    };

    let enc = min_max(&survivors.iter().map(|(c, _)| c.encoder_score).collect::<Vec<_>>());
    let dec = min_max(&survivors.iter().map(|(c, _)| c.decoder_score).collect::<Vec<_>>());
    let mut ranked: Vec<Ranked> = survivors
        .into_iter()
        .enumerate()
        .map(|(i, (c, flags))| Ranked {
            tokens: c.tokens.clone(),
            scores: RerankScores {
                encoder_score: c.encoder_score,
                decoder_score: c.decoder_score,
                encoder_norm: enc[i],
                decoder_norm: dec[i],
                hybrid: weights.w_enc * enc[i] + weights.w_dec * dec[i],
                fluency_flags: flags,
            },
        })
        .collect();

    let key = |r: &Ranked| match mode {
        RerankMode::Encoder => r.scores.encoder_norm,
        RerankMode::Decoder => r.scores.decoder_norm,
        RerankMode::Hybrid => r.scores.hybrid,
        RerankMode::BeamPassthrough => 0.0,
    };
    if mode != RerankMode::BeamPassthrough {
        ranked.sort_by(|a, b| {
            key(b)
                .partial_cmp(&key(a))
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    b.scores
                        .decoder_score
                        .partial_cmp(&a.scores.decoder_score)
                        .unwrap_or(Ordering::Equal)
                })
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
    }
    Ok(ranked)
}

fn tie_break(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.decoder_score
        .partial_cmp(&a.decoder_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// One line of a ranked-candidates JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedRecord {
    pub item_id: String,
    pub rank: usize,
    pub tokens: Vec<String>,
    pub encoder_score: f64,
    pub decoder_score: f64,
    pub encoder_norm: f64,
    pub decoder_norm: f64,
    pub hybrid: f64,
    pub flags: FluencyFlags,
    pub mode: RerankMode,
    #[serde(default)]
    pub config_hash: String,
}

impl RankedRecord {
    pub fn new(item_id: &str, rank: usize, r: &Ranked, mode: RerankMode, config_hash: &str) -> Self {
        RankedRecord {
            item_id: item_id.to_string(),
            rank,
            tokens: r.tokens.clone(),
            encoder_score: r.scores.encoder_score,
            decoder_score: r.scores.decoder_score,
            encoder_norm: r.scores.encoder_norm,
            decoder_norm: r.scores.decoder_norm,
            hybrid: r.scores.hybrid,
            flags: r.scores.fluency_flags.clone(),
            mode,
            config_hash: config_hash.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn detector() -> RuleDetector {
        RuleDetector::new(["dog", "barks", "rain", "falls", "roof", "bird", "chirps", "car", "passes"])
    }

    fn cand(s: &str, enc: f64, dec: f64) -> ScoredCandidate {
        ScoredCandidate {
            tokens: toks(s),
            encoder_score: enc,
            decoder_score: dec,
        }
    }

    /// Flags looked up by caption, for driving the filter directly.
    struct Table(BTreeMap<Vec<String>, FluencyFlags>);

    impl FluencyDetector for Table {
        fn detect(&self, tokens: &[String]) -> FluencyFlags {
            self.0.get(tokens).cloned().unwrap_or_default()
        }
    }

    #[test]
    fn rule_examples() {
        let d = detector();
        assert_eq!(d.detect_text("a dog barks barks barks"), [FluencyFlag::RepeatedNgram].into());
        assert_eq!(
            d.detect_text("sound of a"),
            [FluencyFlag::IncompleteEnding, FluencyFlag::NoContentWord].into()
        );
        assert!(d.detect_text("rain falls on a roof").is_empty());
        assert_eq!(
            d.detect_text("dog"),
            [FluencyFlag::TooShort].into()
        );
        assert!(d.detect_text("a dog barks and a dog barks").is_empty());
        assert!(has_repeated_ngram(&toks("x a b a b a b")));
        assert!(!has_repeated_ngram(&toks("a b c d a b c d")));
    }

    #[test]
    fn encoder_score_cases() {
        let e = |v: &[f64]| SeqEmbedding { vector: v.to_vec() };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(encoder_score(&e(&[1.0, 0.0, 0.0]), &e(&[1.0, 0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(encoder_score(&e(&[1.0, 0.0, 0.0]), &e(&[0.0, 1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(encoder_score(&e(&[1.0, 0.0]), &e(&[0.0, 0.0])).unwrap(), 0.0);
        assert!((encoder_score(&e(&[s, s, 0.0]), &e(&[1.0, 0.0, 0.0])).unwrap() - s).abs() < 1e-12);
        assert!(matches!(encoder_score(&e(&[1.0]), &e(&[1.0, 0.0])), Err(Error::Input(_))));
    }

    #[test]
    fn encoder_score_on_world_geometry() {
        let vocab = EventVocab::standard(12, 16, 1).unwrap();
        let scene = crate::synthworld::Scene {
            events: vec![
                crate::synthworld::SceneEvent { event: 0, start: 0, end: 4 },
                crate::synthworld::SceneEvent { event: 1, start: 2, end: 6 },
            ],
            duration_s: 3.0,
            n_frames: 6,
        };
        let audio = crate::synthworld::oracle_audio_embedding(&scene, &vocab).unwrap();
        let text = crate::synthworld::oracle_text_embedding("a dog barks loudly", &vocab);
        let got = encoder_score(&audio, &text).unwrap();
        assert!((got - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((got - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn decoder_score_cases() {
        assert_eq!(decoder_score(&[0.0, 0.0]).unwrap(), 0.0);
        let got = decoder_score(&[0.5f64.ln(), 0.25f64.ln()]).unwrap();
        assert!((got - (-1.03972)).abs() < 1e-5);
        assert!(matches!(decoder_score(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn hybrid_hand_fixture() {
        // raw scores chosen so the normalized pairs are (1,0), (0,1), (0.5,0.8)
        let cs = vec![
            cand("a dog barks c1", 0.9, -3.0),
            cand("a dog barks c2", 0.1, -1.0),
            cand("a dog barks c3", 0.5, -1.4),
        ];
        let r = rank(&cs, &detector(), RerankWeights::default(), RerankMode::Hybrid).unwrap();
        let order: Vec<&str> = r.iter().map(|x| x.tokens[3].as_str()).collect();
        assert_eq!(order, ["c3", "c1", "c2"]);
        let h: Vec<f64> = r.iter().map(|x| x.scores.hybrid).collect();
        assert!((h[0] - 0.62).abs() < 1e-9 && (h[1] - 0.6).abs() < 1e-9 && (h[2] - 0.4).abs() < 1e-9);
    }

    #[test]
    fn pure_weights_reproduce_single_score_orderings() {
        let cs: Vec<_> = (0..6)
            .map(|i| cand(&format!("a dog barks n{i}"), ((i * 7) % 5) as f64 * 0.1, -((i * 3) % 4) as f64 - 0.1 * i as f64))
            .collect();
        let d = detector();
        let by = |w: RerankWeights, m| -> Vec<Vec<String>> {
            rank(&cs, &d, w, m).unwrap().into_iter().map(|r| r.tokens).collect()
        };
        let enc_w = RerankWeights { w_enc: 1.0, w_dec: 0.0 };
        let dec_w = RerankWeights { w_enc: 0.0, w_dec: 1.0 };
        assert_eq!(by(enc_w, RerankMode::Hybrid), by(enc_w, RerankMode::Encoder));
        assert_eq!(by(dec_w, RerankMode::Hybrid), by(dec_w, RerankMode::Decoder));
        let enc_order = by(enc_w, RerankMode::Hybrid);
        for w in enc_order.windows(2) {
            let a = cs.iter().find(|c| c.tokens == w[0]).unwrap();
            let b = cs.iter().find(|c| c.tokens == w[1]).unwrap();
            assert!(a.encoder_score >= b.encoder_score);
        }
    }

    #[test]
    fn passthrough_keeps_order_after_filter_and_dedup() {
        let cs = vec![
            cand("a bird chirps", 0.0, -2.0),
            cand("sound of a", 1.0, -0.1),
            cand("a car passes", 0.5, -1.0),
            cand("a bird chirps", 0.0, -2.0),
        ];
        let r = rank(&cs, &detector(), RerankWeights::default(), RerankMode::BeamPassthrough).unwrap();
        let got: Vec<String> = r.iter().map(|x| x.tokens.join(" ")).collect();
        assert_eq!(got, ["a bird chirps", "a car passes"]);
    }

    #[test]
    fn constant_column_normalizes_to_half_and_single_candidate_survives() {
        let cs = vec![cand("a dog barks", 0.3, -1.0), cand("rain falls softly", 0.3, -2.0)];
        let r = rank(&cs, &detector(), RerankWeights::default(), RerankMode::Encoder).unwrap();
        assert!(r.iter().all(|x| x.scores.encoder_norm == 0.5));
        // tie on encoder broken by decoder score
        assert_eq!(r[0].tokens, toks("a dog barks"));
        for mode in [RerankMode::Encoder, RerankMode::Decoder, RerankMode::Hybrid, RerankMode::BeamPassthrough] {
            let one = rank(&cs[..1], &detector(), RerankWeights::default(), mode).unwrap();
            assert_eq!(one.len(), 1);
            assert_eq!(one[0].tokens, cs[0].tokens);
        }
    }

    #[test]
    fn affine_transform_of_a_column_keeps_hybrid_order() {
        let cs = vec![
            cand("a dog barks", 0.2, -1.5),
            cand("a car passes", 0.8, -2.5),
            cand("rain falls softly", 0.4, -1.0),
        ];
        let moved: Vec<_> = cs
            .iter()
            .map(|c| ScoredCandidate {
                decoder_score: 3.0 * c.decoder_score + 7.0,
                ..c.clone()
            })
            .collect();
        let d = detector();
        let a = rank(&cs, &d, RerankWeights::default(), RerankMode::Hybrid).unwrap();
        let b = rank(&moved, &d, RerankWeights::default(), RerankMode::Hybrid).unwrap();
        assert_eq!(
            a.iter().map(|r| &r.tokens).collect::<Vec<_>>(),
            b.iter().map(|r| &r.tokens).collect::<Vec<_>>()
        );
    }

    #[test]
    fn errors() {
        let d = detector();
        assert!(matches!(
            rank(&[], &d, RerankWeights::default(), RerankMode::Hybrid),
            Err(Error::Input(_))
        ));
        let bad = RerankWeights { w_enc: 0.7, w_dec: 0.4 };
        assert!(matches!(
            rank(&[cand("a dog barks", 0.0, 0.0)], &d, bad, RerankMode::Hybrid),
            Err(Error::Config(_))
        ));
        assert!("nope".parse::<RerankMode>().is_err());
        assert_eq!("beam_passthrough".parse::<RerankMode>().unwrap(), RerankMode::BeamPassthrough);
    }

    proptest! {
        #[test]
        fn filter_never_empties(
            flags in proptest::collection::vec(0u8..16, 1..12),
            scores in proptest::collection::vec((-1.0f64..1.0, -5.0f64..0.0), 12),
            mode_ix in 0usize..4,
        ) {
            let all = [FluencyFlag::RepeatedNgram, FluencyFlag::IncompleteEnding, FluencyFlag::TooShort, FluencyFlag::NoContentWord];
            let mut table = BTreeMap::new();
            let mut cs = Vec::new();
            for (i, &bits) in flags.iter().enumerate() {
                let c = cand(&format!("c{}", i % 7), scores[i].0, scores[i].1);
                let set: FluencyFlags = all.iter().enumerate().filter(|(b, _)| bits >> b & 1 == 1).map(|(_, f)| *f).collect();
                table.entry(c.tokens.clone()).or_insert(set);
                cs.push(c);
            }
            let mode = [RerankMode::Encoder, RerankMode::Decoder, RerankMode::Hybrid, RerankMode::BeamPassthrough][mode_ix];
            let det = Table(table.clone());
            let out = rank(&cs, &det, RerankWeights::default(), mode).unwrap();
            prop_assert!(!out.is_empty());
            let distinct: BTreeSet<_> = out.iter().map(|r| r.tokens.clone()).collect();
            prop_assert_eq!(distinct.len(), out.len());
            for r in &out {
                prop_assert!(cs.iter().any(|c| c.tokens == r.tokens));
                prop_assert!((0.0..=1.0).contains(&r.scores.encoder_norm));
                prop_assert!((0.0..=1.0).contains(&r.scores.decoder_norm));
            }
            let clean = table.values().filter(|f| f.is_empty()).count();
            if clean == 0 {
                prop_assert_eq!(out.len(), 1);
                let first_seen = |t: &Vec<String>| cs.iter().find(|c| &c.tokens == t).unwrap().decoder_score;
                let best = table.keys().map(first_seen).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(out[0].scores.decoder_score, best);
            } else {
                prop_assert_eq!(out.len(), clean);
                prop_assert!(out.iter().all(|r| r.scores.fluency_flags.is_empty()));
            }
        }
    }
}
