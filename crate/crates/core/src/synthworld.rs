//! Synthetic acoustic scenes.
//!
//! A scene is a handful of sound events laid out on a frame grid. Each event
//! owns an orthonormal signature vector; rendering a scene sums the
//! signatures of the events active at each frame and adds Gaussian noise.
//! Captions come from a small template grammar, and an indicator-vector
//! embedder stands in for a learned joint audio-text model.

use std::collections::{BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rvq::FeatureSeq;

/// (event name, determiner, noun, verb)
pub const STANDARD_EVENTS: [(&str, &str, &str, &str); 12] = [
    ("dog_barks", "a", "dog", "barks"),
    ("rain_falls", "", "rain", "falls"),
    ("car_passes", "a", "car", "passes"),
    ("bird_chirps", "a", "bird", "chirps"),
    ("baby_cries", "a", "baby", "cries"),
    ("door_slams", "a", "door", "slams"),
    ("engine_idles", "an", "engine", "idles"),
    ("water_flows", "", "water", "flows"),
    ("wind_blows", "the", "wind", "blows"),
    ("people_talk", "", "people", "talk"),
    ("bell_rings", "a", "bell", "rings"),
    ("crowd_cheers", "a", "crowd", "cheers"),
];

const CONNECTIVES: [&str; 4] = ["while", "and", "as", "then"];
const MODIFIERS: [&str; 6] = [
    "loudly",
    "softly",
    "nearby",
    "repeatedly",
    "in the distance",
    "outside",
];
const MODIFIER_PROB: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub name: String,
    pub determiner: String,
    pub noun: String,
    pub verb: String,
}

impl EventSpec {
    pub fn keywords(&self) -> [&str; 2] {
        [&self.noun, &self.verb]
    }

    fn clause(&self) -> String {
        if self.determiner.is_empty() {
            format!("{} {}", self.noun, self.verb)
        } else {
            format!("{} {} {}", self.determiner, self.noun, self.verb)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventVocab {
    pub events: Vec<EventSpec>,
    pub dim: usize,
    /// Row-major `events × dim`, orthonormal rows.
    pub base_vectors: Vec<f64>,
}

impl EventVocab {
    /// The first `n_events` standard events with orthonormal signatures in
    /// `dim` dimensions drawn from `seed`.
    pub fn standard(n_events: usize, dim: usize, seed: u64) -> Result<Self> {
        if n_events == 0 || n_events > STANDARD_EVENTS.len() {
            return Err(Error::config(format!(
                "event count must be in 1..={}, got {n_events}",
                STANDARD_EVENTS.len()
            )));
        }
        let events = STANDARD_EVENTS[..n_events]
            .iter()
            .map(|(name, det, noun, verb)| EventSpec {
                name: name.to_string(),
                determiner: det.to_string(),
                noun: noun.to_string(),
                verb: verb.to_string(),
            })
            .collect();
        EventVocab::new(events, dim, seed)
    }

    pub fn new(events: Vec<EventSpec>, dim: usize, seed: u64) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::config("event vocabulary is empty"));
        }
        if dim < events.len() {
            return Err(Error::config(format!(
                "dimension {dim} too small for {} orthonormal signatures",
                events.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &events {
            for k in e.keywords() {
                if !seen.insert(k.to_string()) {
                    return Err(Error::config(format!("keyword '{k}' shared by two events")));
                }
            }
        }
        let base_vectors = orthonormal_rows(events.len(), dim, seed);
        Ok(EventVocab {
            events,
            dim,
            base_vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn base(&self, event: usize) -> &[f64] {
        &self.base_vectors[event * self.dim..(event + 1) * self.dim]
    }

    /// Dimension of the oracle embeddings: one axis per event plus a null axis.
    pub fn embedding_dim(&self) -> usize {
        self.len() + 1
    }

    pub fn keyword_map(&self) -> HashMap<&str, usize> {
        self.events
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.keywords().into_iter().map(move |k| (k, i)))
            .collect()
    }

    pub fn content_words(&self) -> BTreeSet<String> {
        self.events
            .iter()
            .flat_map(|e| e.keywords().map(str::to_string))
            .collect()
    }

    /// Every word the caption grammar can produce.
    pub fn caption_words(&self) -> BTreeSet<String> {
        let mut words = self.content_words();
        for e in &self.events {
            if !e.determiner.is_empty() {
                words.insert(e.determiner.clone());
            }
        }
        for w in CONNECTIVES.iter().chain(MODIFIERS.iter()) {
            words.extend(w.split_whitespace().map(str::to_string));
        }
        words
    }

    /// Events whose keywords occur in the caption, in vocabulary order.
    pub fn extract_events(&self, caption: &str) -> BTreeSet<usize> {
        let map = self.keyword_map();
        caption
            .split_whitespace()
            .filter_map(|w| map.get(w).copied())
            .collect()
    }
}

fn orthonormal_rows(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        // two passes of Gram-Schmidt for numerical orthogonality
        for _ in 0..2 {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out.concat()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEvent {
    pub event: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub events: Vec<SceneEvent>,
    pub duration_s: f64,
    pub n_frames: usize,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::data("scene duration must be positive"));
        }
        if self.events.is_empty() || self.events.len() > 4 {
            return Err(Error::data(format!(
                "scene must hold 1 to 4 events, holds {}",
                self.events.len()
            )));
        }
        for e in &self.events {
            if e.start >= e.end || e.end > self.n_frames {
                return Err(Error::data(format!(
                    "event span [{}, {}) invalid for {} frames",
                    e.start, e.end, self.n_frames
                )));
            }
        }
        Ok(())
    }

    pub fn event_set(&self) -> BTreeSet<usize> {
        self.events.iter().map(|e| e.event).collect()
    }
}

/// Ranges used when drawing scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frame_rate_hz: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub max_events: usize,
}

impl SceneSpec {
    pub fn new(frame_rate_hz: f64) -> Self {
        SceneSpec {
            frame_rate_hz,
            min_duration_s: 0.5,
            max_duration_s: 40.0,
            max_events: 4,
        }
    }
}

/// Draws a scene: 1 to `max_events` distinct events, each spanning at least a
/// third of the clip.
pub fn sample_scene(vocab: &EventVocab, spec: &SceneSpec, rng: &mut impl Rng) -> Scene {
    let duration_s = rng.random_range(spec.min_duration_s..=spec.max_duration_s);
    let n_frames = ((duration_s * spec.frame_rate_hz).round() as usize).max(1);
    let max_events = spec.max_events.clamp(1, 4).min(vocab.len());
    let count = rng.random_range(1..=max_events);
    let chosen = rand::seq::index::sample(rng, vocab.len(), count).into_vec();
    let events = chosen
        .into_iter()
        .map(|event| {
            let min_span = n_frames.div_ceil(3).max(1);
            let span = rng.random_range(min_span..=n_frames);
            let start = rng.random_range(0..=n_frames - span);
            SceneEvent {
                event,
                start,
                end: start + span,
            }
        })
        .collect();
    Scene {
        events,
        duration_s,
        n_frames,
    }
}

pub fn render_frames(
    scene: &Scene,
    vocab: &EventVocab,
    frame_rate_hz: f64,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> FeatureSeq {
    let mut seq = FeatureSeq::zeros(scene.n_frames, vocab.dim, frame_rate_hz);
    for ev in &scene.events {
        let base = vocab.base(ev.event);
        for t in ev.start..ev.end {
            seq.frame_mut(t).iter_mut().zip(base).for_each(|(x, b)| *x += b);
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        seq.frames.iter_mut().for_each(|x| *x += normal.sample(rng));
    }
    seq
}

/// Reference captions: one clause per event in a shuffled order, joined by
/// connectives, each clause optionally followed by a modifier.
pub fn render_captions(
    scene: &Scene,
    vocab: &EventVocab,
    n_refs: usize,
    rng: &mut impl Rng,
) -> Vec<String> {
    (0..n_refs.max(1))
        .map(|_| {
            let mut order: Vec<usize> = scene.events.iter().map(|e| e.event).collect();
            order.shuffle(rng);
            let mut words = Vec::new();
            for (i, ev) in order.into_iter().enumerate() {
                if i > 0 {
                    words.push(CONNECTIVES.choose(rng).expect("non-empty").to_string());
                }
                words.push(vocab.events[ev].clause());
                if rng.random_bool(MODIFIER_PROB) {
                    words.push(MODIFIERS.choose(rng).expect("non-empty").to_string());
                }
            }
            words.join(" ")
        })
        .collect()
}

/// Unit-norm clip- or caption-level embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqEmbedding {
    pub vector: Vec<f64>,
}

impl SeqEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn dot(&self, other: &SeqEmbedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::input(format!(
                "embedding dimensions differ: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum())
    }

    fn indicator(dim: usize, axes: &BTreeSet<usize>) -> Self {
        let mut vector = vec![0.0; dim];
        let norm = (axes.len() as f64).sqrt();
        for &a in axes {
            vector[a] = 1.0 / norm;
        }
        SeqEmbedding { vector }
    }
}

pub fn oracle_audio_embedding(scene: &Scene, vocab: &EventVocab) -> Result<SeqEmbedding> {
    let events = scene.event_set();
    if events.is_empty() {
        return Err(Error::input("scene has no events to embed"));
    }
    Ok(SeqEmbedding::indicator(vocab.embedding_dim(), &events))
}

/// Indicator of the events mentioned in the caption; a caption mentioning
/// none maps to the null axis, orthogonal to every scene.
pub fn oracle_text_embedding(caption: &str, vocab: &EventVocab) -> SeqEmbedding {
    let mut events = vocab.extract_events(caption);
    if events.is_empty() {
        events.insert(vocab.len());
    }
    SeqEmbedding::indicator(vocab.embedding_dim(), &events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> EventVocab {
        EventVocab::standard(12, 16, 1).unwrap()
    }

    fn scene(events: &[usize], n_frames: usize) -> Scene {
        Scene {
            events: events
                .iter()
                .map(|&event| SceneEvent {
                    event,
                    start: 0,
                    end: n_frames,
                })
                .collect(),
            duration_s: n_frames as f64,
            n_frames,
        }
    }

    #[test]
    fn signatures_are_orthonormal() {
        let v = vocab();
        for i in 0..v.len() {
            for j in 0..v.len() {
                let d: f64 = v.base(i).iter().zip(v.base(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn keyword_collision_rejected() {
        let mut events = vocab().events[..2].to_vec();
        events[1].noun = events[0].noun.clone();
        assert!(EventVocab::new(events, 4, 0).is_err());
        assert!(EventVocab::standard(12, 8, 0).is_err());
    }

    #[test]
    fn single_event_vocab_always_sampled() {
        let v = EventVocab::standard(1, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = sample_scene(&v, &SceneSpec::new(2.0), &mut rng);
            assert_eq!(s.event_set(), BTreeSet::from([0]));
            s.validate().unwrap();
        }
    }

    #[test]
    fn seeded_sampling_repeats() {
        let v = vocab();
        let spec = SceneSpec::new(2.0);
        let a = sample_scene(&v, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_scene(&v, &spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn event_frequencies_near_uniform() {
        let v = vocab();
        let spec = SceneSpec::new(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let mut counts = vec![0usize; v.len()];
        for _ in 0..n {
            let s = sample_scene(&v, &spec, &mut rng);
            s.validate().unwrap();
            for e in s.event_set() {
                counts[e] += 1;
            }
        }
        // inclusion probability: E[#events] / |vocab| with #events ~ U{1..4}
        let p = 2.5 / 12.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (e, &c) in counts.iter().enumerate() {
            assert!((c as f64 - mean).abs() < 5.0 * sigma, "event {e}: {c} vs {mean}");
        }
    }

    #[test]
    fn noiseless_single_event_frames() {
        let v = vocab();
        let s = scene(&[3], 5);
        let seq = render_frames(&s, &v, 2.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(seq.len(), 5);
        assert!(seq.rows().all(|r| r == v.base(3)));
    }

    #[test]
    fn inactive_frames_are_noise_only() {
        let v = vocab();
        let mut s = scene(&[2], 6);
        s.events[0].start = 3;
        let quiet = render_frames(&s, &v, 2.0, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(quiet.frame(0).iter().all(|&x| x == 0.0));
        let noisy = render_frames(&s, &v, 2.0, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(noisy.frame(0).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn overlapping_events_project_to_one() {
        let v = vocab();
        let s = scene(&[0, 5], 40);
        let seq = render_frames(&s, &v, 2.0, 0.01, &mut ChaCha8Rng::seed_from_u64(4));
        for t in 0..seq.len() {
            for e in [0, 5] {
                let proj: f64 = seq.frame(t).iter().zip(v.base(e)).map(|(a, b)| a * b).sum();
                assert!((proj - 1.0).abs() < 0.06, "frame {t} event {e}: {proj}");
            }
            let other: f64 = seq.frame(t).iter().zip(v.base(7)).map(|(a, b)| a * b).sum();
            assert!(other.abs() < 0.06);
        }
    }

    #[test]
    fn captions_contain_all_keywords() {
        let v = vocab();
        let one = render_captions(&scene(&[0], 4), &v, 1, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(one[0].starts_with("a dog barks"), "{}", one[0]);

        let s = scene(&[1, 4, 9], 4);
        let caps = render_captions(&s, &v, 5, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(caps.len(), 5);
        for c in &caps {
            for e in s.event_set() {
                for k in v.events[e].keywords() {
                    assert!(c.split_whitespace().any(|w| w == k), "{c} misses {k}");
                }
            }
        }
    }

    #[test]
    fn audio_embedding_geometry() {
        let v = vocab();
        let e1 = oracle_audio_embedding(&scene(&[1], 3), &v).unwrap();
        let mut axis = vec![0.0; 13];
        axis[1] = 1.0;
        assert_eq!(e1.vector, axis);

        let e12 = oracle_audio_embedding(&scene(&[1, 2], 3), &v).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert_eq!(&e12.vector[..3], &[0.0, h, h]);
        assert!((e12.dot(&e1).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);

        let empty = Scene {
            events: vec![],
            duration_s: 1.0,
            n_frames: 2,
        };
        assert!(matches!(oracle_audio_embedding(&empty, &v), Err(Error::Input(_))));
    }

    #[test]
    fn text_embedding_cases() {
        let v = vocab();
        let audio = oracle_audio_embedding(&scene(&[0, 1], 3), &v).unwrap();
        assert_eq!(oracle_text_embedding("a dog barks while rain falls", &v), audio);

        let null = oracle_text_embedding("something happens", &v);
        for e in 0..v.len() {
            let s = oracle_audio_embedding(&scene(&[e], 3), &v).unwrap();
            assert_eq!(null.dot(&s).unwrap(), 0.0);
        }
        let norm: f64 = null.vector.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn paraphrases_share_embedding() {
        let v = vocab();
        let s = scene(&[2, 6, 10], 4);
        let caps = render_captions(&s, &v, 40, &mut ChaCha8Rng::seed_from_u64(8));
        let distinct: BTreeSet<_> = caps.iter().collect();
        assert!(distinct.len() > 5);
        let first = oracle_text_embedding(&caps[0], &v);
        assert!(caps.iter().all(|c| oracle_text_embedding(c, &v) == first));
    }

    proptest! {
        #[test]
        fn caption_round_trip_preserves_events(seed in 0u64..5000) {
            let v = vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_scene(&v, &SceneSpec::new(2.0), &mut rng);
            for c in render_captions(&s, &v, 3, &mut rng) {
                prop_assert_eq!(v.extract_events(&c), s.event_set());
            }
        }

        #[test]
        fn retrieval_prefers_correct_caption(seed in 0u64..5000, wrong in 0usize..12) {
            let v = vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_scene(&v, &SceneSpec::new(2.0), &mut rng);
            let audio = oracle_audio_embedding(&s, &v).unwrap();
            let good = render_captions(&s, &v, 1, &mut rng).remove(0);
            // swap one event for another (or add one if it is already present)
            let mut bad_scene = s.clone();
            if s.event_set().contains(&wrong) {
                let extra = (0..12).find(|e| !s.event_set().contains(e)).unwrap();
                bad_scene.events.push(SceneEvent { event: extra, start: 0, end: 1 });
                bad_scene.events.retain(|e| e.event != wrong);
            } else {
                bad_scene.events[0].event = wrong;
            }
            let bad = render_captions(&bad_scene, &v, 1, &mut rng).remove(0);
            let g = audio.dot(&oracle_text_embedding(&good, &v)).unwrap();
            let b = audio.dot(&oracle_text_embedding(&bad, &v)).unwrap();
            prop_assert!(g > b, "{good} {g} vs {bad} {b}");
        }
    }
}
