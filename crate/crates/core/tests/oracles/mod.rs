//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense tf-idf CIDEr-D: explicit n-gram dictionary, one dense vector per
/// sentence, per-reference count clipping, Gaussian length penalty.
pub fn cider_dense(items: &[(Vec<String>, Vec<Vec<String>>)], n_max: usize, sigma: f64) -> Vec<f64> {
    let n_items = items.len() as f64;
    let mut scores = vec![0.0; items.len()];
    for n in 1..=n_max {
        let grams = |s: &[String]| -> Vec<Vec<String>> {
            if s.len() < n {
                vec![]
            } else {
                (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
            }
        };
        let mut dict: Vec<Vec<String>> = Vec::new();
        for (c, refs) in items {
            dict.extend(grams(c));
            for r in refs {
                dict.extend(grams(r));
            }
        }
        dict.sort();
        dict.dedup();
        let idf: Vec<f64> = dict
            .iter()
            .map(|g| {
                let df = items
                    .iter()
                    .filter(|(_, refs)| refs.iter().any(|r| grams(r).contains(g)))
                    .count();
                n_items.ln() - (df.max(1) as f64).ln()
            })
            .collect();
        let dense = |s: &[String]| -> Vec<f64> {
            let gs = grams(s);
            dict.iter()
                .zip(&idf)
                .map(|(g, w)| gs.iter().filter(|x| *x == g).count() as f64 * w)
                .collect()
        };
        for (i, (c, refs)) in items.iter().enumerate() {
            let h = dense(c);
            let hn = h.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in refs {
                let rv = dense(r);
                let rn = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = h.iter().zip(&rv).map(|(a, b)| a.min(*b) * b).sum();
                let cos = if hn == 0.0 || rn == 0.0 { 0.0 } else { dot / (hn * rn) };
                let d = c.len() as f64 - r.len() as f64;
                acc += cos * (-d * d / (2.0 * sigma * sigma)).exp();
            }
            scores[i] += acc / refs.len() as f64;
        }
    }
    scores.iter().map(|s| 10.0 * s / n_max as f64).collect()
}

/// Random corpus: up to 10 items, up to 8 tokens per sentence, drawn from a
/// small alphabet so n-grams recur.
pub fn random_corpus(seed: u64) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["a", "dog", "barks", "rain", "falls", "the", "car", "loudly"];
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(0..=8);
        (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let n_items = rng.random_range(1..=10);
    (0..n_items)
        .map(|_| {
            let cand = sentence(&mut rng);
            let n_refs = rng.random_range(1..=5);
            let refs = (0..n_refs).map(|_| sentence(&mut rng)).collect();
            (cand, refs)
        })
        .collect()
}

/// Pearson χ² statistic of observed counts against expected probabilities.
pub fn chi_squared(observed: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = observed.iter().sum();
    observed
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}
