//! Manifest files and the dataset preprocessing rules: duration filtering,
//! removal of clips that overlap an evaluation set, and seeded splits.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_DURATION_S: f64 = 1.0;
pub const DEFAULT_MAX_DURATION_S: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub duration_s: f64,
    pub codec_path: String,
    pub captions: Vec<String>,
    pub split: Split,
}

impl ManifestEntry {
    fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::data(format!(
                "entry '{}' has non-positive duration {}",
                self.id, self.duration_s
            )));
        }
        if self.captions.is_empty() {
            return Err(Error::data(format!("entry '{}' has no captions", self.id)));
        }
        Ok(())
    }
}

/// Reads a JSONL manifest, preserving line order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path)?);
    parse_manifest(reader)
}

pub fn parse_manifest(reader: impl BufRead) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        entry.validate()?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::data(format!("duplicate id '{}' at line {}", entry.id, i + 1)));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn save_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut seen = HashSet::new();
    if let Some(dup) = entries.iter().find(|e| !seen.insert(e.id.as_str())) {
        return Err(Error::data(format!("duplicate id '{}'", dup.id)));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Newline-delimited ids; blank lines and `#` comments are ignored.
pub fn load_blocklist(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut ids = HashSet::new();
    for line in reader.lines() {
        let line = line?;
        let id = line.trim();
        if !id.is_empty() && !id.starts_with('#') {
            ids.insert(id.to_string());
        }
    }
    Ok(ids)
}

/// Keeps entries whose duration lies in `[min_s, max_s]`, bounds inclusive.
pub fn filter_duration(entries: &[ManifestEntry], min_s: f64, max_s: f64) -> Result<Vec<ManifestEntry>> {
    if min_s > max_s {
        return Err(Error::config(format!(
            "duration bounds reversed: min {min_s} > max {max_s}"
        )));
    }
    Ok(entries
        .iter()
        .filter(|e| e.duration_s >= min_s && e.duration_s <= max_s)
        .cloned()
        .collect())
}

/// Drops entries whose id is in the blocklist, keeping the original order.
pub fn dedup_against(entries: &[ManifestEntry], blocklist: &HashSet<String>) -> Vec<ManifestEntry> {
    entries
        .iter()
        .filter(|e| !blocklist.contains(&e.id))
        .cloned()
        .collect()
}

/// Split sizes by the largest-remainder rule; ties go to the earlier split.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::config(format!("split fractions out of range: {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions sum to {sum}, not 1")));
    }
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        *s = q.floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Assigns train/valid/test labels to a seeded permutation of the entries.
/// Output keeps the input order.
pub fn make_splits(entries: &[ManifestEntry], fractions: [f64; 3], seed: u64) -> Result<Vec<ManifestEntry>> {
    let sizes = split_sizes(entries.len(), fractions)?;
    let mut perm: Vec<usize> = (0..entries.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![Split::Train; entries.len()];
    for (rank, &i) in perm.iter().enumerate() {
        labels[i] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(entries
        .iter()
        .zip(labels)
        .map(|(e, split)| ManifestEntry { split, ..e.clone() })
        .collect())
}
