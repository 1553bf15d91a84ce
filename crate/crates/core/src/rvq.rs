//! Residual vector quantization over real-valued feature frames.
//!
//! A codec holds `n_q` codebooks of `K` centroids each. Level `q` quantizes
//! whatever is left after subtracting the centroids selected at levels
//! `0..q`, so a frame becomes a column of `n_q` indices and decodes back to
//! the sum of the selected centroids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const KMEANS_MAX_ITERS: usize = 25;
const KMEANS_REL_TOL: f64 = 1e-6;

/// A `T × d` sequence of feature frames stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeq {
    pub dim: usize,
    pub frame_rate_hz: f64,
    pub frames: Vec<f64>,
}

impl FeatureSeq {
    pub fn new(dim: usize, frame_rate_hz: f64, frames: Vec<f64>) -> Result<Self> {
        let seq = FeatureSeq {
            dim,
            frame_rate_hz,
            frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn zeros(len: usize, dim: usize, frame_rate_hz: f64) -> Self {
        FeatureSeq {
            dim,
            frame_rate_hz,
            frames: vec![0.0; len * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_rate_hz: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("frames have inconsistent dimensions"));
        }
        FeatureSeq::new(dim, frame_rate_hz, rows.concat())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate_hz > 0.0) {
            return Err(Error::input(format!(
                "frame rate must be positive, got {}",
                self.frame_rate_hz
            )));
        }
        if self.dim == 0 && !self.frames.is_empty() {
            return Err(Error::input("frames present but dimension is zero"));
        }
        if self.dim > 0 && self.frames.len() % self.dim != 0 {
            return Err(Error::input(format!(
                "{} values do not form whole frames of dimension {}",
                self.frames.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.frames.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.frames[t * d..(t + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.frames.chunks_exact(self.dim.max(1))
    }
}

/// Shape of a codec: level count, codebook size, frame dimension and rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub n_q: usize,
    pub codebook_size: usize,
    pub dim: usize,
    pub frame_rate_hz: f64,
}

/// Named codec shapes. The EnCodec/DAC-shaped presets mirror the published
/// configurations; `desk` is the small shape used for CPU-scale experiments.
pub const PRESET_NAMES: [&str; 5] = ["encodec16", "encodec8", "encodec32", "dac32", "desk"];

impl CodecConfig {
    pub fn preset(name: &str, dim: usize) -> Result<Self> {
        let (n_q, codebook_size, frame_rate_hz) = match name {
            "encodec16" => (16, 1024, 75.0),
            "encodec8" => (8, 1024, 75.0),
            "encodec32" => (32, 1024, 75.0),
            "dac32" => (32, 1024, 75.0),
            "desk" => (4, 64, 2.0),
            other => {
                return Err(Error::config(format!(
                    "unknown codec preset '{other}' (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        let cfg = CodecConfig {
            n_q,
            codebook_size,
            dim,
            frame_rate_hz,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=64).contains(&self.n_q) {
            return Err(Error::config(format!("n_q must be in 1..=64, got {}", self.n_q)));
        }
        if self.codebook_size == 0 {
            return Err(Error::config("codebook size must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("frame dimension must be at least 1"));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(Error::config("frame rate must be positive"));
        }
        Ok(())
    }
}

/// Fitted residual quantizer. `codebooks[q]` is a row-major `K × d` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvqCodec {
    pub config: CodecConfig,
    pub codebooks: Vec<Vec<f64>>,
}

/// `n_q × T` code indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecGrid {
    pub n_q: usize,
    #[serde(rename = "T")]
    pub len: usize,
    pub codes: Vec<Vec<u32>>,
}

impl CodecGrid {
    pub fn new(codes: Vec<Vec<u32>>) -> Result<Self> {
        let n_q = codes.len();
        let len = codes.first().map_or(0, Vec::len);
        if codes.iter().any(|row| row.len() != len) {
            return Err(Error::data("code rows have different lengths"));
        }
        Ok(CodecGrid { n_q, len, codes })
    }

    /// Checks shape consistency and that every index is below `bound`.
    pub fn validate(&self, bound: usize) -> Result<()> {
        if self.codes.len() != self.n_q {
            return Err(Error::data(format!(
                "grid declares {} rows but holds {}",
                self.n_q,
                self.codes.len()
            )));
        }
        for (q, row) in self.codes.iter().enumerate() {
            if row.len() != self.len {
                return Err(Error::data(format!(
                    "row {q} has length {} (expected {})",
                    row.len(),
                    self.len
                )));
            }
            if let Some(&bad) = row.iter().find(|&&c| c as usize >= bound) {
                return Err(Error::data(format!(
                    "code {bad} in row {q} out of range [0, {bound})"
                )));
            }
        }
        Ok(())
    }

    pub fn column(&self, t: usize) -> Vec<u32> {
        self.codes.iter().map(|row| row[t]).collect()
    }
}

/// One line of a codec-grid JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub id: String,
    #[serde(flatten)]
    pub grid: CodecGrid,
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest row of `centroids` (row-major, `dim` wide) to `x`.
/// Ties resolve to the lowest index.
pub fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Returns row-major centroids.
///
/// Stops after a fixed number of iterations or when the relative decrease of
/// the within-cluster sum of squares falls below `1e-6`. Clusters that end up
/// empty are reseeded with the point farthest from its current centroid.
pub fn kmeans(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = points.len() / dim;
    if n == 0 {
        return Err(Error::input("k-means needs at least one point"));
    }
    if n < k {
        return Err(Error::config(format!(
            "k-means needs at least K={k} points, got {n}"
        )));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = kmeanspp_init(points, dim, k, rng);
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut prev_sse = f64::INFINITY;

    for _ in 0..KMEANS_MAX_ITERS {
        let nearest_all: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(&centroids, dim, point(i)))
            .collect();
        let mut sse = 0.0;
        for (i, (c, d)) in nearest_all.into_iter().enumerate() {
            assign[i] = c;
            dist[i] = d;
            sse += d;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its centroid; claimed so the next empty
                // cluster picks a different one
                let (far, _) = dist
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(far));
                dist[far] = f64::NEG_INFINITY;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }

        if prev_sse.is_finite() && prev_sse - sse <= KMEANS_REL_TOL * prev_sse {
            break;
        }
        prev_sse = sse;
    }
    Ok(centroids)
}

fn kmeanspp_init(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = point(chosen).to_vec();
        for (i, slot) in d2.iter_mut().enumerate() {
            let d = sq_dist(point(i), &c);
            if d < *slot {
                *slot = d;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Seed for the k-means run of one level; independent of `n_q` so that codecs
/// of different depth fitted with the same seed share their leading levels.
fn level_seed(seed: u64, level: usize) -> u64 {
    seed ^ (level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits the codebooks greedily: level `q` runs k-means on the residuals left
/// by levels `0..q`.
pub fn fit_rvq(corpus: &[FeatureSeq], config: &CodecConfig, seed: u64) -> Result<RvqCodec> {
    config.validate()?;
    let total: usize = corpus.iter().map(FeatureSeq::len).sum();
    if corpus.is_empty() || total == 0 {
        return Err(Error::input("cannot fit a codec on an empty corpus"));
    }
    if let Some(bad) = corpus.iter().find(|s| !s.is_empty() && s.dim != config.dim) {
        return Err(Error::input(format!(
            "corpus frame dimension {} does not match codec dimension {}",
            bad.dim, config.dim
        )));
    }
    if total < config.codebook_size {
        return Err(Error::config(format!(
            "corpus has {total} frames, fewer than codebook size {}",
            config.codebook_size
        )));
    }

    let dim = config.dim;
    let mut residuals: Vec<f64> = corpus.iter().flat_map(|s| s.frames.iter().copied()).collect();
    let mut codebooks = Vec::with_capacity(config.n_q);
    for level in 0..config.n_q {
        let mut rng = ChaCha8Rng::seed_from_u64(level_seed(seed, level));
        let book = kmeans(&residuals, dim, config.codebook_size, &mut rng)?;
        residuals.par_chunks_exact_mut(dim).for_each(|r| {
            let (c, _) = nearest(&book, dim, r);
            for (x, y) in r.iter_mut().zip(&book[c * dim..(c + 1) * dim]) {
                *x -= y;
            }
        });
        log::debug!("rvq level {level} fitted");
        codebooks.push(book);
    }
    Ok(RvqCodec {
        config: config.clone(),
        codebooks,
    })
}

impl RvqCodec {
    pub fn from_codebooks(config: CodecConfig, codebooks: Vec<Vec<f64>>) -> Result<Self> {
        let codec = RvqCodec { config, codebooks };
        codec.validate()?;
        Ok(codec)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.codebooks.len() != self.config.n_q {
            return Err(Error::data(format!(
                "codec declares {} levels but holds {}",
                self.config.n_q,
                self.codebooks.len()
            )));
        }
        let want = self.config.codebook_size * self.config.dim;
        if let Some(q) = self.codebooks.iter().position(|b| b.len() != want) {
            return Err(Error::data(format!(
                "codebook {q} does not hold {} centroids of dimension {}",
                self.config.codebook_size, self.config.dim
            )));
        }
        Ok(())
    }

    pub fn n_q(&self) -> usize {
        self.config.n_q
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn centroid(&self, level: usize, index: usize) -> &[f64] {
        let d = self.config.dim;
        &self.codebooks[level][index * d..(index + 1) * d]
    }

    /// Keeps only the first `n_q` levels.
    pub fn truncated(&self, n_q: usize) -> Result<Self> {
        if n_q == 0 || n_q > self.n_q() {
            return Err(Error::config(format!(
                "cannot truncate a {}-level codec to {n_q} levels",
                self.n_q()
            )));
        }
        let mut config = self.config.clone();
        config.n_q = n_q;
        Ok(RvqCodec {
            config,
            codebooks: self.codebooks[..n_q].to_vec(),
        })
    }

    pub fn encode(&self, seq: &FeatureSeq) -> Result<CodecGrid> {
        if !seq.is_empty() && seq.dim != self.config.dim {
            return Err(Error::input(format!(
                "frame dimension {} does not match codec dimension {}",
                seq.dim, self.config.dim
            )));
        }
        let dim = self.config.dim;
        let t_len = seq.len();
        let mut codes = vec![vec![0u32; t_len]; self.n_q()];
        let mut residual = vec![0.0; dim];
        for t in 0..t_len {
            residual.copy_from_slice(seq.frame(t));
            for (q, book) in self.codebooks.iter().enumerate() {
                let (c, _) = nearest(book, dim, &residual);
                codes[q][t] = c as u32;
                for (r, y) in residual.iter_mut().zip(&book[c * dim..(c + 1) * dim]) {
                    *r -= y;
                }
            }
        }
        Ok(CodecGrid {
            n_q: self.n_q(),
            len: t_len,
            codes,
        })
    }

    pub fn decode(&self, grid: &CodecGrid) -> Result<FeatureSeq> {
        if grid.n_q != self.n_q() {
            return Err(Error::data(format!(
                "grid has {} levels, codec has {}",
                grid.n_q,
                self.n_q()
            )));
        }
        grid.validate(self.codebook_size())?;
        let mut out = FeatureSeq::zeros(grid.len, self.config.dim, self.config.frame_rate_hz);
        for (q, row) in grid.codes.iter().enumerate() {
            for (t, &c) in row.iter().enumerate() {
                let centroid = self.centroid(q, c as usize);
                for (x, y) in out.frame_mut(t).iter_mut().zip(centroid) {
                    *x += y;
                }
            }
        }
        Ok(out)
    }

    /// Element-wise mean squared error of `decode(encode(x))` over every
    /// frame of the corpus.
    pub fn reconstruction_mse(&self, corpus: &[FeatureSeq]) -> Result<f64> {
        let frames: usize = corpus.iter().map(FeatureSeq::len).sum();
        if frames == 0 {
            return Err(Error::input("reconstruction error of an empty corpus"));
        }
        let mut sse = 0.0;
        for seq in corpus {
            let recon = self.decode(&self.encode(seq)?)?;
            sse += sq_dist(&recon.frames, &seq.frames);
        }
        Ok(sse / (frames * self.config.dim) as f64)
    }
}
