//! Desk-scale encoder-decoder caption model.
//!
//! The encoder reads one clip-level embedding followed by `T` timestep
//! vectors, each the sum of `n_q` code embeddings (one table per codebook,
//! row `K` reserved for the mask code) plus a position vector. The decoder
//! is a causal transformer over caption words with cross-attention into the
//! encoder. Masked-code heads read the encoder output at masked timesteps
//! and predict the original code of every codebook.

mod gradcheck;
mod infer;
mod layers;
mod mcm;
mod train;
pub mod vocab;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rvq::CodecGrid;
use crate::synthworld::SeqEmbedding;

pub use gradcheck::{grad_check, GradCheckReport};
pub use infer::{ClipDecoder, DecoderState};
pub use mcm::{apply_mcm_mask, mcm_accuracy, MaskedGrid};
pub use train::{
    loss_trace_csv, train, Checkpoint, LossRow, StageData, StageLog, TrainConfig, TrainExample, TrainOutcome,
    CHECKPOINT_FORMAT_VERSION,
};
pub use vocab::{CaptionVocab, BOS, EOS, PAD, UNK};

use layers::{add_into, log_softmax, Attention, AttnCache, FeedForward, FfCache, LayerNorm, Linear, NormCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_q: usize,
    pub codebook_size: usize,
    pub seq_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// Two encoder and two decoder layers, width 64, two heads.
    pub fn desk(n_q: usize, codebook_size: usize, seq_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_q,
            codebook_size,
            seq_dim,
            hidden: 64,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 128,
            vocab_size,
            max_positions: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_q", self.n_q),
            ("codebook_size", self.codebook_size),
            ("seq_dim", self.seq_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model {name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size <= EOS {
            return Err(Error::config("caption vocabulary lacks special tokens"));
        }
        Ok(())
    }

    /// Index of the mask code in every code table.
    pub fn mask_code(&self) -> u32 {
        self.codebook_size as u32
    }
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Offsets of every parameter group inside the flat parameter buffer.
#[derive(Clone, Debug)]
struct Layout {
    code_tables: Vec<usize>,
    positions: usize,
    seq_proj: Linear,
    enc: Vec<EncLayer>,
    enc_norm: LayerNorm,
    tok_emb: usize,
    dec: Vec<DecLayer>,
    dec_norm: LayerNorm,
    out_head: Linear,
    mcm_heads: Vec<Linear>,
    groups: Vec<(String, Range<usize>, Init)>,
    total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zero,
    One,
    Normal(f64),
    Sinusoid,
}

struct Cursor {
    at: usize,
    groups: Vec<(String, Range<usize>, Init)>,
}

impl Cursor {
    fn take(&mut self, name: String, len: usize, init: Init) -> usize {
        let start = self.at;
        self.at += len;
        self.groups.push((name, start..self.at, init));
        start
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        let w = self.take(format!("{name}.w"), inp * out, Init::Normal(1.0 / (inp as f64).sqrt()));
        let b = self.take(format!("{name}.b"), out, Init::Zero);
        Linear { w, b, inp, out }
    }

    fn norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        let g = self.take(format!("{name}.g"), dim, Init::One);
        let b = self.take(format!("{name}.b"), dim, Init::Zero);
        LayerNorm { g, b, dim }
    }

    fn attention(&mut self, name: &str, h: usize, heads: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), h, h),
            k: self.linear(&format!("{name}.k"), h, h),
            v: self.linear(&format!("{name}.v"), h, h),
            o: self.linear(&format!("{name}.o"), h, h),
            heads,
        }
    }

    fn ff(&mut self, name: &str, h: usize, inner: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), h, inner),
            down: self.linear(&format!("{name}.down"), inner, h),
        }
    }
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let h = c.hidden;
        let mut cur = Cursor { at: 0, groups: Vec::new() };
        let code_tables = (0..c.n_q)
            .map(|q| cur.take(format!("code_table.{q}"), (c.codebook_size + 1) * h, Init::Normal(1.0)))
            .collect();
        let positions = cur.take("positions".into(), c.max_positions * h, Init::Sinusoid);
        let seq_proj = cur.linear("seq_proj", c.seq_dim, h);
        let enc = (0..c.enc_layers)
            .map(|l| EncLayer {
                ln1: cur.norm(&format!("enc.{l}.ln1"), h),
                attn: cur.attention(&format!("enc.{l}.attn"), h, c.heads),
                ln2: cur.norm(&format!("enc.{l}.ln2"), h),
                ff: cur.ff(&format!("enc.{l}.ff"), h, c.ffn),
            })
            .collect();
        let enc_norm = cur.norm("enc.norm", h);
        let tok_emb = cur.take("tok_emb".into(), c.vocab_size * h, Init::Normal(1.0));
        let dec = (0..c.dec_layers)
            .map(|l| DecLayer {
                ln1: cur.norm(&format!("dec.{l}.ln1"), h),
                self_attn: cur.attention(&format!("dec.{l}.self"), h, c.heads),
                ln2: cur.norm(&format!("dec.{l}.ln2"), h),
                cross: cur.attention(&format!("dec.{l}.cross"), h, c.heads),
                ln3: cur.norm(&format!("dec.{l}.ln3"), h),
                ff: cur.ff(&format!("dec.{l}.ff"), h, c.ffn),
            })
            .collect();
        let dec_norm = cur.norm("dec.norm", h);
        let out_head = cur.linear("out_head", h, c.vocab_size);
        let mcm_heads = (0..c.n_q)
            .map(|q| cur.linear(&format!("mcm_head.{q}"), h, c.codebook_size))
            .collect();
        Layout {
            code_tables,
            positions,
            seq_proj,
            enc,
            enc_norm,
            tok_emb,
            dec,
            dec_norm,
            out_head,
            mcm_heads,
            total: cur.at,
            groups: cur.groups,
        }
    }
}

fn sinusoid(pos: usize, j: usize, h: usize) -> f64 {
    let i = (j / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * i / h as f64);
    if j % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Caption logits per prefix position and masked-code logits per masked
/// column per codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub caption_logits: Vec<Vec<f64>>,
    pub mcm_logits: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub caption_ce: f64,
    pub mcm_ce: f64,
}

/// `total = caption CE + lambda * MCM CE`, each a token-averaged natural-log
/// cross-entropy. The MCM term averages over every masked cell of every
/// codebook and is zero when nothing is masked.
pub fn joint_loss(
    caption_logits: &[Vec<f64>],
    caption_targets: &[usize],
    mcm_logits: &[Vec<Vec<f64>>],
    mcm_targets: &[Vec<u32>],
    lambda: f64,
) -> LossParts {
    let caption_ce = if caption_targets.is_empty() {
        0.0
    } else {
        caption_logits
            .iter()
            .zip(caption_targets)
            .map(|(l, &t)| -log_softmax(l)[t])
            .sum::<f64>()
            / caption_targets.len() as f64
    };
    let mut cells = 0usize;
    let mut mcm_sum = 0.0;
    for (col, targets) in mcm_logits.iter().zip(mcm_targets) {
        for (l, &t) in col.iter().zip(targets) {
            mcm_sum -= log_softmax(l)[t as usize];
            cells += 1;
        }
    }
    let mcm_ce = if cells == 0 { 0.0 } else { mcm_sum / cells as f64 };
    LossParts {
        total: caption_ce + lambda * mcm_ce,
        caption_ce,
        mcm_ce,
    }
}

/// One training item after masking: encoder codes with masked columns,
/// the original codes at those columns, and the caption word ids.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub grid: CodecGrid,
    pub masked_cols: Vec<usize>,
    pub mcm_targets: Vec<Vec<u32>>,
    pub seq_emb: SeqEmbedding,
    pub caption: Vec<usize>,
}

impl MaskedExample {
    pub fn prefix(&self) -> Vec<usize> {
        std::iter::once(BOS).chain(self.caption.iter().copied()).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.caption.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

struct EncLayerCache {
    a: Vec<f64>,
    ln1: NormCache,
    attn: AttnCache,
    b: Vec<f64>,
    ln2: NormCache,
    ff: FfCache,
}

struct EncCache {
    n: usize,
    layers: Vec<EncLayerCache>,
    norm: NormCache,
    out: Vec<f64>,
}

struct DecLayerCache {
    a: Vec<f64>,
    ln1: NormCache,
    self_attn: AttnCache,
    b: Vec<f64>,
    ln2: NormCache,
    cross: AttnCache,
    c: Vec<f64>,
    ln3: NormCache,
    ff: FfCache,
}

struct DecCache {
    n: usize,
    layers: Vec<DecLayerCache>,
    norm: NormCache,
    normed: Vec<f64>,
    logits: Vec<f64>,
}

/// Model parameters: configuration plus one flat `f64` buffer.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        for (_, range, init) in &layout.groups {
            let slot = &mut params[range.clone()];
            match *init {
                Init::Zero => {}
                Init::One => slot.fill(1.0),
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("finite std");
                    slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
                Init::Sinusoid => {
                    for (i, v) in slot.iter_mut().enumerate() {
                        *v = sinusoid(i / h, i % h, h);
                    }
                }
            }
        }
        Ok(Model { config, layout, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total];
        Ok(Model { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::data(format!(
                "expected {} parameters for this configuration, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("parameter buffer holds non-finite values"));
        }
        Ok(Model { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Named parameter groups and their ranges in the flat buffer.
    pub fn param_groups(&self) -> impl Iterator<Item = (&str, Range<usize>)> {
        self.layout.groups.iter().map(|(n, r, _)| (n.as_str(), r.clone()))
    }

    /// Flat ranges of the masked-code prediction heads.
    pub fn mcm_head_ranges(&self) -> Vec<Range<usize>> {
        self.layout
            .mcm_heads
            .iter()
            .map(|l| l.w..l.b + l.out)
            .collect()
    }

    fn check_grid(&self, grid: &CodecGrid, emb: &SeqEmbedding) -> Result<()> {
        let c = &self.config;
        if grid.n_q != c.n_q {
            return Err(Error::input(format!(
                "grid has {} codebooks, model expects {}",
                grid.n_q, c.n_q
            )));
        }
        grid.validate(c.codebook_size + 1)?;
        if emb.dim() != c.seq_dim {
            return Err(Error::input(format!(
                "sequence embedding has dimension {}, model expects {}",
                emb.dim(),
                c.seq_dim
            )));
        }
        if grid.len + 1 > c.max_positions {
            return Err(Error::input(format!(
                "{} timesteps exceed the {} encoder positions",
                grid.len,
                c.max_positions - 1
            )));
        }
        Ok(())
    }

    /// Encoder input rows: row 0 is the projected clip embedding, row `t`
    /// (1..=T) sums the code embeddings of column `t - 1` and position `t`.
    pub fn compose_inputs(&self, grid: &CodecGrid, emb: &SeqEmbedding) -> Result<Vec<f64>> {
        self.check_grid(grid, emb)?;
        let h = self.config.hidden;
        let p = &self.params;
        let n = grid.len + 1;
        let mut x = vec![0.0; n * h];
        self.layout.seq_proj.forward_row(p, &emb.vector, &mut x[..h]);
        for t in 1..n {
            let row = &mut x[t * h..(t + 1) * h];
            row.copy_from_slice(&p[self.layout.positions + t * h..self.layout.positions + (t + 1) * h]);
            for (q, codes) in grid.codes.iter().enumerate() {
                let off = self.layout.code_tables[q] + codes[t - 1] as usize * h;
                add_into(row, &p[off..off + h]);
            }
        }
        Ok(x)
    }

    fn encoder_forward(&self, grid: &CodecGrid, emb: &SeqEmbedding) -> Result<EncCache> {
        let p = &self.params;
        let mut x = self.compose_inputs(grid, emb)?;
        let n = grid.len + 1;
        let mut layers = Vec::with_capacity(self.layout.enc.len());
        for l in &self.layout.enc {
            let (a, ln1) = l.ln1.forward(p, &x, n);
            let (att, attn) = l.attn.forward(p, &a, n, &a, n, false);
            add_into(&mut x, &att);
            let (b, ln2) = l.ln2.forward(p, &x, n);
            let (f, ff) = l.ff.forward(p, &b, n);
            add_into(&mut x, &f);
            layers.push(EncLayerCache { a, ln1, attn, b, ln2, ff });
        }
        let (out, norm) = self.layout.enc_norm.forward(p, &x, n);
        Ok(EncCache { n, layers, norm, out })
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::input("caption prefix must begin with the start token"));
        }
        if prefix.len() > self.config.max_positions {
            return Err(Error::input(format!(
                "caption prefix of {} tokens exceeds {} positions",
                prefix.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::input(format!("token id {bad} outside caption vocabulary")));
        }
        Ok(())
    }

    fn decoder_forward(&self, enc_out: &[f64], n_enc: usize, prefix: &[usize]) -> DecCache {
        let p = &self.params;
        let h = self.config.hidden;
        let n = prefix.len();
        let mut y = vec![0.0; n * h];
        for (i, &tok) in prefix.iter().enumerate() {
            let row = &mut y[i * h..(i + 1) * h];
            row.copy_from_slice(&p[self.layout.tok_emb + tok * h..self.layout.tok_emb + (tok + 1) * h]);
            add_into(row, &p[self.layout.positions + i * h..self.layout.positions + (i + 1) * h]);
        }
        let mut layers = Vec::with_capacity(self.layout.dec.len());
        for l in &self.layout.dec {
            let (a, ln1) = l.ln1.forward(p, &y, n);
            let (sa, self_attn) = l.self_attn.forward(p, &a, n, &a, n, true);
            add_into(&mut y, &sa);
            let (b, ln2) = l.ln2.forward(p, &y, n);
            let (ca, cross) = l.cross.forward(p, &b, n, enc_out, n_enc, false);
            add_into(&mut y, &ca);
            let (c, ln3) = l.ln3.forward(p, &y, n);
            let (f, ff) = l.ff.forward(p, &c, n);
            add_into(&mut y, &f);
            layers.push(DecLayerCache { a, ln1, self_attn, b, ln2, cross, c, ln3, ff });
        }
        let (normed, norm) = self.layout.dec_norm.forward(p, &y, n);
        let logits = self.layout.out_head.forward(p, &normed, n);
        DecCache { n, layers, norm, normed, logits }
    }

    fn mcm_forward(&self, enc_out: &[f64], cols: &[usize]) -> Vec<Vec<Vec<f64>>> {
        let h = self.config.hidden;
        cols.iter()
            .map(|&c| {
                let row = &enc_out[(c + 1) * h..(c + 2) * h];
                self.layout
                    .mcm_heads
                    .iter()
                    .map(|head| {
                        let mut out = vec![0.0; head.out];
                        head.forward_row(&self.params, row, &mut out);
                        out
                    })
                    .collect()
            })
            .collect()
    }

    fn check_cols(&self, grid: &CodecGrid, cols: &[usize]) -> Result<()> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= grid.len) {
            return Err(Error::input(format!(
                "masked column {bad} outside a grid of {} timesteps",
                grid.len
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        grid: &CodecGrid,
        emb: &SeqEmbedding,
        prefix: &[usize],
        masked_cols: &[usize],
    ) -> Result<ForwardOutput> {
        self.check_prefix(prefix)?;
        self.check_cols(grid, masked_cols)?;
        let enc = self.encoder_forward(grid, emb)?;
        let dec = self.decoder_forward(&enc.out, enc.n, prefix);
        let v = self.config.vocab_size;
        Ok(ForwardOutput {
            caption_logits: dec.logits.chunks(v).map(<[f64]>::to_vec).collect(),
            mcm_logits: self.mcm_forward(&enc.out, masked_cols),
        })
    }

    pub fn forward_batch(&self, items: &[(CodecGrid, SeqEmbedding, Vec<usize>, Vec<usize>)]) -> Result<Vec<ForwardOutput>> {
        items
            .par_iter()
            .map(|(g, e, prefix, cols)| self.forward(g, e, prefix, cols))
            .collect()
    }

    /// Encoder output rows (`(T + 1) × hidden`).
    pub fn encode(&self, grid: &CodecGrid, emb: &SeqEmbedding) -> Result<Vec<f64>> {
        Ok(self.encoder_forward(grid, emb)?.out)
    }

    /// Natural-log probabilities of each caption token (and the end token)
    /// under teacher forcing.
    pub fn token_logprobs(&self, grid: &CodecGrid, emb: &SeqEmbedding, words: &[usize]) -> Result<Vec<f64>> {
        let prefix: Vec<usize> = std::iter::once(BOS).chain(words.iter().copied()).collect();
        self.check_prefix(&prefix)?;
        let enc = self.encoder_forward(grid, emb)?;
        Ok(self.teacher_forced_logprobs(&enc.out, enc.n, words))
    }

    /// Same as [`Model::token_logprobs`] for an already encoded clip. `words`
    /// may end with the end token, in which case it is scored once.
    pub fn teacher_forced_logprobs(&self, enc_out: &[f64], n_enc: usize, words: &[usize]) -> Vec<f64> {
        let (body, with_eos) = match words.last() {
            Some(&EOS) => (&words[..words.len() - 1], true),
            _ => (words, false),
        };
        let prefix: Vec<usize> = std::iter::once(BOS).chain(body.iter().copied()).collect();
        let dec = self.decoder_forward(enc_out, n_enc, &prefix);
        let v = self.config.vocab_size;
        let mut out: Vec<f64> = body
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax(&dec.logits[i * v..(i + 1) * v])[t])
            .collect();
        if with_eos {
            let i = body.len();
            out.push(log_softmax(&dec.logits[i * v..(i + 1) * v])[EOS]);
        }
        out
    }

    /// Joint loss and its gradient over a batch. Caption cross-entropy is
    /// averaged over every caption token of the batch and the masked-code
    /// term over every masked cell, so duplicating an item leaves both the
    /// loss and the gradient unchanged.
    pub fn loss_and_grad(&self, batch: &[MaskedExample], lambda: f64) -> Result<(LossParts, Vec<f64>)> {
        for ex in batch {
            self.check_grid(&ex.grid, &ex.seq_emb)?;
            self.check_cols(&ex.grid, &ex.masked_cols)?;
            self.check_prefix(&ex.prefix())?;
            if ex.mcm_targets.len() != ex.masked_cols.len() {
                return Err(Error::input("one target column per masked column required"));
            }
        }
        let caption_tokens: usize = batch.iter().map(|ex| ex.caption.len() + 1).sum();
        let mcm_cells: usize = batch.iter().map(|ex| ex.masked_cols.len() * self.config.n_q).sum();
        let cap_scale = if caption_tokens == 0 { 0.0 } else { 1.0 / caption_tokens as f64 };
        let mcm_scale = if mcm_cells == 0 { 0.0 } else { lambda / mcm_cells as f64 };

        let parts: Vec<(f64, f64, Vec<f64>)> = batch
            .par_iter()
            .map(|ex| self.example_grad(ex, cap_scale, mcm_scale))
            .collect();

        let mut grad = vec![0.0; self.layout.total];
        let (mut cap_sum, mut mcm_sum) = (0.0, 0.0);
        for (c, m, g) in parts {
            cap_sum += c;
            mcm_sum += m;
            add_into(&mut grad, &g);
        }
        let caption_ce = cap_sum * cap_scale;
        let mcm_ce = if mcm_cells == 0 { 0.0 } else { mcm_sum / mcm_cells as f64 };
        Ok((
            LossParts {
                total: caption_ce + lambda * mcm_ce,
                caption_ce,
                mcm_ce,
            },
            grad,
        ))
    }

    /// Summed (unscaled) caption and masked-code cross-entropies of one item
    /// and the gradient of `cap_scale * caption + mcm_scale * mcm`.
    fn example_grad(&self, ex: &MaskedExample, cap_scale: f64, mcm_scale: f64) -> (f64, f64, Vec<f64>) {
        let p = &self.params;
        let h = self.config.hidden;
        let v = self.config.vocab_size;
        let k = self.config.codebook_size;
        let mut g = vec![0.0; self.layout.total];

        let enc = self
            .encoder_forward(&ex.grid, &ex.seq_emb)
            .expect("batch validated before forward");
        let prefix = ex.prefix();
        let targets = ex.targets();
        let dec = self.decoder_forward(&enc.out, enc.n, &prefix);

        let mut cap_sum = 0.0;
        let mut dlogits = vec![0.0; dec.n * v];
        for (i, &t) in targets.iter().enumerate() {
            let lp = log_softmax(&dec.logits[i * v..(i + 1) * v]);
            cap_sum -= lp[t];
            for j in 0..v {
                let onehot = if j == t { 1.0 } else { 0.0 };
                dlogits[i * v + j] = (lp[j].exp() - onehot) * cap_scale;
            }
        }

        let mut d_enc_out = vec![0.0; enc.n * h];

        let mut mcm_sum = 0.0;
        let mut dmcm = vec![0.0; k];
        for (&col, tgt) in ex.masked_cols.iter().zip(&ex.mcm_targets) {
            let row = &enc.out[(col + 1) * h..(col + 2) * h];
            for (q, head) in self.layout.mcm_heads.iter().enumerate() {
                let mut logits = vec![0.0; k];
                head.forward_row(p, row, &mut logits);
                let lp = log_softmax(&logits);
                let t = tgt[q] as usize;
                mcm_sum -= lp[t];
                for j in 0..k {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    dmcm[j] = (lp[j].exp() - onehot) * mcm_scale;
                }
                let dx = head.backward(p, &mut g, row, &dmcm, 1);
                add_into(&mut d_enc_out[(col + 1) * h..(col + 2) * h], &dx);
            }
        }

        // decoder
        let dnormed = self.layout.out_head.backward(p, &mut g, &dec.normed, &dlogits, dec.n);
        let mut dy = self.layout.dec_norm.backward(p, &mut g, &dec.norm, &dnormed, dec.n);
        for (l, c) in self.layout.dec.iter().zip(&dec.layers).rev() {
            let dc = l.ff.backward(p, &mut g, &c.c, &c.ff, &dy, dec.n);
            add_into(&mut dy, &l.ln3.backward(p, &mut g, &c.ln3, &dc, dec.n));
            let (db, denc) = l.cross.backward(p, &mut g, &c.b, &enc.out, &c.cross, &dy);
            add_into(&mut d_enc_out, &denc);
            add_into(&mut dy, &l.ln2.backward(p, &mut g, &c.ln2, &db, dec.n));
            let (daq, dakv) = l.self_attn.backward(p, &mut g, &c.a, &c.a, &c.self_attn, &dy);
            let mut da = daq;
            add_into(&mut da, &dakv);
            add_into(&mut dy, &l.ln1.backward(p, &mut g, &c.ln1, &da, dec.n));
        }
        for (i, &tok) in prefix.iter().enumerate() {
            let drow = &dy[i * h..(i + 1) * h];
            add_into(&mut g[self.layout.tok_emb + tok * h..self.layout.tok_emb + (tok + 1) * h], drow);
            add_into(&mut g[self.layout.positions + i * h..self.layout.positions + (i + 1) * h], drow);
        }

        // encoder
        let mut dx = self.layout.enc_norm.backward(p, &mut g, &enc.norm, &d_enc_out, enc.n);
        for (l, c) in self.layout.enc.iter().zip(&enc.layers).rev() {
            let db = l.ff.backward(p, &mut g, &c.b, &c.ff, &dx, enc.n);
            add_into(&mut dx, &l.ln2.backward(p, &mut g, &c.ln2, &db, enc.n));
            let (daq, dakv) = l.attn.backward(p, &mut g, &c.a, &c.a, &c.attn, &dx);
            let mut da = daq;
            add_into(&mut da, &dakv);
            add_into(&mut dx, &l.ln1.backward(p, &mut g, &c.ln1, &da, enc.n));
        }

        // input composition
        self.layout
            .seq_proj
            .backward(p, &mut g, &ex.seq_emb.vector, &dx[..h], 1);
        for t in 1..enc.n {
            let drow = &dx[t * h..(t + 1) * h];
            add_into(&mut g[self.layout.positions + t * h..self.layout.positions + (t + 1) * h], drow);
            for (q, codes) in ex.grid.codes.iter().enumerate() {
                let off = self.layout.code_tables[q] + codes[t - 1] as usize * h;
                add_into(&mut g[off..off + h], drow);
            }
        }

        (cap_sum, mcm_sum, g)
    }
}
