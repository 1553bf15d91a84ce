//! Token-by-token decoding with cached keys and values.

use std::sync::Arc;

use super::layers::add_into;
use super::{Model, BOS, EOS};
use crate::decoding::StepModel;
use crate::error::Result;
use crate::rvq::CodecGrid;
use crate::synthworld::SeqEmbedding;

struct CrossCache {
    n_enc: usize,
    /// Per decoder layer: keys and values of the encoder output.
    kv: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Decoder state after consuming a prefix. Cloning is cheap apart from the
/// per-layer self-attention caches.
#[derive(Clone)]
pub struct DecoderState {
    cross: Arc<CrossCache>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    pos: usize,
}

impl Model {
    /// Encodes the clip and prepares cross-attention caches.
    pub fn start_decoding(&self, grid: &CodecGrid, emb: &SeqEmbedding) -> Result<DecoderState> {
        let enc_out = self.encode(grid, emb)?;
        Ok(self.start_decoding_encoded(&enc_out))
    }

    pub fn start_decoding_encoded(&self, enc_out: &[f64]) -> DecoderState {
        let n_enc = enc_out.len() / self.config.hidden;
        let kv = self
            .layout
            .dec
            .iter()
            .map(|l| {
                (
                    l.cross.k.forward(&self.params, enc_out, n_enc),
                    l.cross.v.forward(&self.params, enc_out, n_enc),
                )
            })
            .collect();
        DecoderState {
            cross: Arc::new(CrossCache { n_enc, kv }),
            self_k: vec![Vec::new(); self.layout.dec.len()],
            self_v: vec![Vec::new(); self.layout.dec.len()],
            pos: 0,
        }
    }

    /// Feeds one token and returns next-token logits.
    pub fn decode_step(&self, state: &mut DecoderState, token: usize) -> Vec<f64> {
        let p = &self.params;
        let h = self.config.hidden;
        let heads = self.config.heads;
        let pos = state.pos.min(self.config.max_positions - 1);
        let mut x = p[self.layout.tok_emb + token * h..self.layout.tok_emb + (token + 1) * h].to_vec();
        add_into(&mut x, &p[self.layout.positions + pos * h..self.layout.positions + (pos + 1) * h]);

        let mut a = vec![0.0; h];
        let mut q = vec![0.0; h];
        let mut kv = vec![0.0; h];
        let mut ctx = vec![0.0; h];
        let mut out = vec![0.0; h];
        for (li, l) in self.layout.dec.iter().enumerate() {
            l.ln1.forward_row(p, &x, &mut a);
            l.self_attn.q.forward_row(p, &a, &mut q);
            l.self_attn.k.forward_row(p, &a, &mut kv);
            state.self_k[li].extend_from_slice(&kv);
            l.self_attn.v.forward_row(p, &a, &mut kv);
            state.self_v[li].extend_from_slice(&kv);
            let nk = state.self_k[li].len() / h;
            let mut probs = vec![0.0; heads * nk];
            l.self_attn
                .attend_row(&q, &state.self_k[li], &state.self_v[li], nk, &mut probs, &mut ctx);
            l.self_attn.o.forward_row(p, &ctx, &mut out);
            add_into(&mut x, &out);

            l.ln2.forward_row(p, &x, &mut a);
            l.cross.q.forward_row(p, &a, &mut q);
            let (ck, cv) = &state.cross.kv[li];
            let n_enc = state.cross.n_enc;
            let mut probs = vec![0.0; heads * n_enc];
            l.cross.attend_row(&q, ck, cv, n_enc, &mut probs, &mut ctx);
            l.cross.o.forward_row(p, &ctx, &mut out);
            add_into(&mut x, &out);

            l.ln3.forward_row(p, &x, &mut a);
            l.ff.forward_row(p, &a, &mut out);
            add_into(&mut x, &out);
        }
        self.layout.dec_norm.forward_row(p, &x, &mut a);
        let mut logits = vec![0.0; self.config.vocab_size];
        self.layout.out_head.forward_row(p, &a, &mut logits);
        state.pos += 1;
        logits
    }
}

/// A trained model bound to one encoded clip, ready for search.
pub struct ClipDecoder<'a> {
    pub model: &'a Model,
    pub start: DecoderState,
    pub max_len: usize,
}

impl<'a> ClipDecoder<'a> {
    pub fn new(model: &'a Model, grid: &CodecGrid, emb: &SeqEmbedding) -> Result<Self> {
        Ok(ClipDecoder {
            model,
            start: model.start_decoding(grid, emb)?,
            max_len: model.config.max_positions - 1,
        })
    }
}

impl StepModel for ClipDecoder<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn start(&self) -> (DecoderState, Vec<f64>) {
        let mut s = self.start.clone();
        let logits = self.model.decode_step(&mut s, BOS);
        (s, logits)
    }

    fn step(&self, state: &mut DecoderState, token: usize) -> Vec<f64> {
        self.model.decode_step(state, token)
    }
}
