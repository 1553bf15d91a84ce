use rand::Rng;

use super::{MaskedExample, Model};
use crate::error::Result;
use crate::rvq::CodecGrid;

/// A grid with whole timestep columns replaced by the mask code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedGrid {
    pub grid: CodecGrid,
    /// Masked column indices, ascending.
    pub cols: Vec<usize>,
    /// Original codes of each masked column, one per codebook.
    pub targets: Vec<Vec<u32>>,
}

/// Masks exactly `round(ratio * T)` distinct columns across all codebooks.
/// The input grid is left untouched; targets are read from it.
pub fn apply_mcm_mask(grid: &CodecGrid, ratio: f64, mask_code: u32, rng: &mut impl Rng) -> MaskedGrid {
    let ratio = ratio.clamp(0.0, 1.0);
    let count = ((ratio * grid.len as f64).round() as usize).min(grid.len);
    let mut cols = rand::seq::index::sample(rng, grid.len, count).into_vec();
    cols.sort_unstable();
    let targets = cols.iter().map(|&c| grid.column(c)).collect();
    let mut masked = grid.clone();
    for row in masked.codes.iter_mut() {
        for &c in &cols {
            row[c] = mask_code;
        }
    }
    MaskedGrid {
        grid: masked,
        cols,
        targets,
    }
}

/// Fraction of masked cells whose most likely code is the original one.
/// Returns `(correct, total)`.
pub fn mcm_accuracy(model: &Model, examples: &[MaskedExample]) -> Result<(usize, usize)> {
    let mut correct = 0;
    let mut total = 0;
    for ex in examples {
        let enc = model.encode(&ex.grid, &ex.seq_emb)?;
        let logits = model.mcm_forward(&enc, &ex.masked_cols);
        for (col, tgt) in logits.iter().zip(&ex.mcm_targets) {
            for (l, &t) in col.iter().zip(tgt) {
                let best = l
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0;
                correct += usize::from(best == t as usize);
                total += 1;
            }
        }
    }
    Ok((correct, total))
}
