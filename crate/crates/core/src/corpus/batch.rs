use crate::corpus::masking::{Corruption, MaskedSequence};
use crate::corpus::vocab::{CLS, PAD, SEP};
use crate::error::{Error, Result};

/// Right-padded batch of masked sequences, row-major `batch x max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub max_len: usize,
    pub input_ids: Vec<usize>,
    pub original_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub mask_positions: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub kinds: Vec<Vec<Corruption>>,
    /// Unpadded lengths (including `[CLS]`/`[SEP]`).
    pub lengths: Vec<usize>,
    pub lines: Vec<usize>,
}

pub fn collate(seqs: &[MaskedSequence], max_len: usize) -> Result<MaskedBatch> {
    if seqs.is_empty() {
        return Err(Error::Empty("cannot collate an empty batch".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.input_ids.len() > max_len) {
        return Err(Error::Data {
            line: s.line,
            msg: format!("sequence of length {} exceeds max_len {max_len}", s.input_ids.len()),
        });
    }
    let width = seqs.iter().map(|s| s.input_ids.len()).max().unwrap_or(0);
    let b = seqs.len();
    let mut input_ids = vec![PAD; b * width];
    let mut original_ids = vec![PAD; b * width];
    let mut attention_mask = vec![false; b * width];
    for (i, s) in seqs.iter().enumerate() {
        let row = i * width;
        input_ids[row..row + s.input_ids.len()].copy_from_slice(&s.input_ids);
        original_ids[row..row + s.original.len()].copy_from_slice(&s.original);
        attention_mask[row..row + s.input_ids.len()].iter_mut().for_each(|m| *m = true);
    }
    Ok(MaskedBatch {
        batch: b,
        max_len: width,
        input_ids,
        original_ids,
        attention_mask,
        mask_positions: seqs.iter().map(|s| s.positions.clone()).collect(),
        targets: seqs.iter().map(|s| s.targets.clone()).collect(),
        kinds: seqs.iter().map(|s| s.kinds.clone()).collect(),
        lengths: seqs.iter().map(|s| s.input_ids.len()).collect(),
        lines: seqs.iter().map(|s| s.line).collect(),
    })
}

impl MaskedBatch {
    /// Input ids with targets written back at the masked positions.
    pub fn restore(&self) -> Vec<usize> {
        let mut ids = self.input_ids.clone();
        for (b, (pos, tgt)) in self.mask_positions.iter().zip(&self.targets).enumerate() {
            for (&p, &t) in pos.iter().zip(tgt) {
                ids[b * self.max_len + p] = t;
            }
        }
        ids
    }

    /// Whether a flat position holds a sentence token (not pad or special).
    pub fn is_word(&self, flat: usize) -> bool {
        self.attention_mask[flat] && !matches!(self.original_ids[flat], CLS | SEP | PAD)
    }

    /// Widens every row to `max_len` with padding.
    pub fn padded_to(&self, max_len: usize) -> MaskedBatch {
        if max_len <= self.max_len {
            return self.clone();
        }
        let widen = |v: &[usize]| -> Vec<usize> {
            let mut out = vec![PAD; self.batch * max_len];
            for b in 0..self.batch {
                out[b * max_len..b * max_len + self.max_len].copy_from_slice(&v[b * self.max_len..(b + 1) * self.max_len]);
            }
            out
        };
        let mut mask = vec![false; self.batch * max_len];
        for b in 0..self.batch {
            mask[b * max_len..b * max_len + self.max_len]
                .copy_from_slice(&self.attention_mask[b * self.max_len..(b + 1) * self.max_len]);
        }
        MaskedBatch {
            max_len,
            input_ids: widen(&self.input_ids),
            original_ids: widen(&self.original_ids),
            attention_mask: mask,
            ..self.clone()
        }
    }
}
