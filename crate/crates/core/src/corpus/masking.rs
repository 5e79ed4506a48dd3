use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{TokenSequence, MASK, NUM_RESERVED};
use crate::diffcore::Rng;
use crate::error::{Error, Result};

/// What happened to a selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Corruption {
    MaskToken,
    Kept,
    Random,
}

/// Probabilities of replacing a selected token with `[MASK]`, keeping it,
/// or swapping in a random vocabulary token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingStrategy {
    pub p_mask: f64,
    pub p_keep: f64,
    pub p_random: f64,
}

impl Default for MaskingStrategy {
    fn default() -> Self {
        MaskingStrategy {
            p_mask: 0.8,
            p_keep: 0.1,
            p_random: 0.1,
        }
    }
}

impl MaskingStrategy {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_mask, self.p_keep, self.p_random];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("masking strategy probabilities out of range: {ps:?}")));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("masking strategy sums to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub original: Vec<usize>,
    pub input_ids: Vec<usize>,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
    pub kinds: Vec<Corruption>,
    pub line: usize,
}

impl MaskedSequence {
    /// Writes `targets` back over `input_ids`.
    pub fn restore(&self) -> Vec<usize> {
        let mut ids = self.input_ids.clone();
        for (&p, &t) in self.positions.iter().zip(&self.targets) {
            ids[p] = t;
        }
        ids
    }

    /// Wraps a sequence with no selected positions (inference input).
    pub fn unmasked(seq: &TokenSequence) -> Self {
        MaskedSequence {
            original: seq.ids.clone(),
            input_ids: seq.ids.clone(),
            positions: Vec::new(),
            targets: Vec::new(),
            kinds: Vec::new(),
            line: seq.line,
        }
    }
}

/// `k = ceil(ratio * n)`, at least one. Products within 1e-9 of an integer
/// are treated as that integer so that e.g. `0.15 * 20` yields 3.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).clamp(1, n.max(1))
}

pub fn mask_sequence(
    seq: &TokenSequence,
    ratio: f64,
    strategy: &MaskingStrategy,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<MaskedSequence> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("masking ratio {ratio} outside (0, 1)")));
    }
    strategy.validate()?;
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Config(format!("vocabulary of size {vocab_size} has no ordinary tokens")));
    }
    let maskable = seq.maskable_positions();
    if maskable.is_empty() {
        return Err(Error::Data {
            line: seq.line,
            msg: "sequence has no maskable positions".into(),
        });
    }
    let k = mask_count(maskable.len(), ratio);
    let mut positions: Vec<usize> = rng
        .sample_without_replacement(maskable.len(), k)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    positions.sort_unstable();

    let mut input_ids = seq.ids.clone();
    let mut targets = Vec::with_capacity(k);
    let mut kinds = Vec::with_capacity(k);
    for &p in &positions {
        targets.push(seq.ids[p]);
        let u = rng.uniform();
        let kind = if u < strategy.p_mask {
            Corruption::MaskToken
        } else if u < strategy.p_mask + strategy.p_keep {
            Corruption::Kept
        } else {
            Corruption::Random
        };
        match kind {
            Corruption::MaskToken => input_ids[p] = MASK,
            Corruption::Kept => {}
            Corruption::Random => input_ids[p] = NUM_RESERVED + rng.below(vocab_size - NUM_RESERVED),
        }
        kinds.push(kind);
    }
    Ok(MaskedSequence {
        original: seq.ids.clone(),
        input_ids,
        positions,
        targets,
        kinds,
        line: seq.line,
    })
}
