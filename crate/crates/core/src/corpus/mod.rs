//! Tokenization, vocabulary and the masked-token corruption procedure.

pub mod batch;
pub mod masking;
pub mod synth;
pub mod vocab;

pub use batch::{collate, MaskedBatch};
pub use masking::{mask_count, mask_sequence, Corruption, MaskedSequence, MaskingStrategy};
pub use vocab::{build_vocab, corpus_hash, TokenSequence, Vocabulary, CLS, MASK, NUM_RESERVED, PAD, SEP, UNK};

/// Splits text into lines, dropping blank ones but keeping 1-based line
/// numbers.
pub fn read_lines(text: &str) -> Vec<(usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect()
}
