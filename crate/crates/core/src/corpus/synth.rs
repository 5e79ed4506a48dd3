//! Synthetic text with controllable co-occurrence structure.
//!
//! Words are pronounceable syllable pairs. A [`Lexicon`] partitions them
//! into function words (shared by everything), generic words (the "general"
//! corpus) and per-topic word sets (the "domain" corpus and task generators).

use std::collections::HashSet;

use crate::diffcore::Rng;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub function_words: Vec<String>,
    pub generic_words: Vec<String>,
    pub topics: Vec<Vec<String>>,
}

fn syllable(rng: &mut Rng) -> String {
    format!("{}{}", ONSETS[rng.below(ONSETS.len())], VOWELS[rng.below(VOWELS.len())])
}

impl Lexicon {
    pub fn generate(num_topics: usize, words_per_topic: usize, num_function: usize, num_generic: usize, rng: &mut Rng) -> Self {
        let mut seen = HashSet::new();
        let mut fresh = |syllables: usize, rng: &mut Rng| loop {
            let w: String = (0..syllables).map(|_| syllable(rng)).collect();
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let function_words = (0..num_function).map(|_| fresh(1 + rng.below(2), rng)).collect();
        let generic_words = (0..num_generic).map(|_| fresh(2, rng)).collect();
        let topics = (0..num_topics)
            .map(|_| (0..words_per_topic).map(|_| fresh(3, rng)).collect())
            .collect();
        Lexicon {
            function_words,
            generic_words,
            topics,
        }
    }

    pub fn all_words(&self) -> impl Iterator<Item = &String> {
        self.function_words
            .iter()
            .chain(&self.generic_words)
            .chain(self.topics.iter().flatten())
    }
}

fn pick<'a>(words: &'a [String], rng: &mut Rng) -> &'a str {
    &words[rng.below(words.len())]
}

/// Topic-coherent sentence: function words with probability 0.3, otherwise
/// words of `topic`.
pub fn topic_sentence(lex: &Lexicon, topic: usize, len: usize, rng: &mut Rng) -> Vec<String> {
    (0..len)
        .map(|_| {
            if !lex.function_words.is_empty() && rng.uniform() < 0.3 {
                pick(&lex.function_words, rng).to_string()
            } else {
                pick(&lex.topics[topic], rng).to_string()
            }
        })
        .collect()
}

/// Domain corpus: every line draws a topic, then a topic sentence.
pub fn domain_corpus(lex: &Lexicon, lines: usize, min_len: usize, max_len: usize, rng: &mut Rng) -> Vec<String> {
    (0..lines)
        .map(|_| {
            let topic = rng.below(lex.topics.len());
            let len = min_len + rng.below(max_len - min_len + 1);
            topic_sentence(lex, topic, len, rng).join(" ")
        })
        .collect()
}

/// General corpus: function and generic words, with an occasional topic word
/// so the domain vocabulary is not entirely unseen.
pub fn generic_corpus(lex: &Lexicon, lines: usize, min_len: usize, max_len: usize, rng: &mut Rng) -> Vec<String> {
    (0..lines)
        .map(|_| {
            let len = min_len + rng.below(max_len - min_len + 1);
            (0..len)
                .map(|_| {
                    let u = rng.uniform();
                    if u < 0.3 {
                        pick(&lex.function_words, rng).to_string()
                    } else if u < 0.9 || lex.topics.is_empty() {
                        pick(&lex.generic_words, rng).to_string()
                    } else {
                        let t = rng.below(lex.topics.len());
                        pick(&lex.topics[t], rng).to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
