//! Synthetic labeled tasks over a [`Lexicon`]: keyword classification
//! (single- and multi-label), lexicon-driven entity tagging, span
//! extraction and paraphrase matching.

use crate::corpus::synth::Lexicon;
use crate::diffcore::Rng;
use crate::downstream::tasks::{Example, TaskData};
use crate::downstream::{MetricKind, TaskKind, TaskSpec};

pub const ENTITY_TYPES: [&str; 4] = ["PER", "LOC", "ORG", "GENE"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    fn total(self) -> usize {
        self.train + self.dev + self.test
    }
}

fn split(examples: Vec<Example>, sizes: SplitSizes) -> TaskData {
    let mut it = examples.into_iter();
    let train = it.by_ref().take(sizes.train).collect();
    let dev = it.by_ref().take(sizes.dev).collect();
    TaskData {
        train,
        dev,
        test: it.collect(),
    }
}

fn filler(lex: &Lexicon, rng: &mut Rng) -> String {
    let pool = if lex.function_words.is_empty() || (!lex.generic_words.is_empty() && rng.uniform() < 0.6) {
        &lex.generic_words
    } else {
        &lex.function_words
    };
    pool[rng.below(pool.len())].clone()
}

fn fillers(lex: &Lexicon, n: usize, rng: &mut Rng) -> Vec<String> {
    (0..n).map(|_| filler(lex, rng)).collect()
}

fn insert_at_random(words: &mut Vec<String>, w: String, rng: &mut Rng) {
    let at = rng.below(words.len() + 1);
    words.insert(at, w);
}

fn assert_topics(lex: &Lexicon, needed: usize) {
    assert!(
        lex.topics.len() >= needed && lex.topics.iter().all(|t| !t.is_empty()),
        "lexicon needs {needed} non-empty topics"
    );
}

/// Each class is marked by one or two keywords from its own topic among
/// 4-8 filler words.
pub fn keyword_classification(lex: &Lexicon, classes: usize, sizes: SplitSizes, rng: &mut Rng) -> (TaskSpec, TaskData) {
    assert_topics(lex, classes);
    let labels = (0..classes).map(|k| format!("c{k}")).collect();
    let spec = TaskSpec::new("keyword_cls", TaskKind::Cls, labels);
    let examples = (0..sizes.total())
        .map(|i| {
            let k = rng.below(classes);
            let mut words = fillers(lex, 4 + rng.below(5), rng);
            for _ in 0..1 + rng.below(2) {
                let kw = lex.topics[k][rng.below(lex.topics[k].len())].clone();
                insert_at_random(&mut words, kw, rng);
            }
            Example {
                text: words.join(" "),
                pair: None,
                target: vec![k],
                line: i + 1,
            }
        })
        .collect();
    (spec, split(examples, sizes))
}

/// Every example carries a non-empty label subset, each label marked by a
/// keyword of its topic.
pub fn multi_label_classification(lex: &Lexicon, labels: usize, sizes: SplitSizes, rng: &mut Rng) -> (TaskSpec, TaskData) {
    assert_topics(lex, labels);
    let spec = TaskSpec {
        multi_label: true,
        ..TaskSpec::new("multi_label_cls", TaskKind::Cls, (0..labels).map(|k| format!("l{k}")).collect())
    };
    let examples = (0..sizes.total())
        .map(|i| {
            let mut target: Vec<usize> = (0..labels).filter(|_| rng.uniform() < 0.4).collect();
            if target.is_empty() {
                target.push(rng.below(labels));
            }
            let mut words = fillers(lex, 4 + rng.below(4), rng);
            for &k in &target {
                let kw = lex.topics[k][rng.below(lex.topics[k].len())].clone();
                insert_at_random(&mut words, kw, rng);
            }
            Example {
                text: words.join(" "),
                pair: None,
                target,
                line: i + 1,
            }
        })
        .collect();
    (spec, split(examples, sizes))
}

fn bio_labels(types: &[&str]) -> Vec<String> {
    let mut labels = vec!["O".to_string()];
    for t in types {
        labels.push(format!("B-{t}"));
        labels.push(format!("I-{t}"));
    }
    labels
}

fn tagged_sentences(lex: &Lexicon, types: &[&str], sizes: SplitSizes, rng: &mut Rng) -> Vec<Example> {
    assert_topics(lex, types.len());
    (0..sizes.total())
        .map(|i| {
            let mut words = Vec::new();
            let mut target = Vec::new();
            let spans = 1 + rng.below(2);
            for _ in 0..spans {
                for w in fillers(lex, 1 + rng.below(3), rng) {
                    words.push(w);
                    target.push(0);
                }
                let t = rng.below(types.len());
                for j in 0..1 + rng.below(3) {
                    words.push(lex.topics[t][rng.below(lex.topics[t].len())].clone());
                    target.push(1 + 2 * t + usize::from(j > 0));
                }
            }
            for w in fillers(lex, rng.below(3), rng) {
                words.push(w);
                target.push(0);
            }
            Example {
                text: words.join(" "),
                pair: None,
                target,
                line: i + 1,
            }
        })
        .collect()
}

/// Entities of each type are runs of 1-3 words from that type's topic;
/// scored by entity-level F1.
pub fn entity_tagging(lex: &Lexicon, types: usize, sizes: SplitSizes, rng: &mut Rng) -> (TaskSpec, TaskData) {
    let names = &ENTITY_TYPES[..types.min(ENTITY_TYPES.len())];
    let spec = TaskSpec::new("entity_tagging", TaskKind::TokenLabeling, bio_labels(names));
    (spec, split(tagged_sentences(lex, names, sizes, rng), sizes))
}

/// One span type; scored by token-level F1.
pub fn span_extraction(lex: &Lexicon, sizes: SplitSizes, rng: &mut Rng) -> (TaskSpec, TaskData) {
    let spec = TaskSpec {
        metric: MetricKind::TokenF1,
        ..TaskSpec::new("span_extraction", TaskKind::TokenLabeling, bio_labels(&["SPAN"]))
    };
    (spec, split(tagged_sentences(lex, &["SPAN"], sizes, rng), sizes))
}

/// Generic words come in synonym pairs (`2i`, `2i+1`). A matching second
/// text rewrites the first through synonyms; a non-matching one rewrites a
/// different sentence.
pub fn pair_matching(lex: &Lexicon, sizes: SplitSizes, rng: &mut Rng) -> (TaskSpec, TaskData) {
    assert!(lex.generic_words.len() >= 4, "pair matching needs at least 4 generic words");
    let spec = TaskSpec::new("pair_match", TaskKind::PairMatch, vec!["0".into(), "1".into()]);
    let pairs = lex.generic_words.len() / 2 * 2;
    let sentence = |rng: &mut Rng| -> Vec<usize> { (0..4 + rng.below(4)).map(|_| rng.below(pairs)).collect() };
    let paraphrase = |ids: &[usize], rng: &mut Rng| -> String {
        ids.iter()
            .map(|&w| {
                let w = if rng.uniform() < 0.5 { w ^ 1 } else { w };
                lex.generic_words[w].as_str()
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let examples = (0..sizes.total())
        .map(|i| {
            let a = sentence(rng);
            let matched = rng.uniform() < 0.5;
            let b = if matched { a.clone() } else { sentence(rng) };
            Example {
                text: a.iter().map(|&w| lex.generic_words[w].as_str()).collect::<Vec<_>>().join(" "),
                pair: Some(paraphrase(&b, rng)),
                target: vec![usize::from(matched)],
                line: i + 1,
            }
        })
        .collect();
    (spec, split(examples, sizes))
}
