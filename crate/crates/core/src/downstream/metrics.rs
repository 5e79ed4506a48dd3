//! Micro-F1 over label decisions, entity-level F1 over exact BIO spans,
//! token-level F1 over non-O tags, and accuracy.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::downstream::{MetricKind, TaskKind, TaskSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    pub fn parse(s: &str) -> Option<Tag> {
        match s {
            "O" => Some(Tag::Outside),
            _ => match s.split_once('-') {
                Some(("B", x)) if !x.is_empty() => Some(Tag::Begin(x.to_string())),
                Some(("I", x)) if !x.is_empty() => Some(Tag::Inside(x.to_string())),
                _ => None,
            },
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(x) => write!(f, "B-{x}"),
            Tag::Inside(x) => write!(f, "I-{x}"),
        }
    }
}

/// Entity of type `label` covering token positions `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

/// `I-X` that does not continue an `X` entity becomes `B-X`.
pub fn repair_bio(tags: &[Tag]) -> Vec<Tag> {
    let mut out: Vec<Tag> = Vec::with_capacity(tags.len());
    for t in tags {
        let fixed = match t {
            Tag::Inside(x) => match out.last() {
                Some(Tag::Begin(p)) | Some(Tag::Inside(p)) if p == x => t.clone(),
                _ => Tag::Begin(x.clone()),
            },
            _ => t.clone(),
        };
        out.push(fixed);
    }
    out
}

/// Spans of a well-formed BIO sequence; `None` if some `I-X` has no head.
pub fn decode_spans(tags: &[Tag]) -> Option<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, t) in tags.iter().enumerate() {
        match t {
            Tag::Inside(x) => match open.as_mut() {
                Some(s) if &s.label == x => s.end = i + 1,
                _ => return None,
            },
            _ => {
                spans.extend(open.take());
                if let Tag::Begin(x) = t {
                    open = Some(Span {
                        label: x.clone(),
                        start: i,
                        end: i + 1,
                    });
                }
            }
        }
    }
    spans.extend(open);
    Some(spans)
}

/// Scores for one evaluation set; fields that do not apply to the task kind
/// are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub micro_f1: Option<f64>,
    pub entity_f1: Option<f64>,
    pub token_f1: Option<f64>,
    pub accuracy: Option<f64>,
}

impl Metrics {
    pub fn get(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::MicroF1 => self.micro_f1,
            MetricKind::EntityF1 => self.entity_f1,
            MetricKind::TokenF1 => self.token_f1,
            MetricKind::Accuracy => self.accuracy,
        }
    }

    /// Populated metrics in a fixed order.
    pub fn entries(&self) -> Vec<(MetricKind, f64)> {
        [MetricKind::MicroF1, MetricKind::EntityF1, MetricKind::TokenF1, MetricKind::Accuracy]
            .into_iter()
            .filter_map(|k| self.get(k).map(|v| (k, v)))
            .collect()
    }
}

/// `2tp / (2tp + fp + fn)`; an empty problem (nothing gold, nothing
/// predicted) scores 1.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn tags_of(spec: &TaskSpec, ids: &[usize]) -> Result<Vec<Tag>> {
    ids.iter()
        .map(|&i| {
            spec.labels
                .get(i)
                .and_then(|l| Tag::parse(l))
                .ok_or_else(|| Error::Contract(format!("tag id {i} is not a BIO label of '{}'", spec.name)))
        })
        .collect()
}

/// Scores `pred` against `gold`, aligned example by example. Classification
/// targets are label-id sets (one element unless multi-label); token
/// labeling targets are one tag id per token. Malformed BIO in `pred` is
/// repaired with [`repair_bio`]; malformed gold is a data error.
pub fn compute_metrics(spec: &TaskSpec, gold: &[Vec<usize>], pred: &[Vec<usize>]) -> Result<Metrics> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!("{} gold vs {} predicted examples", gold.len(), pred.len())));
    }
    if gold.is_empty() {
        return Err(Error::Empty("no examples to score".into()));
    }
    let c = spec.num_classes();
    if let Some(bad) = gold.iter().chain(pred).flatten().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label id {bad} outside the {c} labels of '{}'", spec.name)));
    }
    match spec.kind {
        TaskKind::Cls | TaskKind::PairMatch => {
            let (mut tp, mut fp, mut fn_, mut exact) = (0, 0, 0, 0);
            for (g, p) in gold.iter().zip(pred) {
                let g: BTreeSet<usize> = g.iter().copied().collect();
                let p: BTreeSet<usize> = p.iter().copied().collect();
                tp += g.intersection(&p).count();
                fp += p.difference(&g).count();
                fn_ += g.difference(&p).count();
                exact += usize::from(g == p);
            }
            Ok(Metrics {
                micro_f1: Some(f1(tp, fp, fn_)),
                accuracy: Some(exact as f64 / gold.len() as f64),
                ..Metrics::default()
            })
        }
        TaskKind::TokenLabeling => {
            let (mut etp, mut efp, mut efn) = (0, 0, 0);
            let (mut ttp, mut tfp, mut tfn) = (0, 0, 0);
            let (mut correct, mut tokens) = (0, 0);
            for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
                if g.len() != p.len() {
                    return Err(Error::Contract(format!(
                        "example {i}: {} gold vs {} predicted tags",
                        g.len(),
                        p.len()
                    )));
                }
                let gt = tags_of(spec, g)?;
                let pt = repair_bio(&tags_of(spec, p)?);
                let gs: BTreeSet<Span> = decode_spans(&gt)
                    .ok_or_else(|| Error::Data {
                        line: i + 1,
                        msg: "gold tags are not valid BIO".into(),
                    })?
                    .into_iter()
                    .collect();
                let ps: BTreeSet<Span> = decode_spans(&pt).expect("repaired tags are valid BIO").into_iter().collect();
                etp += gs.intersection(&ps).count();
                efp += ps.difference(&gs).count();
                efn += gs.difference(&ps).count();
                for (a, b) in gt.iter().zip(&pt) {
                    tokens += 1;
                    correct += usize::from(a == b);
                    if a == b {
                        ttp += usize::from(a != &Tag::Outside);
                    } else {
                        tfp += usize::from(b != &Tag::Outside);
                        tfn += usize::from(a != &Tag::Outside);
                    }
                }
            }
            Ok(Metrics {
                entity_f1: Some(f1(etp, efp, efn)),
                token_f1: Some(f1(ttp, tfp, tfn)),
                accuracy: Some(correct as f64 / tokens.max(1) as f64),
                ..Metrics::default()
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ner() -> TaskSpec {
        let labels = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"].iter().map(|s| s.to_string()).collect();
        TaskSpec::new("ner", TaskKind::TokenLabeling, labels)
    }

    fn ids(spec: &TaskSpec, tags: &[&str]) -> Vec<usize> {
        tags.iter().map(|t| spec.label_id(t).unwrap()).collect()
    }

    fn tags(ts: &[&str]) -> Vec<Tag> {
        ts.iter().map(|t| Tag::parse(t).unwrap()).collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let spec = ner();
        let gold = vec![ids(&spec, &["B-PER", "I-PER", "O", "B-LOC"]), ids(&spec, &["O", "O"])];
        let m = compute_metrics(&spec, &gold, &gold).unwrap();
        assert_eq!((m.entity_f1, m.token_f1, m.accuracy), (Some(1.0), Some(1.0), Some(1.0)));
        let cls = TaskSpec::new("c", TaskKind::Cls, vec!["a".into(), "b".into()]);
        let g = vec![vec![0], vec![1], vec![1]];
        let m = compute_metrics(&cls, &g, &g).unwrap();
        assert_eq!((m.micro_f1, m.accuracy), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn spans_must_match_exactly() {
        let spec = ner();
        // gold (PER, 1..2), predicted (PER, 1..3)
        let gold = vec![ids(&spec, &["O", "B-PER", "O", "O"])];
        let pred = vec![ids(&spec, &["O", "B-PER", "I-PER", "O"])];
        assert_eq!(compute_metrics(&spec, &gold, &pred).unwrap().entity_f1, Some(0.0));
    }

    #[test]
    fn one_hit_one_miss_one_spurious() {
        let spec = ner();
        let gold = vec![
            ids(&spec, &["B-PER", "I-PER", "O"]),
            ids(&spec, &["O", "B-LOC", "O"]),
            ids(&spec, &["O", "O", "O"]),
        ];
        let pred = vec![
            ids(&spec, &["B-PER", "I-PER", "O"]),
            ids(&spec, &["O", "O", "O"]),
            ids(&spec, &["O", "O", "B-LOC"]),
        ];
        let m = compute_metrics(&spec, &gold, &pred).unwrap();
        assert_eq!(m.entity_f1, Some(0.5));
        // tokens: 2 hits; 1 missed LOC (fn); 1 spurious LOC (fp)
        assert_eq!(m.token_f1, Some(4.0 / 6.0));
    }

    #[test]
    fn headless_inside_is_repaired_in_predictions_only() {
        assert_eq!(repair_bio(&tags(&["O", "I-PER", "I-PER", "I-LOC"])), tags(&["O", "B-PER", "I-PER", "B-LOC"]));
        assert_eq!(decode_spans(&tags(&["O", "I-PER"])), None);
        let spec = ner();
        let gold = vec![ids(&spec, &["O", "B-PER", "I-PER"])];
        let pred = vec![ids(&spec, &["O", "I-PER", "I-PER"])];
        assert_eq!(compute_metrics(&spec, &gold, &pred).unwrap().entity_f1, Some(1.0));
        assert!(matches!(compute_metrics(&spec, &pred, &gold), Err(Error::Data { .. })));
    }

    #[test]
    fn adjacent_entities_split_on_begin() {
        let spans = decode_spans(&tags(&["B-PER", "B-PER", "I-PER", "B-LOC"])).unwrap();
        assert_eq!(spans.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(), vec![(0, 1), (1, 3), (3, 4)]);
    }

    #[test]
    fn multi_label_micro_f1_counts_label_decisions() {
        let spec = TaskSpec {
            multi_label: true,
            ..TaskSpec::new("m", TaskKind::Cls, vec!["a".into(), "b".into(), "c".into()])
        };
        let gold = vec![vec![0, 1], vec![2]];
        let pred = vec![vec![0], vec![1, 2]];
        // tp 2 (a, c), fp 1 (b in #2), fn 1 (b in #1)
        let m = compute_metrics(&spec, &gold, &pred).unwrap();
        assert_eq!(m.micro_f1, Some(4.0 / 6.0));
        assert_eq!(m.accuracy, Some(0.0));
    }

    #[test]
    fn single_label_micro_f1_is_accuracy() {
        let spec = TaskSpec::new("c", TaskKind::Cls, vec!["a".into(), "b".into(), "c".into()]);
        let gold = vec![vec![0], vec![1], vec![2], vec![0]];
        let pred = vec![vec![0], vec![2], vec![2], vec![1]];
        let m = compute_metrics(&spec, &gold, &pred).unwrap();
        assert_eq!(m.micro_f1, Some(0.5));
        assert_eq!(m.accuracy, Some(0.5));
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let spec = ner();
        assert!(compute_metrics(&spec, &[vec![0]], &[]).is_err());
        assert!(compute_metrics(&spec, &[vec![0, 0]], &[vec![0]]).is_err());
        assert!(compute_metrics(&spec, &[vec![9]], &[vec![0]]).is_err());
    }
}
