//! Fine-tuning on labeled tasks: sentence classification (single- and
//! multi-label), token labeling with BIO tags, and sentence-pair matching.
//!
//! The representation fed to every task head is the encoder followed by the
//! shared mean head of the CUL (batch norm in running-statistics mode); a
//! checkpoint pretrained with plain MAE has no trained mean head and uses the
//! encoder output directly.

pub mod finetune;
pub mod metrics;
pub mod synth;
pub mod tasks;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use finetune::{evaluate, finetune, predict, FinetuneConfig, FinetuneOutcome, Representation, TaskModel};
pub use metrics::{compute_metrics, decode_spans, repair_bio, Metrics, Span, Tag};
pub use tasks::{parse_split, Example, TaskData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Cls,
    TokenLabeling,
    PairMatch,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Cls => "cls",
            TaskKind::TokenLabeling => "token_labeling",
            TaskKind::PairMatch => "pair_match",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(TaskKind::Cls),
            "token_labeling" | "ner" | "se" => Ok(TaskKind::TokenLabeling),
            "pair_match" | "tm" => Ok(TaskKind::PairMatch),
            other => Err(Error::Config(format!(
                "unknown task kind '{other}' (expected cls, token_labeling or pair_match)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    MicroF1,
    EntityF1,
    TokenF1,
    Accuracy,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MicroF1 => "micro_f1",
            MetricKind::EntityF1 => "entity_f1",
            MetricKind::TokenF1 => "token_f1",
            MetricKind::Accuracy => "accuracy",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro_f1" => Ok(MetricKind::MicroF1),
            "entity_f1" => Ok(MetricKind::EntityF1),
            "token_f1" => Ok(MetricKind::TokenF1),
            "accuracy" => Ok(MetricKind::Accuracy),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

/// A labeled task: its shape, label inventory and the metric it is scored by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Class names (classification) or BIO tags (token labeling), in id order.
    pub labels: Vec<String>,
    /// Classification only: each example carries a set of labels, scored
    /// with one sigmoid decision per label.
    pub multi_label: bool,
    /// Headline metric.
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn new(name: &str, kind: TaskKind, labels: Vec<String>) -> Self {
        let metric = match kind {
            TaskKind::TokenLabeling => MetricKind::EntityF1,
            _ => MetricKind::MicroF1,
        };
        TaskSpec {
            name: name.to_string(),
            kind,
            labels,
            multi_label: false,
            metric,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() < 2 {
            return Err(Error::Config(format!("task '{}' needs at least 2 labels", self.name)));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Config(format!("task '{}': duplicate label '{dup}'", self.name)));
        }
        if self.multi_label && self.kind != TaskKind::Cls {
            return Err(Error::Config(format!("task '{}': multi_label applies to cls tasks only", self.name)));
        }
        let metric_ok = match self.kind {
            TaskKind::TokenLabeling => self.metric != MetricKind::MicroF1,
            _ => matches!(self.metric, MetricKind::MicroF1 | MetricKind::Accuracy),
        };
        if !metric_ok {
            return Err(Error::Config(format!(
                "task '{}': metric {} does not apply to {} tasks",
                self.name, self.metric, self.kind
            )));
        }
        if self.kind == TaskKind::TokenLabeling {
            let tags = self.labels.iter().map(|l| Tag::parse(l)).collect::<Option<Vec<_>>>().ok_or_else(|| {
                Error::Config(format!("task '{}': token labels must be O, B-X or I-X", self.name))
            })?;
            if !tags.contains(&Tag::Outside) {
                return Err(Error::Config(format!("task '{}': BIO labels must include O", self.name)));
            }
            for t in &tags {
                let partner = match t {
                    Tag::Begin(x) => Tag::Inside(x.clone()),
                    Tag::Inside(x) => Tag::Begin(x.clone()),
                    Tag::Outside => continue,
                };
                if !tags.contains(&partner) {
                    return Err(Error::Config(format!("task '{}': {t} has no matching {partner}", self.name)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn spec_validation() {
        assert!(TaskSpec::new("a", TaskKind::Cls, labels(&["x", "y"])).validate().is_ok());
        assert!(TaskSpec::new("a", TaskKind::Cls, labels(&["x"])).validate().is_err());
        assert!(TaskSpec::new("a", TaskKind::Cls, labels(&["x", "x"])).validate().is_err());
        assert!(TaskSpec::new("n", TaskKind::TokenLabeling, labels(&["O", "B-P", "I-P"])).validate().is_ok());
        assert!(TaskSpec::new("n", TaskKind::TokenLabeling, labels(&["O", "B-P"])).validate().is_err());
        assert!(TaskSpec::new("n", TaskKind::TokenLabeling, labels(&["B-P", "I-P"])).validate().is_err());
        assert!(TaskSpec::new("n", TaskKind::TokenLabeling, labels(&["O", "PER"])).validate().is_err());
        let mut multi = TaskSpec::new("p", TaskKind::PairMatch, labels(&["0", "1"]));
        multi.multi_label = true;
        assert!(multi.validate().is_err());
        let mut wrong_metric = TaskSpec::new("a", TaskKind::Cls, labels(&["x", "y"]));
        wrong_metric.metric = MetricKind::EntityF1;
        assert!(wrong_metric.validate().is_err());
    }

    #[test]
    fn kind_names() {
        assert_eq!("ner".parse::<TaskKind>().unwrap(), TaskKind::TokenLabeling);
        assert_eq!("TM".parse::<TaskKind>().unwrap(), TaskKind::PairMatch);
        assert_eq!(TaskKind::PairMatch.to_string().parse::<TaskKind>().unwrap(), TaskKind::PairMatch);
        assert!("qa".parse::<TaskKind>().is_err());
    }
}
