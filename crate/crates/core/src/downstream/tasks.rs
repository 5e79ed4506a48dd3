//! Task files. Classification: `text<TAB>label[,label...]`; pair matching:
//! `textA<TAB>textB<TAB>label`; token labeling: CoNLL-style `token<TAB>tag`
//! lines with blank lines between sentences.

use crate::downstream::metrics::{decode_spans, Tag};
use crate::downstream::{TaskKind, TaskSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Whitespace-joined tokens of the (first) text.
    pub text: String,
    pub pair: Option<String>,
    /// Label ids: a set for classification, one tag per token for token
    /// labeling.
    pub target: Vec<usize>,
    /// 1-based line of the example (first token line for CoNLL).
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn parse(spec: &TaskSpec, train: &str, dev: &str, test: &str) -> Result<Self> {
        Ok(TaskData {
            train: parse_split(spec, train)?,
            dev: parse_split(spec, dev)?,
            test: parse_split(spec, test)?,
        })
    }
}

fn data_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Data { line, msg: msg.into() }
}

fn label(spec: &TaskSpec, name: &str, line: usize) -> Result<usize> {
    spec.label_id(name.trim())
        .ok_or_else(|| data_err(line, format!("label '{}' is not one of {:?}", name.trim(), spec.labels)))
}

fn tokens(field: &str, line: usize) -> Result<String> {
    let joined = field.split_whitespace().collect::<Vec<_>>().join(" ");
    if joined.is_empty() {
        return Err(data_err(line, "empty text field"));
    }
    Ok(joined)
}

/// Parses one split. Unknown labels, wrong field counts, and gold tags that
/// are not well-formed BIO are data errors carrying the line number.
pub fn parse_split(spec: &TaskSpec, text: &str) -> Result<Vec<Example>> {
    let examples = match spec.kind {
        TaskKind::Cls | TaskKind::PairMatch => parse_rows(spec, text)?,
        TaskKind::TokenLabeling => parse_conll(spec, text)?,
    };
    if examples.is_empty() {
        return Err(Error::Empty(format!("task '{}' split has no examples", spec.name)));
    }
    Ok(examples)
}

fn parse_rows(spec: &TaskSpec, text: &str) -> Result<Vec<Example>> {
    let fields_wanted = if spec.kind == TaskKind::PairMatch { 3 } else { 2 };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != fields_wanted {
            return Err(data_err(line, format!("expected {fields_wanted} tab-separated fields, found {}", fields.len())));
        }
        let names: Vec<&str> = fields[fields_wanted - 1].split(',').collect();
        if names.len() > 1 && !spec.multi_label {
            return Err(data_err(line, "several labels on a single-label task"));
        }
        let mut target = names.iter().map(|n| label(spec, n, line)).collect::<Result<Vec<_>>>()?;
        target.sort_unstable();
        target.dedup();
        out.push(Example {
            text: tokens(fields[0], line)?,
            pair: (fields_wanted == 3).then(|| tokens(fields[1], line)).transpose()?,
            target,
            line,
        });
    }
    Ok(out)
}

fn parse_conll(spec: &TaskSpec, text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut words: Vec<&str> = Vec::new();
    let mut target: Vec<usize> = Vec::new();
    let mut tag_lines: Vec<usize> = Vec::new();
    let mut flush = |words: &mut Vec<&str>, target: &mut Vec<usize>, tag_lines: &mut Vec<usize>| -> Result<()> {
        if words.is_empty() {
            return Ok(());
        }
        let tags: Vec<Tag> = target.iter().map(|&t| Tag::parse(&spec.labels[t]).expect("validated spec")).collect();
        if decode_spans(&tags).is_none() {
            let bad = (0..tags.len())
                .find(|&k| decode_spans(&tags[..=k]).is_none())
                .expect("some prefix fails");
            return Err(data_err(tag_lines[bad], format!("{} does not continue an entity", tags[bad])));
        }
        out.push(Example {
            text: words.join(" "),
            pair: None,
            target: std::mem::take(target),
            line: tag_lines[0],
        });
        words.clear();
        tag_lines.clear();
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            flush(&mut words, &mut target, &mut tag_lines)?;
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 || fields[0].split_whitespace().count() != 1 {
            return Err(data_err(line, "expected 'token<TAB>tag'"));
        }
        words.push(fields[0].trim());
        target.push(label(spec, fields[1], line)?);
        tag_lines.push(line);
    }
    flush(&mut words, &mut target, &mut tag_lines)?;
    Ok(out)
}

/// Inverse of [`parse_split`].
pub fn write_split(spec: &TaskSpec, examples: &[Example]) -> String {
    let names = |ids: &[usize]| ids.iter().map(|&i| spec.labels[i].as_str()).collect::<Vec<_>>();
    let mut s = String::new();
    for ex in examples {
        match spec.kind {
            TaskKind::Cls => s.push_str(&format!("{}\t{}\n", ex.text, names(&ex.target).join(","))),
            TaskKind::PairMatch => s.push_str(&format!(
                "{}\t{}\t{}\n",
                ex.text,
                ex.pair.as_deref().unwrap_or_default(),
                names(&ex.target).join(",")
            )),
            TaskKind::TokenLabeling => {
                for (w, t) in ex.text.split(' ').zip(names(&ex.target)) {
                    s.push_str(&format!("{w}\t{t}\n"));
                }
                s.push('\n');
            }
        }
    }
    s
}
