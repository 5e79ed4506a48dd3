//! Generates a self-contained synthetic workspace: general and domain
//! corpora, four labeled tasks (classification, entity tagging, span
//! extraction, pair matching), a run config and two sweep grids.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use varmae::corpus::synth::{domain_corpus, generic_corpus, Lexicon};
use varmae::diffcore::{Rng, Stream};
use varmae::downstream::synth::{entity_tagging, keyword_classification, pair_matching, span_extraction, SplitSizes};
use varmae::downstream::tasks::write_split;
use varmae::downstream::{TaskData, TaskSpec};

use crate::config::{RunConfig, TaskSection};
use crate::error::{CliError, CliResult};
use crate::fsio::write_atomic;
use crate::sweep::{Axis, AxisValue, SweepGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// Seconds per run; for tests and sweeps.
    Tiny,
    /// The desk model on a few thousand sentences.
    Desk,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "desk" => Ok(Scale::Desk),
            other => Err(format!("unknown scale '{other}' (expected tiny or desk)")),
        }
    }
}

struct Sizes {
    topics: usize,
    words_per_topic: usize,
    function: usize,
    generic: usize,
    corpus_lines: usize,
    split: SplitSizes,
}

impl Scale {
    fn sizes(self) -> Sizes {
        match self {
            Scale::Tiny => Sizes {
                topics: 4,
                words_per_topic: 12,
                function: 10,
                generic: 40,
                corpus_lines: 240,
                split: SplitSizes {
                    train: 200,
                    dev: 40,
                    test: 80,
                },
            },
            Scale::Desk => Sizes {
                topics: 6,
                words_per_topic: 30,
                function: 20,
                generic: 120,
                corpus_lines: 3000,
                split: SplitSizes {
                    train: 400,
                    dev: 100,
                    test: 200,
                },
            },
        }
    }

    fn config(self) -> RunConfig {
        let mut cfg: RunConfig = toml::from_str("output_dir = \"runs/main\"").expect("minimal config parses");
        cfg.data.corpus = Some("domain.txt".into());
        cfg.data.general_corpus = Some("general.txt".into());
        let p = &mut cfg.pretrain;
        p.batch_size = 32;
        p.gradient_accumulation_steps = 1;
        p.log_every = 5;
        if self == Scale::Tiny {
            let m = &mut cfg.model;
            m.hidden_size = 32;
            m.attention_heads = 2;
            m.attention_head_size = 16;
            m.ffn_inner_hidden_size = 64;
            m.maximum_position = 48;
            cfg.pretrain.maximum_length = 48;
            cfg.finetune.maximum_length = 48;
            cfg.finetune.batch_size = 16;
        }
        cfg
    }
}

/// Paths of a generated workspace.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub masking_grid: PathBuf,
    pub fraction_grid: PathBuf,
}

fn write(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    write_atomic(&dir.join(name), text.as_bytes())
}

fn lines(v: &[String]) -> String {
    let mut s = v.join("\n");
    s.push('\n');
    s
}

fn task_files(dir: &Path, short: &str, spec: &TaskSpec, data: &TaskData) -> CliResult<TaskSection> {
    let mut paths = Vec::new();
    for (split, ex) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        let rel = PathBuf::from("tasks").join(short).join(format!("{split}.tsv"));
        write_atomic(&dir.join(&rel), write_split(spec, ex).as_bytes())?;
        paths.push(rel);
    }
    let [train, dev, test] = <[PathBuf; 3]>::try_from(paths).expect("three splits");
    Ok(TaskSection {
        name: short.into(),
        kind: spec.kind.to_string(),
        labels: spec.labels.clone(),
        multi_label: spec.multi_label,
        metric: Some(spec.metric.name().into()),
        train,
        dev,
        test,
    })
}

fn grid_toml(axis: Axis, values: Vec<f64>, out: &str) -> String {
    let grid = SweepGrid {
        config: "config.toml".into(),
        axis,
        values: values.into_iter().map(AxisValue::Number).collect(),
        objectives: vec!["mae".into(), "varmae".into()],
        output_dir: out.into(),
    };
    toml::to_string(&grid).expect("grid serializes")
}

/// Writes the workspace into `dir`; every file is a function of `seed`.
pub fn generate(dir: &Path, scale: Scale, seed: u64) -> CliResult<Workspace> {
    let s = scale.sizes();
    let mut rng = Rng::new(seed, Stream::Data);
    let lex = Lexicon::generate(s.topics, s.words_per_topic, s.function, s.generic, &mut rng);
    write(dir, "general.txt", &lines(&generic_corpus(&lex, s.corpus_lines, 6, 12, &mut rng)))?;
    write(dir, "domain.txt", &lines(&domain_corpus(&lex, s.corpus_lines, 6, 12, &mut rng)))?;
    let tasks = [
        ("cls", keyword_classification(&lex, s.topics.min(4), s.split, &mut rng)),
        ("ner", entity_tagging(&lex, 3, s.split, &mut rng)),
        ("se", span_extraction(&lex, s.split, &mut rng)),
        ("tm", pair_matching(&lex, s.split, &mut rng)),
    ];
    let mut cfg = scale.config();
    cfg.seed = seed;
    for (short, (spec, data)) in &tasks {
        cfg.tasks.push(task_files(dir, short, spec, data)?);
    }
    let ws = Workspace {
        dir: dir.to_path_buf(),
        config: dir.join("config.toml"),
        masking_grid: dir.join("sweep_masking.toml"),
        fraction_grid: dir.join("sweep_fraction.toml"),
    };
    write_atomic(&ws.config, cfg.to_toml().as_bytes())?;
    write_atomic(&ws.masking_grid, grid_toml(Axis::MaskingRatio, vec![0.05, 0.15, 0.30], "runs/sweep_masking").as_bytes())?;
    write_atomic(&ws.fraction_grid, grid_toml(Axis::CorpusFraction, vec![1.0 / 3.0, 1.0], "runs/sweep_fraction").as_bytes())?;
    RunConfig::load(&ws.config, None).map_err(|e| CliError::Runtime(anyhow::anyhow!("generated config is invalid: {e}")))?;
    Ok(ws)
}
