//! The pretrain / finetune / eval pipeline behind the commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use varmae::corpus::{build_vocab, read_lines, TokenSequence, Vocabulary};
use varmae::diffcore::{Rng, RngStreams, Stream};
use varmae::downstream::{evaluate, finetune, Metrics, Representation, TaskData, TaskModel, TaskSpec};
use varmae::pretrain::{collapse_monitor, masked_accuracy, pretrain, CollapseStatus, TrainReport, TrainState, DEFAULT_COLLAPSE_THRESHOLD};
use varmae::{Model, Objective};

use crate::checkpoint::{Body, Checkpoint};
use crate::config::RunConfig;
use crate::error::{input_err, runtime, CliError, CliResult};
use crate::fsio::{read_input, sha256_hex, write_atomic};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub const CHECKPOINT_FILE: &str = "pretrained.ckpt";
pub const REPORT_FILE: &str = "report.csv";
pub const GENERAL_REPORT_FILE: &str = "general_report.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DEV_METRICS_FILE: &str = "dev_metrics.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to reproduce a run, plus its headline results.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub run_id: String,
    pub seed: u64,
    pub resolved_config: String,
    pub corpus_sha256: Option<String>,
    pub vocab_sha256: String,
    /// Output file name -> SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub final_metrics: BTreeMap<String, serde_json::Value>,
}

/// Stable identifier of a command applied to a resolved config.
pub fn run_id(command: &str, cfg: &RunConfig) -> String {
    sha256_hex(format!("{command}\n{}", cfg.to_toml()).as_bytes())[..12].to_string()
}

fn write_output(dir: &Path, name: &str, bytes: &[u8], outputs: &mut BTreeMap<String, String>) -> CliResult<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, bytes)?;
    outputs.insert(name.to_string(), sha256_hex(bytes));
    Ok(path)
}

fn finish_manifest(dir: &Path, manifest: &Manifest) -> CliResult<()> {
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    write_atomic(&dir.join("resolved_config.toml"), manifest.resolved_config.as_bytes())
}

/// Non-blank lines of a corpus file.
fn corpus_lines(path: &Path, key: &str) -> CliResult<Vec<String>> {
    let text = read_input(path, key)?;
    let lines: Vec<String> = read_lines(&text).into_iter().map(|(_, l)| l.to_string()).collect();
    if lines.is_empty() {
        return Err(CliError::usage(format!("{key}: {} has no non-blank lines", path.display())));
    }
    Ok(lines)
}

/// The tokenizer a config implies: its vocabulary file, or one built from
/// its corpora (general first). `None` when the config names neither.
pub fn config_vocab(cfg: &RunConfig) -> CliResult<Option<Vocabulary>> {
    if let Some(p) = &cfg.data.vocab {
        let text = read_input(p, "data.vocab")?;
        return Vocabulary::from_file_string(&text)
            .map(Some)
            .map_err(|e| input_err(format!("data.vocab {}", p.display()), e));
    }
    let mut lines = Vec::new();
    if let Some(p) = &cfg.data.general_corpus {
        lines.extend(corpus_lines(p, "data.general_corpus")?);
    }
    if let Some(p) = &cfg.data.corpus {
        lines.extend(corpus_lines(p, "data.corpus")?);
    }
    if lines.is_empty() {
        return Ok(None);
    }
    build_vocab(&lines, cfg.data.min_count).map(Some).map_err(|e| input_err("data", e))
}

fn encode(vocab: &Vocabulary, lines: &[String], path: &Path) -> CliResult<Vec<TokenSequence>> {
    vocab.encode_corpus(lines).map_err(|e| input_err(path.display(), e))
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report: TrainReport,
    pub general_report: Option<TrainReport>,
    pub manifest: Manifest,
}

/// Optional MAE warm start on the general corpus, then the configured
/// objective on (a leading fraction of) the domain corpus.
pub fn run_pretrain(cfg: &RunConfig) -> CliResult<PretrainOutput> {
    let corpus_path = cfg
        .data
        .corpus
        .clone()
        .ok_or_else(|| CliError::usage("config key 'data.corpus': required by pretrain"))?;
    let vocab = config_vocab(cfg)?.expect("corpus is set");
    let domain_lines = corpus_lines(&corpus_path, "data.corpus")?;
    let domain = encode(&vocab, &domain_lines, &corpus_path)?;
    let keep = ((cfg.data.corpus_fraction * domain.len() as f64).ceil() as usize).clamp(1, domain.len());
    let domain = &domain[..keep];
    let general = match &cfg.data.general_corpus {
        Some(p) if cfg.pretrain.general_number_of_epoch > 0 => Some(encode(&vocab, &corpus_lines(p, "data.general_corpus")?, p)?),
        _ => None,
    };
    let train_cfg = cfg.train_config()?;
    let general_cfg = cfg.general_train_config()?;
    let mut model = Model::new(cfg.model_config(vocab.len()), &mut RngStreams::new(cfg.seed)).map_err(|e| input_err("model", e))?;

    let mut state = TrainState::new(cfg.seed);
    let general_report = match &general {
        Some(g) => {
            let r = pretrain(&mut model, g, &general_cfg, &mut state).map_err(|e| runtime("general pretraining", e))?;
            state.adam = Default::default();
            state.step = 0;
            Some(r)
        }
        None => None,
    };
    let report = pretrain(&mut model, domain, &train_cfg, &mut state).map_err(|e| runtime("pretraining", e))?;

    let mut final_metrics = BTreeMap::new();
    if let Some(last) = report.last() {
        for (k, v) in [
            ("total", last.total),
            ("recon_masked", last.recon_masked),
            ("recon_unmasked", last.recon_unmasked),
            ("kl_masked", last.kl_masked),
            ("kl_unmasked", last.kl_unmasked),
            ("kl_per_token", last.kl_per_token),
            ("train_masked_accuracy", last.masked_accuracy),
        ] {
            final_metrics.insert(k.to_string(), serde_json::json!(v));
        }
        final_metrics.insert("optimizer_steps".into(), serde_json::json!(last.step));
    }
    let acc = masked_accuracy(&mut model, domain, &train_cfg, cfg.seed).map_err(|e| runtime("evaluation", e))?;
    final_metrics.insert("eval_masked_accuracy".into(), serde_json::json!(acc));
    if train_cfg.objective == Objective::VarMae {
        let status = match collapse_monitor(&report, DEFAULT_COLLAPSE_THRESHOLD) {
            Ok(CollapseStatus::Healthy) => "healthy".to_string(),
            Ok(CollapseStatus::Collapsed) => "collapsed".to_string(),
            Err(e) => format!("unknown ({e})"),
        };
        final_metrics.insert("collapse_status".into(), serde_json::json!(status));
    }

    let dir = cfg.output_dir.clone();
    let mut outputs = BTreeMap::new();
    let checkpoint = write_output(
        &dir,
        CHECKPOINT_FILE,
        &Checkpoint::pretrained(&model, train_cfg.objective, &vocab).to_bytes(),
        &mut outputs,
    )?;
    write_output(&dir, REPORT_FILE, report.to_csv().as_bytes(), &mut outputs)?;
    if let Some(r) = &general_report {
        write_output(&dir, GENERAL_REPORT_FILE, r.to_csv().as_bytes(), &mut outputs)?;
    }
    write_output(&dir, "vocab.txt", vocab.to_file_string().as_bytes(), &mut outputs)?;
    let manifest = Manifest {
        command: "pretrain".into(),
        version: VERSION.into(),
        run_id: run_id("pretrain", cfg),
        seed: cfg.seed,
        resolved_config: cfg.to_toml(),
        corpus_sha256: Some(vocab.corpus_hash().to_string()),
        vocab_sha256: vocab.hash(),
        outputs,
        final_metrics,
    };
    finish_manifest(&dir, &manifest)?;
    Ok(PretrainOutput {
        dir,
        checkpoint,
        report,
        general_report,
        manifest,
    })
}

/// One CSV row of `metrics.csv`: seed is a number or `mean`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub task: String,
    pub seed: String,
    pub metric: String,
    pub value: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "task", "seed", "metric", "value"]).expect("in-memory write");
    for r in rows {
        w.write_record([&r.run_id, &r.task, &r.seed, &r.metric, &r.value.to_string()]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Per-seed rows of every metric, then one `mean` row per metric.
fn seed_rows(run: &str, task: &str, per_seed: &[(u64, Metrics)]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    let mut sums: Vec<(String, f64)> = Vec::new();
    for (seed, m) in per_seed {
        for (k, v) in m.entries() {
            rows.push(MetricRow {
                run_id: run.into(),
                task: task.into(),
                seed: seed.to_string(),
                metric: k.name().into(),
                value: v,
            });
            match sums.iter_mut().find(|(n, _)| n == k.name()) {
                Some((_, s)) => *s += v,
                None => sums.push((k.name().into(), v)),
            }
        }
    }
    for (metric, s) in sums {
        rows.push(MetricRow {
            run_id: run.into(),
            task: task.into(),
            seed: "mean".into(),
            metric,
            value: s / per_seed.len() as f64,
        });
    }
    rows
}

/// Headline-metric mean over seeds of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskScore {
    pub task: String,
    pub metric: String,
    pub mean: f64,
    pub per_seed: Vec<(u64, Metrics)>,
}

#[derive(Clone, Debug)]
pub struct FinetuneRunOutput {
    pub rows: Vec<MetricRow>,
    pub scores: Vec<TaskScore>,
    pub task_checkpoints: Vec<PathBuf>,
    pub manifest: Manifest,
}

fn load_tasks(cfg: &RunConfig) -> CliResult<Vec<(TaskSpec, TaskData)>> {
    if cfg.tasks.is_empty() {
        return Err(CliError::usage("config: no [[task]] entries"));
    }
    (0..cfg.tasks.len())
        .map(|i| {
            let spec = cfg.task_spec(i)?;
            let t = &cfg.tasks[i];
            let split = |p: &Path, k: &str| -> CliResult<Vec<varmae::downstream::Example>> {
                let text = read_input(p, &format!("task[{i}].{k}"))?;
                varmae::downstream::parse_split(&spec, &text).map_err(|e| input_err(format!("task '{}' {}", t.name, p.display()), e))
            };
            let data = TaskData {
                train: split(&t.train, "train")?,
                dev: split(&t.dev, "dev")?,
                test: split(&t.test, "test")?,
            };
            Ok((spec, data))
        })
        .collect()
}

/// The checkpoint's vocabulary, after checking it against the tokenizer the
/// config implies.
fn checked_vocab(cfg: &RunConfig, ck: &Checkpoint, path: &Path) -> CliResult<Vocabulary> {
    if let Some(v) = config_vocab(cfg)? {
        if v.hash() != ck.vocab.hash() {
            return Err(CliError::usage(format!(
                "vocabulary mismatch: checkpoint {} has vocabulary {} but the task tokenizer is {}",
                path.display(),
                &ck.vocab.hash()[..12],
                &v.hash()[..12]
            )));
        }
    }
    Ok(ck.vocab.clone())
}

fn task_checkpoint_path(dir: &Path, task: &str, seed: u64) -> PathBuf {
    dir.join("tasks").join(task).join(format!("seed{seed}.ckpt"))
}

/// Fine-tunes every task from the pretrained checkpoint once per seed.
pub fn run_finetune(cfg: &RunConfig, checkpoint: &Path) -> CliResult<FinetuneRunOutput> {
    let ck = Checkpoint::load(checkpoint)?;
    let vocab = checked_vocab(cfg, &ck, checkpoint)?;
    let Body::Pretrained { model, objective } = &ck.body else {
        return Err(CliError::usage(format!("{} is a task checkpoint; finetune needs a pretrained one", checkpoint.display())));
    };
    let tasks = load_tasks(cfg)?;
    let ft = cfg.finetune_config()?;
    let representation = cfg.representation()?.unwrap_or_else(|| Representation::for_objective(*objective));
    let run = run_id("finetune", cfg);
    let dir = cfg.output_dir.clone();
    let mut outputs = BTreeMap::new();
    let (mut rows, mut dev_rows, mut scores, mut task_checkpoints) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (spec, data) in &tasks {
        let mut test = Vec::new();
        let mut dev = Vec::new();
        for &seed in &cfg.finetune.seeds {
            let mut tm = TaskModel::from_pretrained(model, representation, spec, &mut Rng::new(seed, Stream::Init))
                .map_err(|e| input_err(format!("task '{}'", spec.name), e))?;
            tm.encoder.dropout = cfg.finetune.dropout;
            tm.encoder.attention_dropout = cfg.finetune.dropout;
            let out = finetune(&mut tm, &vocab, data, &ft, seed).map_err(|e| match e {
                varmae::Error::Data { .. } | varmae::Error::Config(_) => input_err(format!("task '{}'", spec.name), e),
                e => runtime(format!("fine-tuning '{}' seed {seed}", spec.name), e),
            })?;
            let path = task_checkpoint_path(&dir, &spec.name, seed);
            let rel = path.strip_prefix(&dir).expect("under output dir").to_string_lossy().into_owned();
            write_output(&dir, &rel, &Checkpoint::task(&tm, seed, &vocab).to_bytes(), &mut outputs)?;
            task_checkpoints.push(path);
            test.push((seed, out.test));
            dev.push((seed, out.dev));
        }
        let mean = test.iter().map(|(_, m)| m.get(spec.metric).expect("headline metric")).sum::<f64>() / test.len() as f64;
        rows.extend(seed_rows(&run, &spec.name, &test));
        dev_rows.extend(seed_rows(&run, &spec.name, &dev));
        scores.push(TaskScore {
            task: spec.name.clone(),
            metric: spec.metric.name().into(),
            mean,
            per_seed: test,
        });
    }
    write_output(&dir, METRICS_FILE, metrics_csv(&rows).as_bytes(), &mut outputs)?;
    write_output(&dir, DEV_METRICS_FILE, metrics_csv(&dev_rows).as_bytes(), &mut outputs)?;
    let final_metrics = scores
        .iter()
        .map(|s| (format!("{}.{}", s.task, s.metric), serde_json::json!(s.mean)))
        .collect();
    let manifest = Manifest {
        command: "finetune".into(),
        version: VERSION.into(),
        run_id: run,
        seed: cfg.seed,
        resolved_config: cfg.to_toml(),
        corpus_sha256: Some(vocab.corpus_hash().to_string()),
        vocab_sha256: vocab.hash(),
        outputs,
        final_metrics,
    };
    finish_manifest(&dir, &manifest)?;
    Ok(FinetuneRunOutput {
        rows,
        scores,
        task_checkpoints,
        manifest,
    })
}

/// Task checkpoints at `path`: the file itself, or every `*.ckpt` below a
/// directory in sorted order.
fn collect_checkpoints(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(CliError::usage(format!("checkpoint: {} does not exist", path.display())));
    }
    let mut found = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| CliError::usage(format!("checkpoint: {}: {e}", d.display())))?;
        for e in entries {
            let p = e.map_err(|e| CliError::usage(format!("checkpoint: {e}")))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "ckpt") {
                found.push(p);
            }
        }
    }
    found.sort();
    found.retain(|p| !p.ends_with(CHECKPOINT_FILE));
    if found.is_empty() {
        return Err(CliError::usage(format!("checkpoint: no task checkpoints under {}", path.display())));
    }
    Ok(found)
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub rows: Vec<MetricRow>,
    pub csv_path: PathBuf,
}

/// Re-scores fine-tuned task checkpoints on their test split.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult<EvalOutput> {
    let paths = collect_checkpoints(checkpoint)?;
    let tasks = load_tasks(cfg)?;
    let run = run_id("eval", cfg);
    let ft = cfg.finetune_config()?;
    let mut per_task: Vec<(String, Vec<(u64, Metrics)>)> = Vec::new();
    for path in &paths {
        let ck = Checkpoint::load(path)?;
        let vocab = checked_vocab(cfg, &ck, path)?;
        let Body::Task { model, seed } = ck.body else {
            return Err(CliError::usage(format!("{} is a pretrained checkpoint; eval needs task checkpoints", path.display())));
        };
        let mut model = model;
        let (_, data) = tasks
            .iter()
            .find(|(s, _)| s.name == model.spec.name)
            .ok_or_else(|| CliError::usage(format!("{}: task '{}' is not in the config", path.display(), model.spec.name)))?;
        let m = evaluate(&mut model, &vocab, &data.test, ft.batch_size, ft.max_len)
            .map_err(|e| input_err(format!("task '{}'", model.spec.name), e))?;
        match per_task.iter_mut().find(|(n, _)| *n == model.spec.name) {
            Some((_, v)) => v.push((seed, m)),
            None => per_task.push((model.spec.name.clone(), vec![(seed, m)])),
        }
    }
    let rows: Vec<MetricRow> = per_task.iter().flat_map(|(t, v)| seed_rows(&run, t, v)).collect();
    let csv_path = cfg.output_dir.join(EVAL_METRICS_FILE);
    write_atomic(&csv_path, metrics_csv(&rows).as_bytes())?;
    Ok(EvalOutput { rows, csv_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use varmae::downstream::MetricKind;

    #[test]
    fn seed_rows_end_with_means() {
        let m = |v: f64| Metrics {
            micro_f1: Some(v),
            accuracy: Some(v),
            ..Default::default()
        };
        let rows = seed_rows("r", "t", &[(1, m(0.5)), (2, m(1.0)), (3, m(0.0))]);
        assert_eq!(rows.len(), 8);
        let means: Vec<_> = rows.iter().filter(|r| r.seed == "mean").collect();
        assert_eq!(means.len(), 2);
        assert!(means.iter().all(|r| r.value == 0.5));
        assert_eq!(rows.iter().filter(|r| r.metric == MetricKind::MicroF1.name()).count(), 4);
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("run_id,task,seed,metric,value\nr,t,1,"));
    }
}
