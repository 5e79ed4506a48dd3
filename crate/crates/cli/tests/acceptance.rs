//! Acceptance criteria 1-10, one PASS/FAIL line each. Pass criterion
//! numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use varmae::corpus::synth::{domain_corpus, Lexicon};
use varmae::corpus::{build_vocab, TokenSequence};
use varmae::diffcore::{Rng, RngStreams, Stream};
use varmae::downstream::{compute_metrics, TaskKind, TaskSpec};
use varmae::pretrain::{collapse_monitor, masked_accuracy, pretrain, trailing_kl, CollapseStatus, FreezePolicy, TrainConfig, TrainState};
use varmae::{Model, ModelConfig, Objective};
use varmae_cli::commands::{run_eval, run_finetune, run_pretrain, METRICS_FILE};
use varmae_cli::config::RunConfig;
use varmae_cli::oracles::{self, OracleOutcome};
use varmae_cli::report::render_table;
use varmae_cli::sweep::{run_sweep, Axis, AxisValue, SweepGrid};
use varmae_cli::synth::{generate, Scale};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn from_oracles(outcomes: &[OracleOutcome]) -> Verdict {
    verdict(
        outcomes.iter().all(|o| o.passed),
        outcomes.iter().map(|o| format!("{}: {}", o.name, o.detail)).collect::<Vec<_>>().join("; "),
    )
}

fn within(v: Verdict, started: Instant, budget_secs: f64) -> Verdict {
    let secs = started.elapsed().as_secs_f64();
    let ok = secs < budget_secs;
    verdict(v.passed && ok, format!("{} [{secs:.1}s, budget {budget_secs}s]", v.detail))
}

fn kl_oracle() -> Verdict {
    let t = Instant::now();
    within(from_oracles(&[oracles::kl_oracle(1)]), t, 60.0)
}

fn gradient_oracles() -> Verdict {
    let t = Instant::now();
    let outcomes = [
        oracles::encoder_gradient_oracle(1),
        oracles::cul_gradient_oracle(1),
        oracles::full_loss_gradient_oracle(1),
    ];
    within(from_oracles(&outcomes), t, 300.0)
}

fn masking_statistics() -> Verdict {
    let t = Instant::now();
    within(from_oracles(&[oracles::masking_oracle(1)]), t, 60.0)
}

fn loss_decomposition() -> Verdict {
    from_oracles(&oracles::loss_decomposition_oracles(1))
}

/// 50 random 7-word sentences over a 110-word vocabulary.
fn smoke_corpus() -> Vec<TokenSequence> {
    let mut rng = Rng::new(7, Stream::Data);
    let lex = Lexicon::generate(0, 0, 20, 90, &mut rng);
    let words: Vec<String> = lex.all_words().cloned().collect();
    let lines: Vec<String> = (0..50)
        .map(|_| (0..7).map(|_| words[rng.below(words.len())].clone()).collect::<Vec<_>>().join(" "))
        .collect();
    build_vocab(&lines, 1).unwrap().encode_corpus(&lines).unwrap()
}

fn overfit_smoke() -> Verdict {
    let t = Instant::now();
    let corpus = smoke_corpus();
    let vocab_size = corpus.iter().flat_map(|s| &s.ids).max().unwrap() + 1;
    let mut parts = Vec::new();
    let mut passed = true;
    for objective in [Objective::Mae, Objective::VarMae] {
        let mut model = Model::new(ModelConfig::desk(vocab_size), &mut RngStreams::new(1)).unwrap();
        let cfg = TrainConfig {
            objective,
            freeze: FreezePolicy::none(),
            learning_rate: 8e-3,
            batch_size: 50,
            grad_accum_steps: 1,
            epochs: 300,
            log_every: 50,
            ..TrainConfig::desk()
        };
        let report = pretrain(&mut model, &corpus, &cfg, &mut TrainState::new(1)).unwrap();
        let acc = (99..104).map(|s| masked_accuracy(&mut model, &corpus, &cfg, s).unwrap()).sum::<f64>() / 5.0;
        let steps = report.last().map_or(0, |r| r.step);
        passed &= acc >= 0.95 && steps == 300;
        parts.push(format!("{objective} {steps} steps masked accuracy {acc:.3} (>= 0.95)"));
    }
    within(verdict(passed, parts.join("; ")), t, 600.0)
}

/// 4352 domain sentences: 17 optimizer steps of 64 x 4 per epoch, so three
/// epochs log 51 rows.
fn collapse_corpus() -> (Vec<TokenSequence>, usize) {
    let mut rng = Rng::new(11, Stream::Data);
    let lex = Lexicon::generate(6, 30, 20, 0, &mut rng);
    let lines = domain_corpus(&lex, 4352, 6, 12, &mut rng);
    let vocab = build_vocab(&lines, 1).unwrap();
    (vocab.encode_corpus(&lines).unwrap(), vocab.len())
}

fn collapse_run(corpus: &[TokenSequence], vocab_size: usize, batch_norm: bool, lambda: f64) -> (CollapseStatus, f64, f64) {
    let mut mc = ModelConfig::desk(vocab_size);
    mc.cul.mu_batch_norm = batch_norm;
    let mut model = Model::new(mc, &mut RngStreams::new(1)).unwrap();
    let cfg = TrainConfig {
        lambda_masked: lambda,
        lambda_unmasked: lambda,
        log_every: 1,
        ..TrainConfig::desk()
    };
    let report = pretrain(&mut model, corpus, &cfg, &mut TrainState::new(1)).unwrap();
    let first = report.rows[0].kl_per_token;
    (collapse_monitor(&report, 0.01).unwrap(), first, trailing_kl(&report).unwrap())
}

fn collapse_ablation() -> Verdict {
    let t = Instant::now();
    let (corpus, vocab_size) = collapse_corpus();
    let (on, on_first, on_tail) = collapse_run(&corpus, vocab_size, true, 10.0);
    let (off, off_first, off_tail) = collapse_run(&corpus, vocab_size, false, 1e4);
    within(
        verdict(
            on == CollapseStatus::Healthy && off == CollapseStatus::Collapsed,
            format!(
                "BN on, lambda 10: {on:?} (KL/token {on_first:.3} -> trailing {on_tail:.3e}); BN off, lambda 1e4: {off:?} (KL/token {off_first:.3} -> trailing {off_tail:.3e}); threshold 0.01"
            ),
        ),
        t,
        1200.0,
    )
}

fn protocol_fidelity() -> Verdict {
    from_oracles(&[oracles::freeze_oracle(1), oracles::accumulation_oracle(1)])
}

/// Tiny synthetic workspace with every configured file in place.
fn workspace(dir: &Path) -> RunConfig {
    let ws = generate(dir, Scale::Tiny, 1).unwrap();
    RunConfig::load(&ws.config, None).unwrap()
}

fn bio_hand_case() -> f64 {
    let labels = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"];
    let spec = TaskSpec::new("ner", TaskKind::TokenLabeling, labels.iter().map(|s| s.to_string()).collect());
    let ids = |tags: &[&str]| tags.iter().map(|t| spec.label_id(t).unwrap()).collect::<Vec<_>>();
    let gold = ids(&["B-PER", "I-PER", "O", "B-LOC"]);
    let pred = ids(&["B-PER", "I-PER", "O", "B-ORG"]);
    compute_metrics(&spec, &[gold], &[pred]).unwrap().entity_f1.unwrap()
}

fn downstream_harness() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = workspace(tmp.path());
    cfg.tasks.retain(|t| t.name == "cls" || t.name == "ner");
    let pre = run_pretrain(&cfg).unwrap();
    let out = run_finetune(&cfg, &pre.checkpoint).unwrap();
    let cls = out.scores.iter().find(|s| s.task == "cls").unwrap();
    let accs: Vec<f64> = cls.per_seed.iter().map(|(_, m)| m.accuracy.unwrap()).collect();
    let separable = accs.iter().all(|&a| a >= 0.95) && cls.mean >= 0.95;

    let csv = std::fs::read_to_string(cfg.output_dir.join(METRICS_FILE)).unwrap();
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let e = groups.entry((f[1].into(), f[3].into())).or_default();
        let v: f64 = f[4].parse().unwrap();
        if f[2] == "mean" {
            e.1.push(v);
        } else {
            e.0.push(v);
        }
    }
    let averaged = !groups.is_empty()
        && groups.values().all(|(seeds, mean)| {
            seeds.len() == 3 && mean.len() == 1 && (seeds.iter().sum::<f64>() / 3.0 - mean[0]).abs() <= 1e-12
        });
    let f1 = bio_hand_case();
    verdict(
        separable && averaged && f1 == 0.5,
        format!(
            "cls test accuracy per seed {accs:?}, mean {:.4} (>= 0.95); {} (task, metric) groups with 3 seed rows + mean row: {averaged}; hand BIO entity F1 = {f1} (== 1/2)",
            cls.mean,
            groups.len()
        ),
    )
}

fn sweep_shape(grid: &SweepGrid, base: &RunConfig, rows: usize) -> (bool, String) {
    let (cells, path) = run_sweep(grid, base, |_| {}).unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let width = 2 + base.tasks.len() + 2;
    let populated = cells.len() == rows
        && lines.len() == rows + 1
        && lines[1..].iter().all(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f.len() == width && f[2..width - 1].iter().all(|v| v.parse::<f64>().is_ok()) && f[width - 1] == "ok"
        });
    let table = render_table(&csv).unwrap();
    (populated, table)
}

fn sweep_harness() -> Verdict {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let base = workspace(tmp.path());
    let grid = |axis, values: Vec<f64>, out: &str| SweepGrid {
        config: tmp.path().join("config.toml"),
        axis,
        values: values.into_iter().map(AxisValue::Number).collect(),
        objectives: vec!["mae".into(), "varmae".into()],
        output_dir: tmp.path().join(out),
    };
    let (masking_ok, masking) = sweep_shape(&grid(Axis::MaskingRatio, vec![0.05, 0.15, 0.30], "masking"), &base, 6);
    let (fraction_ok, fraction) = sweep_shape(&grid(Axis::CorpusFraction, vec![1.0 / 3.0, 1.0], "fraction"), &base, 4);
    println!("{masking}\n{fraction}");
    verdict(
        masking_ok && fraction_ok,
        format!(
            "masking-ratio 3x2 populated: {masking_ok}; corpus-fraction 2x2 populated: {fraction_ok} [{:.1}s]",
            t.elapsed().as_secs_f64()
        ),
    )
}

/// Every file under `dir`, relative path -> bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, Scale::Tiny, 1).unwrap();
    generate(&b, Scale::Tiny, 1).unwrap();
    let synth_same = snapshot(&a) == snapshot(&b);

    let mut cfg = RunConfig::load(&a.join("config.toml"), None).unwrap();
    cfg.tasks.truncate(2);
    let grid = SweepGrid {
        config: a.join("config.toml"),
        axis: Axis::CorpusFraction,
        values: vec![AxisValue::Number(0.5)],
        objectives: vec!["varmae".into()],
        output_dir: tmp.path().join("sweep"),
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let pre = run_pretrain(&cfg).unwrap();
        run_finetune(&cfg, &pre.checkpoint).unwrap();
        run_eval(&cfg, &cfg.output_dir.join("tasks")).unwrap();
        run_sweep(&grid, &cfg, |_| {}).unwrap();
        let gradcheck: Vec<String> = oracles::suite(1).iter().map(|o| o.to_string()).collect();
        let report = render_table(&std::fs::read_to_string(cfg.output_dir.join(METRICS_FILE)).unwrap()).unwrap();
        runs.push((snapshot(&cfg.output_dir), snapshot(&grid.output_dir), gradcheck, report));
    }
    let files = runs[0].0.len() + runs[0].1.len();
    let ckpts = runs[0].0.keys().filter(|p| p.extension().is_some_and(|x| x == "ckpt")).count();
    let same = [
        ("synth", synth_same),
        ("pretrain/finetune/eval", runs[0].0 == runs[1].0),
        ("sweep", runs[0].1 == runs[1].1),
        ("gradcheck", runs[0].2 == runs[1].2),
        ("report", runs[0].3 == runs[1].3),
    ];
    verdict(
        same.iter().all(|(_, s)| *s),
        format!(
            "{files} output files ({ckpts} checkpoints) compared byte for byte; identical: {}",
            same.iter().map(|(n, s)| format!("{n}={s}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 10] = [
    (1, "kl_oracle", kl_oracle),
    (2, "gradient_oracle", gradient_oracles),
    (3, "masking_statistics", masking_statistics),
    (4, "loss_decomposition", loss_decomposition),
    (5, "overfit_smoke", overfit_smoke),
    (6, "collapse_ablation", collapse_ablation),
    (7, "protocol_fidelity", protocol_fidelity),
    (8, "downstream_harness", downstream_harness),
    (9, "sweep_harness", sweep_harness),
    (10, "determinism", determinism),
];

fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let v = check();
        failed += usize::from(!v.passed);
        println!(
            "{} criterion {id} {name}: {} ({:.1}s)",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
