use varmae::corpus::{build_vocab, synth, TokenSequence};
use varmae::cul::CulConfig;
use varmae::diffcore::{Rng, RngStreams, Stream};
use varmae::pretrain::{collapse_monitor, pretrain, CollapseStatus, FreezePolicy, TrainConfig, TrainState};
use varmae::{Error, Model, ModelConfig, Objective};

fn corpus(lines: usize) -> (Vec<TokenSequence>, usize) {
    let mut rng = Rng::new(3, Stream::Data);
    let lex = synth::Lexicon::generate(3, 12, 8, 20, &mut rng);
    let text = synth::domain_corpus(&lex, lines, 4, 9, &mut rng);
    let vocab = build_vocab(&text, 1).unwrap();
    (vocab.encode_corpus(&text).unwrap(), vocab.len())
}

fn small_model(vocab: usize, dropout: f64, seed: u64) -> Model {
    let mut cfg = ModelConfig::desk(vocab);
    cfg.encoder.hidden_size = 16;
    cfg.encoder.num_heads = 2;
    cfg.encoder.head_size = 8;
    cfg.encoder.ffn_inner_size = 32;
    cfg.encoder.max_position = 16;
    cfg.encoder.dropout = dropout;
    cfg.encoder.attention_dropout = dropout;
    cfg.cul = CulConfig::desk(16);
    Model::new(cfg, &mut RngStreams::new(seed)).unwrap()
}

fn quick(objective: Objective) -> TrainConfig {
    TrainConfig {
        objective,
        learning_rate: 1e-3,
        batch_size: 8,
        grad_accum_steps: 2,
        max_len: 16,
        log_every: 1,
        ..TrainConfig::desk()
    }
}

#[test]
fn frozen_encoder_is_bitwise_unchanged() {
    let (data, v) = corpus(40);
    let mut model = small_model(v, 0.1, 1);
    let before = model.params.clone();
    let cfg = quick(Objective::VarMae);
    pretrain(&mut model, &data, &cfg, &mut TrainState::new(2)).unwrap();
    let mut changed = Vec::new();
    for (name, p) in model.params.iter() {
        let old = before.tensor(name).unwrap();
        let same = p.tensor.data().iter().zip(old.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if name.starts_with("embedding.") || name.starts_with("encoder.") {
            assert!(same, "{name} moved");
        } else if !same {
            changed.push(name.to_string());
        }
    }
    assert!(changed.iter().any(|n| n.starts_with("cul.")));
    assert!(changed.iter().any(|n| n.starts_with("lm_head.")));
}

#[test]
fn gradient_accumulation_matches_one_large_batch() {
    let (data, v) = corpus(24);
    let run = |batch: usize, accum: usize| {
        let mut model = small_model(v, 0.0, 4);
        let cfg = TrainConfig {
            batch_size: batch,
            grad_accum_steps: accum,
            freeze: FreezePolicy::none(),
            epochs: 2,
            ..quick(Objective::Mae)
        };
        pretrain(&mut model, &data, &cfg, &mut TrainState::new(5)).unwrap();
        model.params
    };
    let whole = run(12, 1);
    for (batch, accum) in [(6, 2), (4, 3), (3, 4)] {
        let split = run(batch, accum);
        let mut worst: f64 = 0.0;
        for (name, p) in whole.iter() {
            for (a, b) in p.tensor.data().iter().zip(split.tensor(name).unwrap().data()) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-9, "{batch} x {accum}: max diff {worst:e}");
    }
}

#[test]
fn reruns_are_identical() {
    let (data, v) = corpus(30);
    let run = || {
        let mut model = small_model(v, 0.1, 7);
        let cfg = TrainConfig {
            freeze: FreezePolicy::none(),
            ..quick(Objective::VarMae)
        };
        let report = pretrain(&mut model, &data, &cfg, &mut TrainState::new(8)).unwrap();
        (report.to_csv(), model)
    };
    let (r1, m1) = run();
    let (r2, m2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1.params, m2.params);
    assert_eq!(m1.bn, m2.bn);
}

#[test]
fn report_rows_follow_log_interval() {
    let (data, v) = corpus(32);
    let mut model = small_model(v, 0.1, 1);
    let cfg = TrainConfig {
        log_every: 2,
        epochs: 3,
        ..quick(Objective::VarMae)
    };
    let report = pretrain(&mut model, &data, &cfg, &mut TrainState::new(1)).unwrap();
    let steps: Vec<usize> = report.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![2, 4, 6]);
    assert!(report.rows.iter().all(|r| r.kl_per_token > 0.0 && r.learning_rate == 1e-3));
}

#[test]
fn batch_norm_keeps_kl_away_from_zero() {
    let (data, v) = corpus(60);
    let mut model = small_model(v, 0.1, 2);
    let cfg = TrainConfig {
        batch_size: 4,
        grad_accum_steps: 1,
        epochs: 4,
        ..quick(Objective::VarMae)
    };
    let report = pretrain(&mut model, &data, &cfg, &mut TrainState::new(3)).unwrap();
    assert!(report.rows.len() >= 50);
    assert_eq!(collapse_monitor(&report, 0.01).unwrap(), CollapseStatus::Healthy);
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let (data, v) = corpus(16);
    let mut model = small_model(v, 0.0, 1);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        batch_size: 4,
        grad_accum_steps: 1,
        freeze: FreezePolicy::none(),
        ..quick(Objective::VarMae)
    };
    match pretrain(&mut model, &data, &cfg, &mut TrainState::new(1)) {
        Err(Error::Diverged { step, last_good_step, .. }) => assert_eq!(last_good_step + 1, step),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empty_corpus_is_rejected() {
    let mut model = small_model(20, 0.0, 1);
    assert!(matches!(
        pretrain(&mut model, &[], &quick(Objective::Mae), &mut TrainState::new(1)),
        Err(Error::Empty(_))
    ));
}

#[test]
fn ragged_micro_batches_match_the_full_batch() {
    // 20 sequences: steps of 12 + 8 versus micro-batches 6+6 and 6+2.
    let (data, v) = corpus(20);
    let train = |batch: usize, accum: usize| {
        let mut model = small_model(v, 0.0, 4);
        let cfg = TrainConfig {
            batch_size: batch,
            grad_accum_steps: accum,
            freeze: FreezePolicy::none(),
            ..quick(Objective::Mae)
        };
        let report = pretrain(&mut model, &data, &cfg, &mut TrainState::new(4)).unwrap();
        (model.params, report)
    };
    let (whole, r1) = train(12, 1);
    let (split, r2) = train(6, 2);
    for (name, p) in whole.iter() {
        for (a, b) in p.tensor.data().iter().zip(split.tensor(name).unwrap().data()) {
            assert!((a - b).abs() <= 1e-12, "{name}: {a} vs {b}");
        }
    }
    for (a, b) in r1.rows.iter().zip(&r2.rows) {
        assert!((a.total - b.total).abs() <= 1e-12);
    }
}
