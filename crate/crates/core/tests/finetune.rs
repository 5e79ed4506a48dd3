use varmae::corpus::{build_vocab, collate, synth::Lexicon, MaskedSequence, Vocabulary};
use varmae::diffcore::{Rng, RngStreams, Stream};
use varmae::downstream::synth::{keyword_classification, SplitSizes};
use varmae::downstream::{evaluate, finetune, Example, FinetuneConfig, Representation, TaskData, TaskKind, TaskModel, TaskSpec};
use varmae::{Model, ModelConfig};

fn lexicon() -> Lexicon {
    Lexicon::generate(3, 10, 8, 30, &mut Rng::new(0, Stream::Data))
}

fn vocab_for(data: &TaskData) -> Vocabulary {
    let lines: Vec<String> = data
        .train
        .iter()
        .chain(&data.dev)
        .chain(&data.test)
        .flat_map(|e| std::iter::once(e.text.clone()).chain(e.pair.clone()))
        .collect();
    build_vocab(&lines, 1).unwrap()
}

/// Fresh model with batch-norm statistics estimated on `data`, as a
/// pretrained checkpoint would have.
fn pretrained_like(vocab: &Vocabulary, data: &TaskData) -> Model {
    let mut model = small(vocab.len());
    let seqs: Vec<_> = data
        .train
        .iter()
        .map(|e| MaskedSequence::unmasked(&vocab.encode(&e.text, e.line).unwrap()))
        .collect();
    model.recalibrate_bn(&[collate(&seqs, 128).unwrap()]).unwrap();
    model
}

fn small(vocab: usize) -> Model {
    let mut cfg = ModelConfig::desk(vocab);
    cfg.encoder.hidden_size = 32;
    cfg.encoder.num_heads = 2;
    cfg.encoder.head_size = 16;
    cfg.encoder.ffn_inner_size = 64;
    cfg.cul = varmae::cul::CulConfig::desk(32);
    Model::new(cfg, &mut RngStreams::new(1)).unwrap()
}

const SIZES: SplitSizes = SplitSizes {
    train: 160,
    dev: 40,
    test: 60,
};

#[test]
fn separable_keyword_task_is_learned() {
    let (spec, data) = keyword_classification(&lexicon(), 2, SIZES, &mut Rng::new(3, Stream::Data));
    let vocab = vocab_for(&data);
    let base = pretrained_like(&vocab, &data);
    for rep in [Representation::Latent, Representation::Context] {
        let mut tm = TaskModel::from_pretrained(&base, rep, &spec, &mut Rng::new(4, Stream::Init)).unwrap();
        let out = finetune(&mut tm, &vocab, &data, &FinetuneConfig::desk(), 4).unwrap();
        assert!(out.test.accuracy.unwrap() >= 0.95, "{rep:?}: {:?}", out.test);
        assert!(out.epoch_losses.last() < out.epoch_losses.first());
    }
}

#[test]
fn tags_that_are_a_function_of_the_token_are_learned() {
    let lex = lexicon();
    let words: Vec<&String> = lex.all_words().collect();
    let spec = TaskSpec::new(
        "id_tags",
        TaskKind::TokenLabeling,
        vec!["O".into(), "B-E".into(), "I-E".into()],
    );
    let mut rng = Rng::new(9, Stream::Data);
    let mut make = |n: usize| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let picked: Vec<usize> = (0..3 + rng.below(6)).map(|_| rng.below(words.len())).collect();
                Example {
                    text: picked.iter().map(|&w| words[w].as_str()).collect::<Vec<_>>().join(" "),
                    pair: None,
                    target: picked.iter().map(|&w| usize::from(w % 2 == 0)).collect(),
                    line: i + 1,
                }
            })
            .collect()
    };
    let data = TaskData {
        train: make(200),
        dev: make(30),
        test: make(60),
    };
    let vocab = vocab_for(&data);
    let base = pretrained_like(&vocab, &data);
    let mut tm = TaskModel::from_pretrained(&base, Representation::Latent, &spec, &mut Rng::new(2, Stream::Init)).unwrap();
    let out = finetune(&mut tm, &vocab, &data, &FinetuneConfig::desk(), 2).unwrap();
    assert!(out.test.entity_f1.unwrap() >= 0.95, "{:?}", out.test);
}

#[test]
fn zero_epochs_scores_the_initial_head() {
    let (spec, data) = keyword_classification(&lexicon(), 2, SIZES, &mut Rng::new(3, Stream::Data));
    let vocab = vocab_for(&data);
    let base = pretrained_like(&vocab, &data);
    let fresh = TaskModel::from_pretrained(&base, Representation::Latent, &spec, &mut Rng::new(4, Stream::Init)).unwrap();
    let cfg = FinetuneConfig {
        epochs: 0,
        ..FinetuneConfig::desk()
    };
    let mut tm = fresh.clone();
    let out = finetune(&mut tm, &vocab, &data, &cfg, 4).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(tm.params, fresh.params);
    let mut again = fresh.clone();
    assert_eq!(out.test, evaluate(&mut again, &vocab, &data.test, 32, 128).unwrap());
    // a random head sits near chance on a balanced two-class task
    assert!(out.test.accuracy.unwrap() < 0.8);
}

#[test]
fn finetuning_is_deterministic_and_keeps_batch_norm_statistics() {
    let (spec, data) = keyword_classification(&lexicon(), 2, SIZES, &mut Rng::new(5, Stream::Data));
    let vocab = vocab_for(&data);
    let base = pretrained_like(&vocab, &data);
    let cfg = FinetuneConfig {
        epochs: 2,
        ..FinetuneConfig::desk()
    };
    let run = || {
        let mut tm = TaskModel::from_pretrained(&base, Representation::Latent, &spec, &mut Rng::new(6, Stream::Init)).unwrap();
        let out = finetune(&mut tm, &vocab, &data, &cfg, 6).unwrap();
        (out, tm)
    };
    let (o1, t1) = run();
    let (o2, t2) = run();
    assert_eq!(o1, o2);
    assert_eq!(t1.params, t2.params);
    assert_eq!(t1.bn, base.bn);
}

#[test]
fn sequences_longer_than_max_len_are_data_errors() {
    let (spec, data) = keyword_classification(&lexicon(), 2, SIZES, &mut Rng::new(3, Stream::Data));
    let vocab = vocab_for(&data);
    let base = pretrained_like(&vocab, &data);
    let mut tm = TaskModel::from_pretrained(&base, Representation::Context, &spec, &mut Rng::new(4, Stream::Init)).unwrap();
    let cfg = FinetuneConfig {
        max_len: 4,
        ..FinetuneConfig::desk()
    };
    assert!(matches!(finetune(&mut tm, &vocab, &data, &cfg, 1), Err(varmae::Error::Data { .. })));
}

