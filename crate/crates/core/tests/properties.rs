use proptest::prelude::*;

use varmae::corpus::{mask_count, mask_sequence, MaskingStrategy, TokenSequence, CLS, MASK, NUM_RESERVED};
use varmae::cul::kl_closed_form;
use varmae::diffcore::{Rng, Stream};
use varmae::downstream::{compute_metrics, decode_spans, repair_bio, FinetuneConfig, Tag, TaskKind, TaskSpec};
use varmae::pretrain::{ReportRow, TrainReport};

fn ner() -> TaskSpec {
    let labels = ["O", "B-A", "I-A", "B-B", "I-B"].iter().map(|s| s.to_string()).collect();
    TaskSpec::new("ner", TaskKind::TokenLabeling, labels)
}

fn tag_seqs(max_sentences: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..5, 1..8), 1..max_sentences)
}

/// Gold sequences must be valid BIO; repairing random ids gives that.
fn valid(spec: &TaskSpec, ids: &[usize]) -> Vec<usize> {
    let tags: Vec<Tag> = ids.iter().map(|&i| Tag::parse(&spec.labels[i]).unwrap()).collect();
    repair_bio(&tags)
        .iter()
        .map(|t| spec.label_id(&t.to_string()).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masking_selects_exactly_the_rounded_up_fraction(
        len in 1usize..40,
        ratio in 0.01f64..0.99,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed, Stream::Masking);
        let ids: Vec<usize> = std::iter::once(CLS)
            .chain((0..len).map(|_| NUM_RESERVED + rng.below(50)))
            .collect();
        let seq = TokenSequence { ids: ids.clone(), line: 1 };
        let m = mask_sequence(&seq, ratio, &MaskingStrategy::default(), NUM_RESERVED + 50, &mut rng).unwrap();
        prop_assert_eq!(m.positions.len(), mask_count(len, ratio));
        prop_assert_eq!(m.positions.len(), ((ratio * len as f64) - 1e-9).ceil().max(1.0) as usize);
        prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.positions.iter().all(|&p| p >= 1 && p <= len));
        prop_assert_eq!(m.restore(), ids.clone());
        for (i, (&a, &b)) in m.input_ids.iter().zip(&ids).enumerate() {
            if a != b {
                prop_assert!(m.positions.contains(&i));
                prop_assert!(a == MASK || a >= NUM_RESERVED);
            }
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_at_the_prior(
        mu in prop::collection::vec(-3.0f64..3.0, 1..8),
        log_sigma in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let sigma: Vec<f64> = log_sigma[..mu.len()].iter().map(|l| l.exp()).collect();
        let kl = kl_closed_form(&mu, &sigma);
        prop_assert!(kl >= 0.0);
        let dist: f64 = mu.iter().map(|m| m * m).sum::<f64>()
            + sigma.iter().map(|s| (s - 1.0) * (s - 1.0)).sum::<f64>();
        if dist > 1e-6 {
            prop_assert!(kl > 0.0);
        }
        prop_assert_eq!(kl_closed_form(&vec![0.0; mu.len()], &vec![1.0; mu.len()]), 0.0);
    }

    #[test]
    fn repaired_predictions_always_decode(ids in prop::collection::vec(0usize..5, 0..12)) {
        let spec = ner();
        let tags: Vec<Tag> = ids.iter().map(|&i| Tag::parse(&spec.labels[i]).unwrap()).collect();
        let fixed = repair_bio(&tags);
        prop_assert!(decode_spans(&fixed).is_some());
        prop_assert_eq!(repair_bio(&fixed), fixed.clone());
        if decode_spans(&tags).is_some() {
            prop_assert_eq!(fixed, tags);
        }
    }

    #[test]
    fn token_metrics_are_bounded_and_order_free(gold in tag_seqs(6), noise in tag_seqs(6), shift in 0usize..6) {
        let spec = ner();
        let gold: Vec<Vec<usize>> = gold.iter().map(|g| valid(&spec, g)).collect();
        let pred: Vec<Vec<usize>> = gold
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let n = &noise[i % noise.len()];
                g.iter().enumerate().map(|(j, &t)| if j < n.len() && n[j] == 0 { n[(j + 1) % n.len()] } else { t }).collect()
            })
            .collect();
        let m = compute_metrics(&spec, &gold, &pred).unwrap();
        for (_, v) in m.entries() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let k = shift % gold.len();
        let (mut g2, mut p2) = (gold.clone(), pred.clone());
        g2.rotate_left(k);
        p2.rotate_left(k);
        prop_assert_eq!(compute_metrics(&spec, &g2, &p2).unwrap(), m);
        let perfect = compute_metrics(&spec, &gold, &gold).unwrap();
        prop_assert!(perfect.entries().iter().all(|&(_, v)| v == 1.0));
    }

    #[test]
    fn classification_metrics_are_bounded_and_order_free(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..30),
        shift in 0usize..30,
    ) {
        let spec = TaskSpec::new("c", TaskKind::Cls, vec!["a".into(), "b".into(), "c".into()]);
        let gold: Vec<Vec<usize>> = pairs.iter().map(|p| vec![p.0]).collect();
        let pred: Vec<Vec<usize>> = pairs.iter().map(|p| vec![p.1]).collect();
        let m = compute_metrics(&spec, &gold, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.micro_f1.unwrap()));
        prop_assert_eq!(m.micro_f1, m.accuracy);
        let k = shift % gold.len();
        let (mut g2, mut p2) = (gold.clone(), pred.clone());
        g2.rotate_left(k);
        p2.rotate_left(k);
        prop_assert_eq!(compute_metrics(&spec, &g2, &p2).unwrap(), m);
    }

    #[test]
    fn schedule_stays_within_the_peak(total in 1usize..500, ratio in 0.0f64..0.5) {
        let cfg = FinetuneConfig { learning_rate: 2.0, warmup_ratio: ratio, ..FinetuneConfig::desk() };
        let rates: Vec<f64> = (1..=total).map(|t| cfg.rate_at(t, total)).collect();
        prop_assert!(rates.iter().all(|&r| r > 0.0 && r <= 2.0));
        prop_assert!(rates.contains(&2.0));
    }

    #[test]
    fn report_csv_round_trips(values in prop::collection::vec((0.0f64..100.0, 0.0f64..1.0), 1..20)) {
        let mut report = TrainReport::default();
        for (i, &(v, acc)) in values.iter().enumerate() {
            report.push(ReportRow {
                step: 10 * (i + 1),
                epoch: i / 3,
                total: v,
                recon_masked: v / 2.0,
                recon_unmasked: v / 3.0,
                kl_masked: v / 5.0,
                kl_unmasked: v / 7.0,
                masked_accuracy: acc,
                kl_per_token: v / 11.0,
                learning_rate: 5e-5,
                wall_clock: 0.0,
            }).unwrap();
        }
        let back = TrainReport::from_csv(&report.to_csv()).unwrap();
        prop_assert_eq!(back, report);
    }
}
