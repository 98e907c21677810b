use std::collections::HashSet;

use archdistill::corpus::{
    self, generate, read_examples, train_teacher, write_examples, ClassRule, Example, SyntheticTaskSpec, TeacherParams,
    CLS_ID, FIRST_CONTENT_ID,
};
use archdistill::nn::{cross_entropy, fit, EncoderModel, FitParams, Gradients, TrainState};
use archdistill::{ArchConfig, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        labeled: 600,
        unlabeled: 600,
        validation: 200,
        test: 200,
        rng_seed: seed,
        ..SyntheticTaskSpec::default()
    }
}

/// Independent restatement of the default rule.
fn has_trigger(ids: &[u32], first: u32, second: u32) -> bool {
    (1..ids.len()).any(|i| ids[i - 1] == first && ids[i] == second)
}

#[test]
fn same_seed_same_corpus() {
    assert_eq!(generate(&small_spec(3)).unwrap(), generate(&small_spec(3)).unwrap());
    assert_ne!(generate(&small_spec(3)).unwrap().labeled, generate(&small_spec(4)).unwrap().labeled);
}

#[test]
fn default_splits_are_disjoint_balanced_and_well_formed() {
    let spec = SyntheticTaskSpec::default();
    let c = generate(&spec).unwrap();
    assert_eq!(c.labeled.len(), 4000);
    assert_eq!(c.unlabeled.len(), c.labeled.len());
    assert_eq!((c.validation.len(), c.test.len()), (1000, 1000));

    let mut seen = HashSet::new();
    for (name, split) in c.splits() {
        for e in split {
            assert!(seen.insert(e.ids.clone()), "{name} repeats a sequence");
            assert_eq!(e.ids[0], CLS_ID);
            assert!((spec.min_len..=spec.max_len).contains(&e.ids.len()));
            assert!(e.ids[1..].iter().all(|&t| t >= FIRST_CONTENT_ID && (t as usize) < spec.vocab_size));
        }
    }
    assert_eq!(seen.len(), 10_000);

    for (name, split) in [("labeled", &c.labeled), ("validation", &c.validation), ("test", &c.test)] {
        let positives = split.iter().filter(|e| e.label == Some(1)).count() as f64 / split.len() as f64;
        assert!((0.45..=0.55).contains(&positives), "{name}: {positives}");
    }
}

#[test]
fn stored_labels_match_a_recheck_of_the_rule() {
    let c = generate(&SyntheticTaskSpec::default()).unwrap();
    for split in [&c.labeled, &c.validation, &c.test] {
        for e in split.iter() {
            assert_eq!(e.label, Some(has_trigger(&e.ids, 17, 42) as usize), "{:?}", e.ids);
        }
    }
    let rule = ClassRule::TriggerBigram { first: 17, second: 42 };
    assert_eq!(rule.label(&[1, 42, 17]), 0);
    assert_eq!(rule.label(&[1, 5, 17, 42]), 1);
}

#[test]
fn unlabeled_split_is_written_without_labels() {
    let c = generate(&small_spec(0)).unwrap();
    assert!(c.unlabeled.iter().all(|e| e.label.is_none()));
    let mut buf = Vec::new();
    write_examples(&c.unlabeled, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(!text.contains("label"));
    assert_eq!(read_examples(buf.as_slice()).unwrap(), c.unlabeled);

    let mut labeled = Vec::new();
    write_examples(&c.labeled, &mut labeled).unwrap();
    assert_eq!(read_examples(labeled.as_slice()).unwrap(), c.labeled);
}

#[test]
fn malformed_corpus_lines_are_rejected() {
    for bad in ["{\"ids\": [1, -2]}", "{\"label\": 1}", "[1,2]", "{\"ids\": [1], \"label\": \"x\"}"] {
        assert!(matches!(read_examples(bad.as_bytes()), Err(Error::Format { .. })), "{bad}");
    }
    assert_eq!(read_examples("\n\n".as_bytes()).unwrap(), vec![]);
}

#[test]
fn invalid_or_infeasible_specs_fail_instead_of_hanging() {
    let bad_vocab = SyntheticTaskSpec {
        vocab_size: 3,
        ..SyntheticTaskSpec::default()
    };
    assert!(generate(&bad_vocab).is_err());
    let bad_trigger = SyntheticTaskSpec {
        rule: ClassRule::TriggerBigram { first: 1, second: 42 },
        ..SyntheticTaskSpec::default()
    };
    assert!(generate(&bad_trigger).is_err());
    // two content tokens and long sequences: a negative almost never exists
    let infeasible = SyntheticTaskSpec {
        vocab_size: 4,
        min_len: 40,
        max_len: 40,
        rule: ClassRule::TriggerBigram { first: 2, second: 3 },
        ..small_spec(0)
    };
    assert!(generate(&infeasible).is_err());
    // too few distinct sequences for the requested sizes
    let crowded = SyntheticTaskSpec {
        vocab_size: 5,
        min_len: 3,
        max_len: 3,
        rule: ClassRule::TriggerBigram { first: 2, second: 3 },
        ..small_spec(0)
    };
    assert!(generate(&crowded).is_err());
}

fn tiny_teacher(spec: &SyntheticTaskSpec) -> ArchConfig {
    ArchConfig::new(1, 32, 2, 64, spec.vocab_size, spec.max_seq_len(), spec.num_classes())
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let spec = small_spec(1);
    let c = generate(&spec).unwrap();
    let cfg = tiny_teacher(&spec);
    let params = TeacherParams {
        epochs: 0,
        ..TeacherParams::default()
    };
    let outcome = train_teacher(&cfg, &c.labeled, &c.validation, &params).unwrap();
    let fresh = EncoderModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(params.rng_seed)).unwrap();
    assert_eq!(outcome.model.params(), fresh.params());
    assert!(outcome.loss_trace.is_empty());
}

#[test]
fn one_layer_model_learns_the_rule() {
    let spec = SyntheticTaskSpec {
        labeled: 3000,
        ..small_spec(2)
    };
    let c = generate(&spec).unwrap();
    let params = TeacherParams {
        epochs: 3,
        ..TeacherParams::default()
    };
    let outcome = train_teacher(&tiny_teacher(&spec), &c.labeled, &c.validation, &params).unwrap();
    let val = outcome.validation_accuracy.unwrap();
    eprintln!("train {} validation {val} trace {:?}", outcome.train_accuracy, outcome.loss_trace);
    assert!(val >= 0.9, "{val}");
    assert!(outcome.train_accuracy >= val - 0.10);
    assert!(outcome.loss_trace.last() < outcome.loss_trace.first());
    assert!(corpus::accuracy(&outcome.model, &c.test).unwrap() >= 0.9);
}

#[test]
fn teacher_rejects_unusable_splits() {
    let spec = small_spec(1);
    let c = generate(&spec).unwrap();
    let cfg = tiny_teacher(&spec);
    let p = TeacherParams::default();
    assert!(train_teacher(&cfg, &c.unlabeled, &c.validation, &p).is_err());
    assert!(train_teacher(&cfg, &[], &c.validation, &p).is_err());
    let wrong_label = vec![Example {
        ids: vec![1, 2, 3],
        label: Some(5),
    }];
    assert!(train_teacher(&cfg, &wrong_label, &[], &p).is_err());
    assert!(corpus::accuracy(&EncoderModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), &[]).is_err());
}

#[test]
fn non_finite_losses_abort_training() {
    let cfg = ArchConfig::new(1, 8, 2, 16, 20, 8, 2);
    let model = EncoderModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut state = TrainState::new(model, 0);
    let params = FitParams {
        epochs: 3,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 0,
    };
    let n = state.model.num_params();
    let mut calls = 0;
    let err = fit(&mut state, 10, &params, |_, _| {
        calls += 1;
        let loss = if calls == 5 { f64::NAN } else { 1.0 };
        Ok((loss, Gradients::zeros(n)))
    })
    .unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, batch: 1, .. }), "{err}");
}

#[test]
fn cross_entropy_matches_its_definition() {
    let (loss, grad) = cross_entropy(&[1.0, 2.0, 0.5], 1);
    let z: f64 = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).sum();
    assert!((loss - (z.ln() - 2.0)).abs() < 1e-12);
    assert!((grad[1] - (2.0f64.exp() / z - 1.0)).abs() < 1e-12);
    assert!(grad.iter().sum::<f64>().abs() < 1e-12);
}
