use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dspn::config::KvConfig;
use dspn::corpus::synth::{synth_corpus, GenConfig};
use dspn::corpus::LabelSource;
use dspn::toy::{ToyInstance, ToyLimits};
use dspn::trainer::{split_validation, train, OptimizerKind, RunConfig, TrainConfig, Trainer};
use dspn::{DspnError, Objective, Polarity, Review};

fn toy_with(reviews: usize) -> ToyInstance {
    (0..)
        .map(|seed| ToyInstance::generate(seed, &ToyLimits::default()).unwrap())
        .find(|t| t.reviews.len() == reviews)
        .unwrap()
}

fn config(optimizer: OptimizerKind, lr: f64) -> TrainConfig {
    TrainConfig {
        optimizer,
        lr,
        batch: 4,
        neg_samples: 2,
        ..TrainConfig::default()
    }
}

fn labels(toy: &ToyInstance) -> Vec<Option<Polarity>> {
    toy.labels.iter().copied().map(Some).collect()
}

fn bits(toy_params: &dspn::gradkernel::ParamSet) -> Vec<u64> {
    toy_params.iter().flat_map(|(_, t)| t.as_slice().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let toy = toy_with(4);
    let batch: Vec<&Review> = toy.reviews.iter().collect();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut trainer = Trainer::new(toy.model.clone(), &config(kind, 0.0), 1).unwrap();
        for _ in 0..3 {
            trainer.step(&batch, &labels(&toy), Objective::Joint { lambda: 0.1 }).unwrap();
        }
        assert_eq!(bits(&trainer.model().params), bits(&toy.model.params), "{kind}");
    }
}

#[test]
fn sgd_step_on_one_review_moves_by_minus_lr_times_gradient() {
    let toy = toy_with(3);
    let lr = 0.05;
    let objective = Objective::Joint { lambda: 0.1 };
    let batch = [&toy.reviews[0]];
    let gold = [Some(toy.labels[0])];

    let mut probe = toy.model.clone();
    probe.batch_gradient(&batch, &gold, &[Vec::new()], objective, 1.0, None).unwrap();

    let mut trainer = Trainer::new(toy.model.clone(), &config(OptimizerKind::Sgd, lr), 5).unwrap();
    trainer.step(&batch, &gold, objective).unwrap();

    let mut moved = 0;
    for id in toy.model.params.ids() {
        let before = toy.model.params.value(id).as_slice();
        let after = trainer.model().params.value(id).as_slice();
        let grad = probe.params.grad(id).as_slice();
        for ((b, a), g) in before.iter().zip(after).zip(grad) {
            assert!((a - (b - lr * g)).abs() < 1e-15);
            moved += usize::from(a != b);
        }
    }
    assert!(moved > 0);
}

#[test]
fn toy_corpus_loss_decreases_over_fifty_steps() {
    let toy = toy_with(4);
    let batch: Vec<&Review> = toy.reviews.iter().collect();
    let loss = |m: &dspn::Dspn| m.batch_loss(&batch, &toy.labels, &toy.negatives, 0.1, 1.0).unwrap();
    let initial = loss(&toy.model);
    let mut trainer = Trainer::new(toy.model.clone(), &config(OptimizerKind::Adam, 0.01), 2).unwrap();
    for _ in 0..50 {
        trainer.step(&batch, &labels(&toy), Objective::Joint { lambda: 0.1 }).unwrap();
    }
    let last = loss(trainer.model());
    assert!(last < initial, "{last} !< {initial}");
}

#[test]
fn zero_lambda_matches_rp_only_training_bit_for_bit() {
    let toy = toy_with(4);
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let run = |objective: Objective| {
            let cfg = TrainConfig {
                batch: 2,
                ..config(kind, 0.02)
            };
            let mut trainer = Trainer::new(toy.model.clone(), &cfg, 9).unwrap();
            let mut shuffle = ChaCha8Rng::seed_from_u64(4);
            for epoch in 1..=5 {
                trainer.epoch(&toy.reviews, &labels(&toy), objective, &mut shuffle, epoch).unwrap();
            }
            bits(&trainer.model().params)
        };
        assert_eq!(run(Objective::Joint { lambda: 0.0 }), run(Objective::RpOnly), "{kind}");
    }
}

#[test]
fn divergence_names_the_step() {
    let toy = toy_with(4);
    let cfg = TrainConfig {
        lr: 1e300,
        optimizer: OptimizerKind::Sgd,
        batch: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(toy.model.clone(), &cfg, 1).unwrap();
    let mut shuffle = ChaCha8Rng::seed_from_u64(0);
    let mut result = Ok(Default::default());
    for epoch in 1..=3 {
        result = trainer.epoch(&toy.reviews, &labels(&toy), Objective::Joint { lambda: 0.1 }, &mut shuffle, epoch);
        if result.is_err() {
            break;
        }
    }
    assert!(matches!(result, Err(DspnError::Diverged { .. })), "{result:?}");
}

fn synthetic(size: usize, seed: u64) -> (dspn::Corpus, dspn::AspectSchema) {
    let mut gen = GenConfig::from_kv(&KvConfig::new()).unwrap();
    gen.size = size;
    (synth_corpus(&gen, seed).unwrap(), gen.schema().unwrap())
}

fn run_config(text: &str) -> RunConfig {
    RunConfig::from_kv(&KvConfig::parse(text).unwrap()).unwrap()
}

#[test]
fn missing_labels_are_rejected() {
    let (mut corpus, schema) = synthetic(40, 1);
    corpus.reviews[3].pseudo_label = None;
    let run = run_config("epochs=1\nlabel_source=pseudo");
    let (tr, va) = split_validation(&corpus, 0.2, 0).unwrap();
    let err = train(&tr, &va, &schema, &run, None).err().expect("training should fail");
    assert!(matches!(err, DspnError::MissingLabel { .. }), "{err}");
}

#[test]
fn derived_labels_follow_aspect_ratings() {
    let (corpus, _) = synthetic(200, 3);
    for r in &corpus.reviews {
        let derived = LabelSource::DerivedFromAspects.label(r).unwrap();
        assert_eq!(derived, Some(dspn::corpus::derive_review_label(&r.gold_aspects).unwrap()));
    }
}

#[test]
fn history_and_selection_are_consistent() {
    let (corpus, schema) = synthetic(300, 5);
    let run = run_config("epochs=3\nacd_pretrain_epochs=1\nlr=0.01\nseed=2");
    let (tr, va) = split_validation(&corpus, 0.2, 2).unwrap();
    let out = train(&tr, &va, &schema, &run, None).unwrap();
    assert_eq!(out.history.len(), 4);
    assert_eq!(out.history[0].phase, dspn::trainer::Phase::Pretrain);
    assert_eq!(out.history[0].loss_rp, 0.0);
    let joint: Vec<_> = out.history.iter().filter(|r| r.phase == dspn::trainer::Phase::Joint).collect();
    let best = joint.iter().map(|r| r.val_acc_rp.unwrap()).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.val_acc_rp, Some(best));
    let first_best = joint.iter().find(|r| r.val_acc_rp == Some(best)).unwrap();
    assert_eq!(out.best.epoch, first_best.epoch);
}

#[test]
fn trained_model_reads_a_positive_single_aspect_review() {
    let (corpus, schema) = synthetic(1500, 8);
    let run = run_config("epochs=15\nlr=0.003\nseed=8");
    let (tr, va) = split_validation(&corpus, 0.1, 8).unwrap();
    let out = train(&tr, &va, &schema, &run, None).unwrap();
    let words = ["a0kw0", "a0pos1", "w3", "w7"];
    let review = Review {
        id: "probe".into(),
        words: words.iter().map(|w| w.to_string()).collect(),
        tokens: words.iter().map(|w| corpus.vocab.id(w)).collect(),
        stars: None,
        gold_aspects: Vec::new(),
        pseudo_label: None,
    };
    let o = out.model.forward(&review).unwrap();
    assert_eq!(o.predicted_class(), Polarity::Positive);
}
