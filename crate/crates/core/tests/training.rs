use medpt::dataio::{gen_classification_set, gen_segmentation_set, ShapeKind};
use medpt::network::{train, Model, ModelConfig, Task, TrainConfig};
use medpt::Error;

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_on_one_repeated_sample_falls_every_epoch() {
    let data = gen_segmentation_set(2, 64, 1).unwrap();
    let sample = vec![data.samples()[0].clone()];
    let mut model = Model::build(ModelConfig::tiny(Task::Segment), 1).unwrap();
    let cfg = TrainConfig {
        augment: false,
        ..quick(20)
    };
    let log = train(&mut model, &sample, &sample, &cfg).unwrap();
    let losses: Vec<f64> = log.records.iter().map(|r| r.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss rose: {losses:?}");
    }
}

#[test]
fn equal_seeds_give_identical_logs_and_weights() {
    let data = gen_classification_set(&[ShapeKind::Cube, ShapeKind::Torus], 5, 48, 0.02, 2).unwrap();
    let cfg = ModelConfig {
        sample_sizes: vec![24, 12],
        ..ModelConfig::tiny(Task::Classify)
    };
    let run = |seed| {
        let mut m = Model::build(cfg.clone(), 4).unwrap();
        let log = train(&mut m, &data.train(), &data.test(), &TrainConfig { seed, ..quick(2) }).unwrap();
        (log, m)
    };
    let (a, ma) = run(3);
    let (b, mb) = run(3);
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let (c, _) = run(4);
    assert_ne!(a.to_csv(), c.to_csv());
    assert_eq!(a.to_csv().lines().count(), 3);
}

#[test]
fn empty_sets_and_zero_epochs_are_rejected() {
    let data = gen_classification_set(&[ShapeKind::Sphere, ShapeKind::Torus], 2, 32, 0.0, 0).unwrap();
    let cfg = ModelConfig {
        sample_sizes: vec![16, 8],
        ..ModelConfig::tiny(Task::Classify)
    };
    let mut m = Model::build(cfg, 0).unwrap();
    assert!(matches!(train(&mut m, &[], &data.test(), &quick(1)), Err(Error::Argument(_))));
    assert!(matches!(train(&mut m, &data.train(), &[], &quick(1)), Err(Error::Argument(_))));
    assert!(matches!(train(&mut m, &data.train(), &data.test(), &quick(0)), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let data = gen_classification_set(&[ShapeKind::Sphere, ShapeKind::Torus], 2, 32, 0.0, 0).unwrap();
    let cfg = ModelConfig {
        sample_sizes: vec![16, 8],
        ..ModelConfig::tiny(Task::Classify)
    };
    let mut m = Model::build(cfg, 0).unwrap();
    let last = m.params_mut().values_mut().last_mut().unwrap();
    last.data_mut()[0] = f64::NAN;
    match train(&mut m, &data.train(), &data.test(), &quick(1)) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 1, batch 1"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn segmentation_log_carries_iou_and_dsc() {
    let data = gen_segmentation_set(5, 48, 9).unwrap();
    let mut m = Model::build(ModelConfig::tiny(Task::Segment), 0).unwrap();
    let log = train(&mut m, &data.train(), &data.test(), &quick(1)).unwrap();
    let csv = log.to_csv();
    assert!(csv.starts_with("epoch,lr,train_loss,test_acc,test_f1,test_iou,test_dsc\n"));
    let r = log.last().unwrap();
    if let (Some(iou), Some(dsc)) = (r.test.headline_iou(), r.test.headline_dsc()) {
        assert!((dsc - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
    }
}
