use fasterx::assignment::AssignConfig;
use fasterx::data::{synth_dataset, Sample, SynthSpec};
use fasterx::losses::LossConfig;
use fasterx::model::{Model, ModelConfig, Profile};
use fasterx::train::{training_step, AssignSource, Batch, Phase, TrainConfig, Trainer};

const SIZE: usize = 64;

fn data(n: usize, seed: u64) -> Vec<Sample> {
    synth_dataset(&SynthSpec {
        image_size: SIZE,
        num_images: n,
        small_side: (4.0, 10.0),
        other_side: (10.0, 24.0),
        seed,
        ..SynthSpec::default()
    })
}

fn model(distill: bool, warmup: usize, lambda: f64, seed: u64) -> Model<f32> {
    let mut c = ModelConfig::fasterx(Profile::Nano).with_input_size(SIZE);
    c.distill.enabled = distill;
    c.distill.warmup_epochs = warmup;
    c.distill.lambda = lambda;
    Model::build(&c, seed).unwrap()
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr: 0.01,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn phases_follow_warmup() {
    let samples = data(8, 1);
    let mut trainer = Trainer::new(model(true, 2, 1.0, 0), train_config(4)).unwrap();
    for epoch in 0..4 {
        let log = trainer.run_epoch(&samples, epoch).unwrap();
        assert_eq!(log.images, 8);
        if epoch < 2 {
            assert_eq!(log.phase, Phase::Joint);
            assert_eq!((log.assignments, log.shared_assignments), (16, 0));
        } else {
            assert_eq!(log.phase, Phase::Guided);
            assert_eq!((log.assignments, log.shared_assignments), (8, 8));
        }
        assert!(log.aux_loss.is_some() && log.align.is_some());
    }
}

#[test]
fn assignment_calls_per_phase() {
    let batch = Batch::from_samples(&data(3, 2)).unwrap();
    let (assign, loss) = (AssignConfig::default(), LossConfig::default());
    let m = model(true, 1, 1.0, 1);

    let (joint, _, _) = training_step(&m, &batch, 0, &assign, &loss).unwrap();
    assert_eq!(joint.assignments.len(), 6);
    for n in 0..3 {
        let calls: Vec<_> = joint.assignments.iter().filter(|c| c.image == n).collect();
        assert_eq!(calls.len(), 2);
        assert!(calls.iter().any(|c| c.source == AssignSource::Student));
        assert!(calls.iter().any(|c| c.source == AssignSource::Aux));
        assert!(calls.iter().all(|c| c.consumers == 1));
    }

    let (guided, _, _) = training_step(&m, &batch, 1, &assign, &loss).unwrap();
    assert_eq!(guided.assignments.len(), 3);
    assert!(guided
        .assignments
        .iter()
        .all(|c| c.source == AssignSource::Aux && c.consumers == 2));
    // the guided student sees the aux matches, so its foreground count follows the aux branch
    assert_eq!(guided.student.num_fg, guided.aux.as_ref().unwrap().num_fg);

    let plain = model(false, 1, 1.0, 1);
    let (p, _, _) = training_step(&plain, &batch, 5, &assign, &loss).unwrap();
    assert_eq!(p.phase, Phase::Plain);
    assert_eq!(p.assignments.len(), 3);
    assert!(p.aux.is_none() && p.align.is_none());
}

#[test]
fn total_combines_components() {
    let batch = Batch::from_samples(&data(2, 3)).unwrap();
    let (assign, loss) = (AssignConfig::default(), LossConfig::default());
    for epoch in [0, 4] {
        let zero = model(true, 2, 0.0, 2);
        let (out, _, _) = training_step(&zero, &batch, epoch, &assign, &loss).unwrap();
        assert_eq!(out.total, out.student.total + out.aux.as_ref().unwrap().total);
        assert!(out.align.unwrap() > 0.0);

        let weighted = model(true, 2, 0.5, 2);
        let (w, _, _) = training_step(&weighted, &batch, epoch, &assign, &loss).unwrap();
        let expect = w.student.total + w.aux.as_ref().unwrap().total + 0.5 * w.align.unwrap();
        assert!((w.total - expect).abs() <= 1e-12 * expect.abs());
        assert!(w.total >= w.student.total);
    }
}

#[test]
fn stripped_model_trains_plain() {
    let batch = Batch::from_samples(&data(1, 4)).unwrap();
    let stripped = model(true, 1, 1.0, 0).strip_aux();
    let (out, _, _) = training_step(&stripped, &batch, 0, &AssignConfig::default(), &LossConfig::default()).unwrap();
    assert_eq!(out.phase, Phase::Plain);
    assert_eq!(out.total, out.student.total);
}

#[test]
fn disabled_distillation_matches_plain_trajectory() {
    let samples = data(8, 5);
    let mut plain = Trainer::new(model(false, 2, 1.0, 9), train_config(2)).unwrap();
    let mut stripped = Trainer::new(model(true, 2, 1.0, 9).strip_aux(), train_config(2)).unwrap();
    for epoch in 0..2 {
        let a = plain.run_epoch(&samples, epoch).unwrap();
        let b = stripped.run_epoch(&samples, epoch).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.num_fg, b.num_fg);
    }
    for (p, q) in plain.model().store().params().iter().zip(stripped.model().store().params()) {
        assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
    }
}

#[test]
fn fixed_seed_is_bit_reproducible() {
    let samples = data(8, 6);
    let run = || {
        let mut t = Trainer::new(model(true, 1, 1.0, 4), train_config(2)).unwrap();
        let logs = [t.run_epoch(&samples, 0).unwrap(), t.run_epoch(&samples, 1).unwrap()];
        logs.map(|l| (l.loss.to_bits(), l.aux_loss.unwrap().to_bits(), l.num_fg))
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_loss() {
    let samples = data(16, 7);
    let mut t = Trainer::new(model(false, 0, 1.0, 5), TrainConfig {
        mosaic: 0.0,
        ..train_config(6)
    })
    .unwrap();
    let first = t.run_epoch(&samples, 0).unwrap().loss;
    let mut last = first;
    for e in 1..6 {
        last = t.run_epoch(&samples, e).unwrap().loss;
    }
    assert!(last < first, "{} -> {}", first, last);
}
