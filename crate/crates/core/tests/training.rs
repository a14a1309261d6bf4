use fnftg_core::config::preset;
use fnftg_core::synth::{generate_synthetic, SyntheticTask};
use fnftg_core::trainer::{run_training, Trainer};

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (kg, splits) = generate_synthetic(SyntheticTask::StructureDetermined, 64, 2).unwrap();
    let mut cfg = preset("synthetic-tg-half").unwrap();
    cfg.base_lr = 0.0;
    let mut trainer = Trainer::new(cfg, &kg, &splits).unwrap();
    let before = trainer.model.params.clone();
    trainer.train_epoch(&splits.train).unwrap();
    for ((_, name, a), (_, _, b)) in before.iter().zip(trainer.model.params.iter()) {
        assert_eq!(a.data(), b.data(), "{name}");
    }
    assert!(trainer.optimizer.step > 0);
}

#[test]
fn one_step_reaches_the_projection_head_and_every_graph_parameter() {
    let (kg, splits) = generate_synthetic(SyntheticTask::StructureDetermined, 64, 2).unwrap();
    let cfg = preset("synthetic-tg-half").unwrap();
    let mut trainer = Trainer::new(cfg, &kg, &splits).unwrap();
    let before = trainer.model.params.clone();
    trainer.train_step(&splits.train[..16]).unwrap();
    let changed = |name: &str| -> bool {
        let id = before.id(name).unwrap();
        before.get(id).data() != trainer.model.params.get(id).data()
    };
    let tt = trainer.model.text_encoder();
    assert!(changed(before.name(tt.w0())));
    assert!(changed(before.name(tt.w1())));
    let gt_names: Vec<String> = before.iter().map(|(_, n, _)| n.to_string()).filter(|n| n.starts_with("gt.")).collect();
    assert!(!gt_names.is_empty());
    for n in &gt_names {
        assert!(changed(n), "{n} received no update");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (kg, splits) = generate_synthetic(SyntheticTask::TextDetermined, 64, 5).unwrap();
    let mut cfg = preset("synthetic-t").unwrap();
    cfg.epochs = 2;
    let a = run_training(&cfg, &kg, &splits, None).unwrap();
    let b = run_training(&cfg, &kg, &splits, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    for ((_, _, x), (_, _, y)) in a.model.params.iter().zip(b.model.params.iter()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    cfg.seed += 1;
    let c = run_training(&cfg, &kg, &splits, None).unwrap();
    assert_ne!(a.model.params.iter().next().unwrap().2.data(), c.model.params.iter().next().unwrap().2.data());
}

#[test]
fn zero_epochs_are_rejected() {
    let (kg, splits) = generate_synthetic(SyntheticTask::TextDetermined, 64, 5).unwrap();
    let mut cfg = preset("synthetic-t").unwrap();
    cfg.epochs = 0;
    assert!(run_training(&cfg, &kg, &splits, None).is_err());
}
