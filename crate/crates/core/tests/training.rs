use facemark_core::config::ModelConfig;
use facemark_core::data::{default_identities, generate_toy, target_infos, Dataset, ToyConfig};
use facemark_core::geometry::LandmarkTopology;
use facemark_core::registry::{ModelRegistry, TargetId};
use facemark_core::training::{checkpoint, snapshot, Phase, TrainConfig, Trainer};

fn small_toy() -> (Dataset, ModelRegistry) {
    let ids = default_identities(&LandmarkTopology::toy12()).unwrap();
    let cfg = ToyConfig {
        train_per_identity: 40,
        val_expressions: 3,
        ..ToyConfig::default()
    };
    let data = generate_toy(&ids, &cfg).unwrap();
    let infos = target_infos(&ids, &data).unwrap();
    (
        data,
        ModelRegistry::new(ModelConfig::desk(), infos, 21).unwrap(),
    )
}

#[test]
fn converter_reconstruction_loss_falls_below_a_tenth() {
    let (data, mut models) = small_toy();
    let cfg = TrainConfig {
        max_iterations: 2_000,
        identities: vec![TargetId::from("ada"), TargetId::from("chen")],
        ..TrainConfig::toy_converter()
    };
    let history = Trainer::new(cfg)
        .unwrap()
        .run(&mut models, &data, &mut |_| {})
        .unwrap();
    let (first, last) = (history[0].l2l, history.last().unwrap().l2l);
    assert!(last < 0.1 * first, "l2l {first} -> {last}");
    // untouched identities keep their initial decoders
    let fresh = ModelRegistry::new(
        models.config.clone(),
        models.targets().cloned().collect(),
        21,
    )
    .unwrap();
    let boris = TargetId::from("boris");
    let probe = models.target(&boris).unwrap().canonical.to_vector();
    assert_eq!(
        fresh
            .converter
            .decode(&boris, &fresh.converter.encode(&probe).unwrap())
            .unwrap(),
        models
            .converter
            .decode(&boris, &fresh.converter.encode(&probe).unwrap())
            .unwrap(),
    );
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (data, mut models) = small_toy();
    let mut trainer = Trainer::new(TrainConfig {
        max_iterations: 3,
        ..TrainConfig::toy_joint()
    })
    .unwrap();
    trainer.run(&mut models, &data, &mut |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &models, &trainer.state()).unwrap();
    let (back, state) = checkpoint::load(&path).unwrap();
    assert_eq!(state, trainer.state());
    assert_eq!(state.step, 3);

    let a = models.sections();
    let b = back.sections();
    assert_eq!(a.len(), b.len());
    for ((na, ma), (nb, mb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert_eq!(snapshot(*ma), snapshot(*mb), "section {na}");
    }
    let src = &data.samples[0];
    for t in models.target_ids() {
        let lms = src.landmarks.to_vector();
        assert_eq!(
            models.synthesize(&t, &lms).unwrap(),
            back.synthesize(&t, &lms).unwrap()
        );
        assert_eq!(
            models.convert(&lms, &t).unwrap(),
            back.convert(&lms, &t).unwrap()
        );
        assert_eq!(
            models
                .discriminator(&t)
                .unwrap()
                .patch_scores(&src.image)
                .unwrap(),
            back.discriminator(&t)
                .unwrap()
                .patch_scores(&src.image)
                .unwrap()
        );
    }
    assert_eq!(
        models.detector.detect(&src.image).unwrap(),
        back.detector.detect(&src.image).unwrap()
    );
}

#[test]
fn resume_continues_the_step_count_and_random_stream() {
    let (data, mut models) = small_toy();
    let cfg = TrainConfig {
        phase: Phase::Detector,
        max_iterations: 4,
        batch_size: 2,
        ..TrainConfig::toy_detector()
    };
    let mut first = Trainer::new(TrainConfig {
        max_iterations: 2,
        ..cfg.clone()
    })
    .unwrap();
    first.run(&mut models, &data, &mut |_| {}).unwrap();
    let mut resumed = Trainer::resume(cfg, &first.state()).unwrap();
    assert_eq!(resumed.step(), 2);
    assert_eq!(resumed.state().rng, first.state().rng);
    let history = resumed.run(&mut models, &data, &mut |_| {}).unwrap();
    assert_eq!(history.len(), 2);
    assert_eq!(history[1].step, 3);
}

#[test]
fn training_rejects_a_single_identity_for_cycle_phases() {
    let (data, mut models) = small_toy();
    let cfg = TrainConfig {
        identities: vec![TargetId::from("ada")],
        max_iterations: 1,
        ..TrainConfig::toy_converter()
    };
    assert!(Trainer::new(cfg)
        .unwrap()
        .run(&mut models, &data, &mut |_| {})
        .is_err());
}
