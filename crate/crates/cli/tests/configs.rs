use std::path::PathBuf;

use facemark_cli::config::{load, ModelSpec};
use facemark_core::training::TrainConfig;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn shipped_toy_configs_match_the_presets() {
    for (file, preset) in [
        ("toy_converter.toml", TrainConfig::toy_converter()),
        ("toy_joint.toml", TrainConfig::toy_joint()),
    ] {
        let run = load(Some(&shipped(file)), &[]).unwrap();
        assert_eq!(run.model, ModelSpec::Preset("desk".into()));
        assert_eq!(run.train, preset, "{file}");
    }
}

#[test]
fn shipped_detector_config_never_reaches_its_decay_step() {
    let run = load(Some(&shipped("toy_detector.toml")), &[]).unwrap();
    let preset = TrainConfig::toy_detector();
    assert_eq!(
        TrainConfig {
            lr_decay: None,
            ..run.train.clone()
        },
        preset
    );
    for step in [0, 749, run.train.max_iterations - 1] {
        assert_eq!(run.train.lr_at(step), preset.lr_at(step));
    }
}
