#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clipsim::synth::SynthConfig;
use clipsim::trainer::{ExperimentConfig, TopTVariant};

pub const TINY_TOML: &str = r#"
seed = 11
num_clips = 4

[synth]
num_identities = 8
tracklets_per_identity = 4
clips_per_tracklet = 4
feature_dim = 16
seed = 11

[aggregation]
hidden = 8

[aggregation.schedule]
p = 4
k = 2
epochs = 2

[top_t.schedule]
p = 4
k = 2
epochs = 1

[embedding.schedule]
p = 4
k = 2
epochs = 2

[sweep]
max_corrupt = [0, 2]
t_values = [50.0, 100.0]
"#;

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY_TOML).unwrap()
}

pub fn small_synth() -> SynthConfig {
    SynthConfig {
        num_identities: 12,
        tracklets_per_identity: 4,
        clips_per_tracklet: 4,
        feature_dim: 24,
        ..SynthConfig::default()
    }
}

/// A 12-identity experiment small enough for debug-speed training.
pub fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synth = small_synth();
    cfg.num_clips = 4;
    cfg.aggregation.hidden = 16;
    for s in [&mut cfg.aggregation.schedule, &mut cfg.top_t.schedule] {
        s.p = 4;
        s.k = 2;
        s.epochs = 3;
        s.max_corrupt_clips = 2;
    }
    cfg.sweep.variants = vec![TopTVariant::EvalOnly];
    cfg
}

pub fn clipsim(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipsim"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, text).unwrap();
    p
}
