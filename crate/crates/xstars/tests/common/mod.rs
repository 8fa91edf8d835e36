#![allow(dead_code)]

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xstars::backbone::DinoHeadConfig;
use xstars::data::scenes::{render_scene, SceneClass};
use xstars::data::{build_synth_corpus, PairManifest, SensorProfile, SynthOptions};
use xstars::training::{Precision, TrainConfig};

pub mod oracle;

/// Writes `n` procedural scenes of side `side` into `dir`.
pub fn write_base_scenes(dir: &Path, n: usize, side: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let class = SceneClass::ALL[i % SceneClass::ALL.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
        render_scene(class, side, &mut rng)
            .save_png(&dir.join(format!("scene{i:04}.png")))
            .unwrap();
    }
}

/// Small synthetic corpus with every footprint in the train split.
pub fn tiny_corpus(root: &Path, n: usize, profiles: &[SensorProfile]) -> PairManifest {
    let base = root.join("base");
    write_base_scenes(&base, n.min(12), 48, 3);
    let opts = SynthOptions {
        train_fraction: 1.0,
        seed: 5,
        ..SynthOptions::default()
    };
    build_synth_corpus(&base, profiles, n, &root.join("corpus"), &opts).unwrap()
}

pub fn identity_profiles(ids: &[&str]) -> Vec<SensorProfile> {
    ids.iter().map(|s| SensorProfile::identity(s)).collect()
}

/// A configuration that trains in well under a second per step.
pub fn tiny_config(sensors: &[&str]) -> TrainConfig {
    TrainConfig {
        input_side: 32,
        local_side: Some(16),
        local_crops: 2,
        batch_size: 4,
        epochs: 1,
        warmup_epochs: 0,
        warmup_teacher_temp_epochs: 0,
        freeze_last_layer_epochs: 0,
        base_lr: 0.01,
        dino_head: DinoHeadConfig {
            hidden: 64,
            bottleneck: 32,
            out_dim: 128,
        },
        precision: Precision::F32,
        sensors: sensors.iter().map(|s| s.to_string()).collect(),
        ..TrainConfig::default()
    }
}
