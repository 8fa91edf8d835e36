use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use xstars::data::scenes::{render_scene, SceneClass};
use xstars::data::{build_synth_corpus, PairManifest, SensorProfile, SynthOptions};
use xstars::evaluation::{write_scene_dataset, SceneDatasetOptions};
use xstars::training::{config_hash, TrainConfig, Trainer};

use crate::config::{self, LoadedConfig, ProfileSpec};
use crate::{DatasetArgs, SynthArgs, TrainOverrides, UsageError};

pub const CORPUS_FILE: &str = "corpus.json";
pub const RUN_FILE: &str = "run.toml";

pub fn scenes(out: &Path, n: usize, side: usize, seed: u64) -> Result<()> {
    if n == 0 || side == 0 {
        return Err(UsageError("scenes needs --n > 0 and --side > 0".into()).into());
    }
    for i in 0..n {
        let class = SceneClass::ALL[i % SceneClass::ALL.len()];
        let img = render_scene(class, side, &mut xstars::seed::rng(&[seed, i as u64]));
        img.save_png(&out.join(format!("scene{i:05}-{}.png", class.name())))?;
    }
    println!("wrote {n} scenes of {side}x{side} to {}", out.display());
    Ok(())
}

fn profiles_from(names: &[String], config: Option<&Path>) -> Result<Vec<SensorProfile>> {
    let mut specs: Vec<ProfileSpec> = names.iter().map(|n| ProfileSpec::Preset(n.clone())).collect();
    if specs.is_empty() {
        if let Some(p) = config {
            specs = config::load(Some(p), &[])?.config.data.profiles;
        }
    }
    if specs.is_empty() {
        return Err(UsageError("no sensor profiles: pass --profiles or set data.profiles".into()).into());
    }
    specs.iter().map(ProfileSpec::resolve).collect()
}

#[derive(Serialize)]
struct CorpusInfo<'a> {
    config_hash: String,
    n_footprints: usize,
    seed: u64,
    train_fraction: f64,
    footprint_side: Option<usize>,
    jitter: usize,
    profiles: &'a [SensorProfile],
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let profiles = profiles_from(&a.profiles, a.config.as_deref())?;
    let opts = SynthOptions {
        footprint_side: a.footprint_side,
        train_fraction: a.train_fraction,
        seed: a.seed,
        jitter: a.jitter,
    };
    let mut info = CorpusInfo {
        config_hash: String::new(),
        n_footprints: a.n,
        seed: a.seed,
        train_fraction: a.train_fraction,
        footprint_side: a.footprint_side,
        jitter: a.jitter,
        profiles: &profiles,
    };
    info.config_hash = config_hash(&info);
    let manifest = build_synth_corpus(&a.base, &profiles, a.n, &a.out, &opts)?;
    let info_path = a.out.join(CORPUS_FILE);
    std::fs::write(&info_path, serde_json::to_string_pretty(&info)?)
        .with_context(|| format!("writing {}", info_path.display()))?;
    let chips: usize = manifest.records().iter().map(|r| r.chips.len()).sum();
    println!(
        "manifest {} ({} footprints, {} chips, config_hash {})",
        a.out.join("manifest.jsonl").display(),
        manifest.len(),
        chips,
        info.config_hash
    );
    Ok(())
}

fn parse_class(name: &str) -> Result<SceneClass> {
    SceneClass::ALL
        .iter()
        .copied()
        .find(|c| c.name() == name)
        .ok_or_else(|| {
            let all: Vec<&str> = SceneClass::ALL.iter().map(|c| c.name()).collect();
            UsageError(format!("unknown scene class `{name}` (known: {})", all.join(", "))).into()
        })
}

pub fn dataset(a: &DatasetArgs) -> Result<()> {
    let profiles = profiles_from(&a.profiles, None)?;
    let classes = if a.classes.is_empty() {
        SceneClass::ALL.to_vec()
    } else {
        a.classes.iter().map(|c| parse_class(c)).collect::<Result<_>>()?
    };
    let opts = SceneDatasetOptions {
        per_class: a.per_class,
        base_side: a.base_side,
        train_fraction: a.train_fraction,
        seed: a.seed,
        classes,
        segmentation_cells: a.segmentation_cells,
    };
    for (sensor, path) in write_scene_dataset(&a.out, &profiles, &opts)? {
        println!("{sensor}: {}", path.display());
    }
    Ok(())
}

fn overrides(o: &TrainOverrides) -> Result<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    let path = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned());
    if let Some(p) = &o.manifest {
        out.push(("data.manifest".into(), path(p)));
    }
    if let Some(p) = &o.out {
        out.push(("data.output".into(), path(p)));
    }
    if let Some(v) = o.epochs {
        out.push(("train.epochs".into(), toml::Value::Integer(v as i64)));
    }
    if let Some(v) = o.lambda {
        out.push(("train.lambda".into(), toml::Value::Float(v)));
    }
    if let Some(v) = o.alpha {
        out.push(("train.alpha".into(), toml::Value::Float(v)));
    }
    if let Some(v) = o.seed {
        out.push(("train.seed".into(), toml::Value::Integer(v as i64)));
    }
    if let Some(v) = o.batch_size {
        out.push(("train.batch_size".into(), toml::Value::Integer(v as i64)));
    }
    if let Some(v) = o.input_side {
        out.push(("train.input_side".into(), toml::Value::Integer(v as i64)));
    }
    if let Some(s) = &o.sensors {
        let list = s.iter().map(|x| toml::Value::String(x.clone())).collect();
        out.push(("train.sensors".into(), toml::Value::Array(list)));
    }
    for spec in &o.set {
        out.push(config::parse_override(spec)?);
    }
    Ok(out)
}

/// The merged run configuration plus every problem found in it.
fn prepare_run(o: &TrainOverrides, continual: bool) -> Result<(LoadedConfig, PairManifest, PathBuf)> {
    let mut loaded = config::load(o.config.as_deref(), &overrides(o)?)?;
    if continual && !loaded.is_set("train.epochs") {
        loaded.config.train.epochs = TrainConfig::continual().epochs;
    }
    let cfg = &loaded.config;
    let mut problems = cfg.train.problems();
    if cfg.data.manifest.is_none() {
        problems.push("no manifest: pass --manifest or set data.manifest".into());
    }
    if !problems.is_empty() {
        return Err(UsageError(format!("invalid configuration:\n  - {}", problems.join("\n  - "))).into());
    }
    let manifest_path = cfg.data.manifest.clone().expect("checked above");
    let manifest = PairManifest::load(&manifest_path)?;
    let name = format!(
        "{}-{}",
        if continual { "continual" } else { "pretrain" },
        cfg.hash()
    );
    let out = config::output_dir(o.out.as_deref(), cfg.data.output.as_deref(), &name);
    Ok((loaded, manifest, out))
}

fn write_run_file(out: &Path, loaded: &LoadedConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(RUN_FILE);
    std::fs::write(&path, loaded.config.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn summarize(outcome: &xstars::training::TrainOutcome) {
    if let Some(last) = outcome.history.last() {
        println!(
            "step {} epoch {}: loss {:.6} (dino {:.6}, msad {:.6})",
            last.step, last.epoch, last.loss_total, last.loss_dino, last.loss_msad
        );
    }
    println!("final checkpoint {}", outcome.final_checkpoint.display());
    println!("metrics {}", outcome.metrics_path.display());
}

pub fn pretrain(o: &TrainOverrides, resume: Option<&Path>) -> Result<()> {
    let (loaded, manifest, out) = prepare_run(o, false)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let t = Trainer::resume(ckpt)?;
            if t.config().hash() != loaded.config.train.hash() {
                log::warn!("resuming with the checkpoint's configuration; the given config differs");
            }
            t
        }
        None => Trainer::new_scratch(loaded.config.train.clone())?,
    };
    // Fail on sensor mismatches before anything is written.
    xstars::data::iterate_groups(&manifest, &trainer.config().sensors, xstars::data::PairStreamOptions::new(1, 0))?;
    write_run_file(&out, &loaded)?;
    let outcome = trainer.fit(&manifest, &out)?;
    summarize(&outcome);
    Ok(())
}

pub fn continual(o: &TrainOverrides, teacher: &Path) -> Result<()> {
    let (loaded, manifest, out) = prepare_run(o, true)?;
    let mut trainer = Trainer::new_continual(loaded.config.train.clone(), teacher)?;
    xstars::data::iterate_groups(&manifest, &trainer.config().sensors, xstars::data::PairStreamOptions::new(1, 0))?;
    write_run_file(&out, &loaded)?;
    let outcome = trainer.fit(&manifest, &out)?;
    summarize(&outcome);
    Ok(())
}
