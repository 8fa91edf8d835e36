use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use xstars::checkpoint::Checkpoint;
use xstars::data::Split;
use xstars::evaluation::{
    extract_bank, fewshot_subsample, knn_probe, linear_probe, segmentation_linear_probe, KnnVote, LabeledDataset,
    LinearProbeConfig, ProbeReport, SegmentationSample,
};

use crate::config::{self, EvalSection};
use crate::{ProbeArgs, ProbeKind, UsageError, VoteRule};

/// `<run>/probes` for checkpoints inside a run, else next to the checkpoint.
fn default_out(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent();
    match parent {
        Some(p) if p.file_name().is_some_and(|n| n == xstars::training::CHECKPOINT_DIR) => {
            p.parent().unwrap_or(p).join("probes")
        }
        _ => checkpoint.join("probes"),
    }
}

fn effective_eval(a: &ProbeArgs) -> Result<EvalSection> {
    let mut eval = match &a.config {
        Some(p) => config::load(Some(p), &[])?.config.eval,
        None => EvalSection::default(),
    };
    if let Some(d) = &a.dataset {
        eval.dataset = Some(d.clone());
    }
    if let Some(ks) = &a.ks {
        eval.ks = ks.clone();
    }
    match a.vote {
        Some(VoteRule::Uniform) => eval.vote = KnnVote::Uniform,
        Some(VoteRule::Temperature) => {
            eval.vote = KnnVote::Temperature {
                temperature: a.temperature,
            }
        }
        None => {}
    }
    if let Some(f) = &a.fraction {
        eval.fractions = f.clone();
    }
    if let Some(v) = a.epochs {
        eval.linear_epochs = v;
    }
    if let Some(v) = a.lr {
        eval.linear_lr = v;
    }
    if let Some(v) = a.batch_size {
        eval.linear_batch_size = v;
    }
    if let Some(v) = a.seed {
        eval.seed = v;
    }
    if let Some(g) = &a.group {
        eval.group = g.clone();
    }
    if !matches!(eval.group.as_str(), "teacher" | "student") {
        return Err(UsageError(format!("--group must be teacher or student, got `{}`", eval.group)).into());
    }
    if let Some(bad) = eval.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(UsageError(format!("fractions must lie in (0, 1], got {bad}")).into());
    }
    Ok(eval)
}

pub fn run(a: &ProbeArgs) -> Result<()> {
    let eval = effective_eval(a)?;
    let dataset_path = eval
        .dataset
        .clone()
        .ok_or_else(|| UsageError("no dataset: pass --dataset or set eval.dataset".into()))?;
    let ckpt = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let (_params, encoder) = ckpt.backbone(&eval.group)?;
    let dataset = LabeledDataset::load(&dataset_path)?;
    let dataset_name = dataset_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dataset_path.display().to_string());

    let mut report = ProbeReport::new(
        a.checkpoint.display().to_string(),
        dataset_name.clone(),
        ckpt.meta.config_hash.clone(),
    );
    report.train_config = Some(ckpt.meta.config.clone());
    let linear_cfg = LinearProbeConfig {
        epochs: eval.linear_epochs,
        lr: eval.linear_lr,
        batch_size: eval.linear_batch_size,
        seed: eval.seed,
        standardize: eval.standardize,
    };
    let kind = match a.kind {
        ProbeKind::Knn => {
            let train = extract_bank(&encoder, &dataset, Split::Train, 32)?;
            let test = extract_bank(&encoder, &dataset, Split::Val, 32)?;
            let r = knn_probe(&train, &test, &eval.ks, eval.vote)?;
            for (k, acc) in &r.per_k {
                println!("k={k}: {acc:.4}");
            }
            println!("mean: {:.4}", r.mean);
            report.knn = Some(r);
            "knn"
        }
        ProbeKind::Linear => {
            let train = extract_bank(&encoder, &dataset, Split::Train, 32)?;
            let test = extract_bank(&encoder, &dataset, Split::Val, 32)?;
            for &f in &eval.fractions {
                let sub = fewshot_subsample(&train, f, eval.seed)?;
                let r = linear_probe(&sub, &test, &linear_cfg)?;
                let r = xstars::evaluation::LinearResult { fraction: f, ..r };
                println!("fraction {f}: accuracy {:.4} ({} train rows)", r.accuracy, r.train_size);
                report.linear.push(r);
            }
            "linear"
        }
        ProbeKind::Seg => {
            let samples = |split| -> Result<Vec<SegmentationSample>> {
                dataset
                    .indices(split)
                    .into_iter()
                    .map(|i| {
                        Ok(SegmentationSample {
                            image: dataset.image(i)?,
                            mask: dataset.mask(i)?,
                        })
                    })
                    .collect()
            };
            let (train, test) = (samples(Split::Train)?, samples(Split::Val)?);
            let classes = train
                .iter()
                .chain(&test)
                .flat_map(|s| s.mask.labels.iter().copied())
                .filter(|l| *l != xstars::evaluation::IGNORE_LABEL)
                .max()
                .map_or(0, |m| m as usize + 1);
            let r = segmentation_linear_probe(&encoder, &train, &test, classes, &linear_cfg)?;
            println!("mIoU {:.4}, pixel accuracy {:.4}", r.miou, r.pixel_accuracy);
            report.segmentation = Some(r);
            "seg"
        }
    };
    let out = a.out.clone().unwrap_or_else(|| default_out(&a.checkpoint));
    let stem = a.name.clone().unwrap_or_else(|| {
        let ck = a
            .checkpoint
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{kind}-{dataset_name}-{ck}")
    });
    report.write(&out, &stem)?;
    println!("report {}", out.join(format!("{stem}.json")).display());
    Ok(())
}
