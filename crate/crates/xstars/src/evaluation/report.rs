use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::KnnVote;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub per_k: BTreeMap<usize, f64>,
    /// Arithmetic mean of `per_k`.
    pub mean: f64,
    pub vote: KnnVote,
}

impl KnnResult {
    pub fn new(per_k: BTreeMap<usize, f64>, vote: KnnVote) -> Self {
        let mean = if per_k.is_empty() {
            0.0
        } else {
            per_k.values().sum::<f64>() / per_k.len() as f64
        };
        Self { per_k, mean, vote }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearResult {
    pub accuracy: f64,
    pub train_size: usize,
    pub fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub miou: f64,
    /// IoU per class; `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
}

/// Results of every probe run against one checkpoint on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint: String,
    pub dataset: String,
    /// Hash of the checkpoint's training configuration.
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn: Option<KnnResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linear: Vec<LinearResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationResult>,
}

impl ProbeReport {
    pub fn new(checkpoint: impl Into<String>, dataset: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            dataset: dataset.into(),
            config_hash: config_hash.into(),
            train_config: None,
            knn: None,
            linear: Vec::new(),
            segmentation: None,
        }
    }

    /// Rows `checkpoint,dataset,probe,key,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,dataset,config_hash,probe,key,value\n");
        let mut row = |probe: &str, key: String, value: f64| {
            let _ = writeln!(
                out,
                "{},{},{},{probe},{key},{value}",
                self.checkpoint, self.dataset, self.config_hash
            );
        };
        if let Some(k) = &self.knn {
            for (kk, v) in &k.per_k {
                row("knn", format!("k={kk}"), *v);
            }
            row("knn", "mean".into(), k.mean);
        }
        for l in &self.linear {
            row("linear", format!("fraction={}", l.fraction), l.accuracy);
        }
        if let Some(s) = &self.segmentation {
            row("segmentation", "miou".into(), s.miou);
            row("segmentation", "pixel_accuracy".into(), s.pixel_accuracy);
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` in `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
