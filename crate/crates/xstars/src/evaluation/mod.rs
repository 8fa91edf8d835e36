//! Frozen-backbone probes: k-NN, linear, few-shot and a per-token linear
//! segmentation probe.

mod dataset;
mod report;
mod segmentation;

use std::collections::BTreeMap;

use candle_core::DType;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use dataset::{
    write_scene_dataset, LabelMask, LabeledDataset, LabeledRecord, SceneDatasetOptions, IGNORE_LABEL, LABELS_FILE,
};
pub use report::{KnnResult, LinearResult, ProbeReport, SegmentationResult};
pub use segmentation::{
    mean_iou, segmentation_linear_probe, segmentation_probe_on_tokens, SegmentationSample, TokenGrid,
};

use crate::backbone::VisionTransformer;
use crate::data::Split;
use crate::raster::Raster;
use crate::seed;
use crate::{Error, Result};

/// The k values averaged in the standard k-NN protocol.
pub const DEFAULT_KS: [usize; 6] = [5, 10, 20, 50, 100, 200];

/// Frozen features, one row per image, with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub split: Option<Split>,
}

impl FeatureBank {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            if let Some((i, r)) = features.iter().enumerate().find(|(_, r)| r.len() != first.len()) {
                return Err(Error::Shape(format!(
                    "feature row {i} has width {}, expected {}",
                    r.len(),
                    first.len()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// Errors unless rows have `width` entries.
    pub fn check_width(&self, width: usize) -> Result<()> {
        if !self.is_empty() && self.dim() != width {
            return Err(Error::Shape(format!(
                "feature bank has width {} but {width} was expected",
                self.dim()
            )));
        }
        Ok(())
    }
}

fn to_rows(t: &candle_core::Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Global-token features of `images`, resized to the encoder's input side,
/// in chunks of `batch`. No augmentation, no gradient.
pub fn extract_features(encoder: &VisionTransformer, images: &[Raster], batch: usize) -> Result<Vec<Vec<f64>>> {
    let side = encoder.input_side();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let resized: Vec<Raster> = chunk
            .iter()
            .map(|r| {
                let mut x = r.resize(side, side);
                x.clamp_unit();
                x
            })
            .collect();
        let tokens = encoder.encode(&resized)?;
        out.extend(to_rows(&tokens.global)?);
    }
    Ok(out)
}

/// Feature bank of one split of a labeled dataset.
pub fn extract_bank(encoder: &VisionTransformer, dataset: &LabeledDataset, split: Split, batch: usize) -> Result<FeatureBank> {
    let idx = dataset.indices(split);
    let mut features = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        let images = chunk.iter().map(|&i| dataset.image(i)).collect::<Result<Vec<_>>>()?;
        features.extend(extract_features(encoder, &images, batch)?);
    }
    let labels = idx.iter().map(|&i| dataset.label_index(&dataset.records()[i])).collect();
    let mut bank = FeatureBank::new(features, labels)?;
    bank.split = Some(split);
    bank.check_width(encoder.width())?;
    Ok(bank)
}

/// Vote rule of the k-NN classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum KnnVote {
    /// One vote per neighbour.
    Uniform,
    /// Neighbour weight `exp(similarity / temperature)`.
    Temperature { temperature: f64 },
}

fn unit_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Predicted labels for each query and each k. Neighbours are ranked by
/// cosine similarity, ties broken by bank index; label ties go to the larger
/// summed similarity, then the smaller label.
pub fn knn_predict(train: &FeatureBank, queries: &[Vec<f64>], ks: &[usize], vote: KnnVote) -> Result<Vec<Vec<usize>>> {
    if train.is_empty() || queries.is_empty() {
        return Err(Error::Parameter("k-NN needs non-empty train and query banks".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Parameter(format!("k values must be non-empty and positive, got {ks:?}")));
    }
    if queries.iter().any(|q| q.len() != train.dim()) {
        return Err(Error::Shape(format!(
            "query width differs from train bank width {}",
            train.dim()
        )));
    }
    let bank = unit_rows(&train.features);
    let queries = unit_rows(queries);
    let kmax = *ks.iter().max().expect("non-empty");
    if kmax > train.len() {
        log::warn!("k = {kmax} exceeds the train bank size {}; clamping", train.len());
    }
    let classes = train.num_classes();
    let mut out = Vec::with_capacity(queries.len());
    for q in &queries {
        let mut sims: Vec<(f64, usize)> = bank.iter().enumerate().map(|(i, b)| (dot(q, b), i)).collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let preds = ks
            .iter()
            .map(|&k| {
                let k = k.min(sims.len());
                let mut score = vec![0.0f64; classes];
                let mut simsum = vec![0.0f64; classes];
                for &(s, i) in &sims[..k] {
                    let l = train.labels[i];
                    score[l] += match vote {
                        KnnVote::Uniform => 1.0,
                        KnnVote::Temperature { temperature } => (s / temperature).exp(),
                    };
                    simsum[l] += s;
                }
                (0..classes)
                    .max_by(|&a, &b| {
                        score[a]
                            .total_cmp(&score[b])
                            .then(simsum[a].total_cmp(&simsum[b]))
                            .then(b.cmp(&a))
                    })
                    .expect("at least one class")
            })
            .collect();
        out.push(preds);
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Top-1 accuracy per k and their mean.
pub fn knn_probe(train: &FeatureBank, test: &FeatureBank, ks: &[usize], vote: KnnVote) -> Result<KnnResult> {
    if test.is_empty() {
        return Err(Error::Parameter("k-NN test bank is empty".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!(
            "train bank width {} differs from test bank width {}",
            train.dim(),
            test.dim()
        )));
    }
    let preds = knn_predict(train, &test.features, ks, vote)?;
    let per_k: BTreeMap<usize, f64> = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let p: Vec<usize> = preds.iter().map(|row| row[j]).collect();
            (k, accuracy(&p, &test.labels))
        })
        .collect();
    Ok(KnnResult::new(per_k, vote))
}

/// Settings of the linear probe. Defaults: 100 epochs, lr 0.01, batch 32,
/// plain SGD without weight decay, features standardized with train statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
            standardize: true,
        }
    }
}

/// Softmax regression trained by minibatch SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearClassifier {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &LinearProbeConfig) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Parameter("linear probe needs training data".into()));
        }
        let d = features[0].len();
        let (mean, scale) = if cfg.standardize {
            let n = features.len() as f64;
            let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            let scale = (0..d)
                .map(|j| {
                    let var = features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                    if var.sqrt() > 1e-12 {
                        1.0 / var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            (mean, scale)
        } else {
            (vec![0.0; d], vec![1.0; d])
        };
        let mut model = Self {
            weights: vec![vec![0.0; d]; classes],
            bias: vec![0.0; classes],
            mean,
            scale,
        };
        let x: Vec<Vec<f64>> = features.iter().map(|r| model.normalize(r)).collect();
        let mut order: Vec<usize> = (0..x.len()).collect();
        let bs = cfg.batch_size.max(1);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut seed::rng(&[cfg.seed, epoch as u64]));
            for chunk in order.chunks(bs) {
                let mut gw = vec![vec![0.0; d]; classes];
                let mut gb = vec![0.0; classes];
                for &i in chunk {
                    let p = softmax(&model.logits_normalized(&x[i]));
                    for c in 0..classes {
                        let err = p[c] - f64::from(u8::from(labels[i] == c));
                        gb[c] += err;
                        for j in 0..d {
                            gw[c][j] += err * x[i][j];
                        }
                    }
                }
                let step = cfg.lr / chunk.len() as f64;
                for c in 0..classes {
                    model.bias[c] -= step * gb[c];
                    for j in 0..d {
                        model.weights[c][j] -= step * gw[c][j];
                    }
                }
            }
        }
        Ok(model)
    }

    fn normalize(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn logits_normalized(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(&self.bias).map(|(w, b)| dot(w, x) + b).collect()
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.logits_normalized(&self.normalize(features))
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        argmax(&self.logits(features))
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; the first one wins ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Linear classifier on frozen features; top-1 accuracy on `test`.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &LinearProbeConfig) -> Result<LinearResult> {
    let distinct: std::collections::BTreeSet<usize> = train.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Parameter(format!(
            "linear probe needs at least 2 classes in the train bank, found {}",
            distinct.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::Parameter("linear probe test bank is empty".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!(
            "train bank width {} differs from test bank width {}",
            train.dim(),
            test.dim()
        )));
    }
    let classes = train.num_classes().max(test.num_classes());
    let model = LinearClassifier::fit(&train.features, &train.labels, classes, cfg)?;
    let pred: Vec<usize> = test.features.iter().map(|f| model.predict(f)).collect();
    Ok(LinearResult {
        accuracy: accuracy(&pred, &test.labels),
        train_size: train.len(),
        fraction: 1.0,
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
    })
}

/// Stratified subsample keeping `round(fraction * n_c)` rows of each class,
/// and at least one. Row order of the bank is preserved.
pub fn fewshot_subsample(bank: &FeatureBank, fraction: f64, seed: u64) -> Result<FeatureBank> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in bank.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (class, mut idx) in by_class {
        let want = (fraction * idx.len() as f64).round() as usize;
        let take = if want == 0 {
            log::warn!("fraction {fraction} would drop class {class}; keeping one example");
            1
        } else {
            want
        };
        idx.shuffle(&mut seed::rng(&[seed, class as u64]));
        keep.extend_from_slice(&idx[..take]);
    }
    keep.sort_unstable();
    Ok(bank.subset(&keep))
}
