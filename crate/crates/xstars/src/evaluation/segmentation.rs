use candle_core::DType;

use super::dataset::{LabelMask, IGNORE_LABEL};
use super::report::SegmentationResult;
use super::{argmax, LinearClassifier, LinearProbeConfig};
use crate::backbone::VisionTransformer;
use crate::raster::Raster;
use crate::{Error, Result};

/// Patch-token features of one image on a square `grid x grid` layout
/// (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub grid: usize,
    pub tokens: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SegmentationSample {
    pub image: Raster,
    pub mask: LabelMask,
}

/// How a label map lines up with the token grid.
enum Alignment {
    /// Each label cell covers `r x r` tokens.
    Coarser(usize),
    /// Each token covers `r x r` label cells.
    Finer(usize),
}

fn alignment(grid: usize, mask_side: usize) -> Result<Alignment> {
    if mask_side > 0 && grid % mask_side == 0 {
        Ok(Alignment::Coarser(grid / mask_side))
    } else if grid > 0 && mask_side % grid == 0 {
        Ok(Alignment::Finer(mask_side / grid))
    } else {
        Err(Error::Shape(format!(
            "label map of side {mask_side} does not align with the {grid}x{grid} token grid"
        )))
    }
}

/// Training label of every token: the cell label for coarse maps, the
/// majority label of the covered cells for fine maps.
fn token_labels(grid: usize, mask: &LabelMask) -> Result<Vec<u32>> {
    let a = alignment(grid, mask.side)?;
    let mut out = Vec::with_capacity(grid * grid);
    for ty in 0..grid {
        for tx in 0..grid {
            let label = match a {
                Alignment::Coarser(r) => mask.labels[(ty / r) * mask.side + tx / r],
                Alignment::Finer(r) => {
                    let mut counts = std::collections::BTreeMap::new();
                    for y in ty * r..(ty + 1) * r {
                        for x in tx * r..(tx + 1) * r {
                            let l = mask.labels[y * mask.side + x];
                            if l != IGNORE_LABEL {
                                *counts.entry(l).or_insert(0usize) += 1;
                            }
                        }
                    }
                    counts
                        .into_iter()
                        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                        .map_or(IGNORE_LABEL, |(l, _)| l)
                }
            };
            out.push(label);
        }
    }
    Ok(out)
}

/// Prediction at label resolution: token class scores are upsampled onto
/// fine maps and averaged over the tokens of each cell on coarse maps.
fn predict_mask(model: &LinearClassifier, tokens: &TokenGrid, mask_side: usize) -> Result<Vec<u32>> {
    let grid = tokens.grid;
    let logits: Vec<Vec<f64>> = tokens.tokens.iter().map(|t| model.logits(t)).collect();
    let out = match alignment(grid, mask_side)? {
        Alignment::Finer(r) => (0..mask_side * mask_side)
            .map(|i| {
                let (y, x) = (i / mask_side, i % mask_side);
                argmax(&logits[(y / r) * grid + x / r]) as u32
            })
            .collect(),
        Alignment::Coarser(r) => (0..mask_side * mask_side)
            .map(|i| {
                let (cy, cx) = (i / mask_side, i % mask_side);
                let mut acc = vec![0.0; logits[0].len()];
                for ty in cy * r..(cy + 1) * r {
                    for tx in cx * r..(cx + 1) * r {
                        for (a, v) in acc.iter_mut().zip(&logits[ty * grid + tx]) {
                            *a += v;
                        }
                    }
                }
                argmax(&acc) as u32
            })
            .collect(),
    };
    Ok(out)
}

/// Mean IoU over the classes present in `truth`, plus the per-class IoU of
/// those classes. Pixels labeled [`IGNORE_LABEL`] are skipped.
pub fn mean_iou(pred: &[u32], truth: &[u32], classes: usize) -> (f64, Vec<Option<f64>>) {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fnn = vec![0usize; classes];
    let mut present = vec![false; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t == IGNORE_LABEL {
            continue;
        }
        let (p, t) = (p as usize, t as usize);
        present[t] = true;
        if p == t {
            tp[t] += 1;
        } else {
            fnn[t] += 1;
            if p < classes {
                fp[p] += 1;
            }
        }
    }
    let per: Vec<Option<f64>> = (0..classes)
        .map(|c| present[c].then(|| tp[c] as f64 / (tp[c] + fp[c] + fnn[c]) as f64))
        .collect();
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    let miou = if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    (miou, per)
}

/// Per-token linear classifier on precomputed token grids.
pub fn segmentation_probe_on_tokens(
    train: &[(TokenGrid, LabelMask)],
    test: &[(TokenGrid, LabelMask)],
    classes: usize,
    cfg: &LinearProbeConfig,
) -> Result<SegmentationResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Parameter("segmentation probe needs train and test samples".into()));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (tokens, mask) in train {
        for (t, l) in tokens.tokens.iter().zip(token_labels(tokens.grid, mask)?) {
            if l != IGNORE_LABEL {
                if l as usize >= classes {
                    return Err(Error::Parameter(format!("label {l} outside {classes} classes")));
                }
                x.push(t.clone());
                y.push(l as usize);
            }
        }
    }
    let model = LinearClassifier::fit(&x, &y, classes, cfg)?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (tokens, mask) in test {
        pred.extend(predict_mask(&model, tokens, mask.side)?);
        truth.extend_from_slice(&mask.labels);
    }
    let (miou, per_class) = mean_iou(&pred, &truth, classes);
    let valid = truth.iter().filter(|t| **t != IGNORE_LABEL).count();
    let correct = pred.iter().zip(&truth).filter(|(p, t)| **t != IGNORE_LABEL && p == t).count();
    Ok(SegmentationResult {
        miou,
        per_class_iou: per_class,
        pixel_accuracy: if valid == 0 { 0.0 } else { correct as f64 / valid as f64 },
    })
}

fn encode_tokens(encoder: &VisionTransformer, samples: &[SegmentationSample], batch: usize) -> Result<Vec<TokenGrid>> {
    let side = encoder.input_side();
    let mut out = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let imgs: Vec<Raster> = chunk
            .iter()
            .map(|s| {
                let mut r = s.image.resize(side, side);
                r.clamp_unit();
                r
            })
            .collect();
        let tokens = encoder.encode(&imgs)?;
        let grid = tokens.grid.0;
        let all = tokens.patches.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
        out.extend(all.into_iter().map(|t| TokenGrid { grid, tokens: t }));
    }
    Ok(out)
}

/// Frozen patch tokens of `encoder` fed to a per-token linear classifier.
pub fn segmentation_linear_probe(
    encoder: &VisionTransformer,
    train: &[SegmentationSample],
    test: &[SegmentationSample],
    classes: usize,
    cfg: &LinearProbeConfig,
) -> Result<SegmentationResult> {
    let grid = encoder.preset().grid_side(encoder.input_side())?;
    for s in train.iter().chain(test) {
        alignment(grid, s.mask.side)?;
    }
    let tr = encode_tokens(encoder, train, 16)?;
    let te = encode_tokens(encoder, test, 16)?;
    let pair = |g: Vec<TokenGrid>, s: &[SegmentationSample]| -> Vec<(TokenGrid, LabelMask)> {
        g.into_iter().zip(s.iter().map(|x| x.mask.clone())).collect()
    };
    segmentation_probe_on_tokens(&pair(tr, train), &pair(te, test), classes, cfg)
}
