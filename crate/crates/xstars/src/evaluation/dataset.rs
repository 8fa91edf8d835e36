use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::data::scenes::{render_scene, render_segmentation_scene, SceneClass};
use crate::data::{SensorProfile, Split};
use crate::raster::Raster;
use crate::seed;
use crate::{Error, Result};

pub const LABELS_FILE: &str = "labels.jsonl";
/// Mask value that is excluded from training and scoring.
pub const IGNORE_LABEL: u32 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledRecord {
    /// Image path relative to the dataset file.
    pub image: String,
    pub label: String,
    pub split: Split,
    /// Optional dense label map (PNG, gray value = class index).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// Line-delimited JSON list of labeled images.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    root: PathBuf,
    records: Vec<LabeledRecord>,
    classes: Vec<String>,
}

impl LabeledDataset {
    pub fn new(root: impl Into<PathBuf>, records: Vec<LabeledRecord>) -> Self {
        let classes: BTreeSet<String> = records.iter().map(|r| r.label.clone()).collect();
        Self {
            root: root.into(),
            records,
            classes: classes.into_iter().collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabeledRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("malformed record: {e}"),
            })?;
            records.push(rec);
        }
        Ok(Self::new(root, records))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[LabeledRecord] {
        &self.records
    }

    /// Sorted class names; a record's label index is its position here.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_index(&self, record: &LabeledRecord) -> usize {
        self.classes.binary_search(&record.label).expect("label from this dataset")
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn image(&self, i: usize) -> Result<Raster> {
        Raster::load(&self.root.join(&self.records[i].image))
    }

    pub fn mask(&self, i: usize) -> Result<LabelMask> {
        let rel = self.records[i].mask.as_ref().ok_or_else(|| {
            Error::Config(format!("record `{}` has no mask", self.records[i].image))
        })?;
        LabelMask::load(&self.root.join(rel))
    }
}

/// Dense integer label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub side: usize,
    pub labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(side: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != side * side {
            return Err(Error::Shape(format!(
                "mask of side {side} needs {} labels, got {}",
                side * side,
                labels.len()
            )));
        }
        Ok(Self { side, labels })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        if img.width() != img.height() {
            return Err(Error::Shape(format!(
                "mask {} is {}x{}, expected square",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        Self::new(img.width() as usize, img.pixels().map(|p| p.0[0] as u32).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut img = GrayImage::new(self.side as u32, self.side as u32);
        for (i, l) in self.labels.iter().enumerate() {
            let v = u8::try_from(*l).map_err(|_| Error::Parameter(format!("label {l} does not fit a PNG mask")))?;
            img.put_pixel((i % self.side) as u32, (i / self.side) as u32, Luma([v]));
        }
        img.save(path)?;
        Ok(())
    }
}

/// Options for [`write_scene_dataset`].
#[derive(Debug, Clone)]
pub struct SceneDatasetOptions {
    pub per_class: usize,
    /// Side of the rendered scene before sensor degradation.
    pub base_side: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub classes: Vec<SceneClass>,
    /// Also render segmentation scenes with masks on a `cells x cells` grid.
    pub segmentation_cells: Option<usize>,
}

impl Default for SceneDatasetOptions {
    fn default() -> Self {
        Self {
            per_class: 20,
            base_side: 96,
            train_fraction: 0.5,
            seed: 0,
            classes: SceneClass::ALL.to_vec(),
            segmentation_cells: None,
        }
    }
}

/// Renders a labeled scene-classification set as seen by each sensor,
/// writing `out_dir/<sensor>/labels.jsonl`. Every sensor sees the same
/// underlying scenes. Returns the dataset file per sensor.
pub fn write_scene_dataset(
    out_dir: &Path,
    profiles: &[SensorProfile],
    opts: &SceneDatasetOptions,
) -> Result<BTreeMap<String, PathBuf>> {
    if opts.classes.is_empty() || opts.per_class == 0 {
        return Err(Error::Parameter("scene dataset needs at least one class and one image per class".into()));
    }
    let n_train = ((opts.per_class as f64) * opts.train_fraction).round() as usize;
    let mut records: BTreeMap<String, Vec<LabeledRecord>> = BTreeMap::new();
    for (ci, class) in opts.classes.iter().enumerate() {
        for k in 0..opts.per_class {
            let mut rng = seed::rng(&[opts.seed, ci as u64, k as u64]);
            let id = format!("{}_{k:04}", class.name());
            let (base, mask) = match opts.segmentation_cells {
                Some(cells) => {
                    let (img, labels) = render_segmentation_scene(&opts.classes, cells, opts.base_side, &mut rng);
                    let lm = LabelMask::new(cells, remap(&labels, &opts.classes))?;
                    (img, Some(lm))
                }
                None => (render_scene(*class, opts.base_side, &mut rng), None),
            };
            let split = if k < n_train { Split::Train } else { Split::Val };
            for p in profiles {
                let dir = out_dir.join(&p.sensor_id);
                let pixels = p.degrade(&base, seed::derive(&[opts.seed, ci as u64, k as u64, seed::hash_str(&p.sensor_id)]))?;
                let rel = format!("images/{id}.png");
                pixels.save_png(&dir.join(&rel))?;
                let mask_rel = match &mask {
                    Some(m) => {
                        let r = format!("masks/{id}.png");
                        m.save(&dir.join(&r))?;
                        Some(r)
                    }
                    None => None,
                };
                records.entry(p.sensor_id.clone()).or_default().push(LabeledRecord {
                    image: rel,
                    label: class.name().to_string(),
                    split,
                    mask: mask_rel,
                });
            }
        }
    }
    let mut out = BTreeMap::new();
    for (sensor, recs) in records {
        let dir = out_dir.join(&sensor);
        let path = dir.join(LABELS_FILE);
        LabeledDataset::new(&dir, recs).save(&path)?;
        out.insert(sensor, path);
    }
    Ok(out)
}

/// Maps scene class indices to positions in `classes`.
fn remap(labels: &[u32], classes: &[SceneClass]) -> Vec<u32> {
    labels
        .iter()
        .map(|l| classes.iter().position(|c| c.index() == *l).expect("class from list") as u32)
        .collect()
}
