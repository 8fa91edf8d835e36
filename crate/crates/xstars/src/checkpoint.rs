//! On-disk training state: one safetensors file plus a JSON sidecar.
//!
//! Tensor groups are prefixed `student.`, `teacher.`, `heads.`, `frozen.`
//! (continual runs only), `optim.` and the bare `center`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackbonePreset, VisionTransformer};
use crate::params::{ParamBuilder, ParamSet};
use crate::training::TrainConfig;
use crate::{Error, Result};

pub const TENSORS_FILE: &str = "state.safetensors";
pub const META_FILE: &str = "meta.json";
pub const FORMAT_VERSION: u32 = 1;

/// How the run was started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Regime {
    /// Random initialization; every listed sensor is trained jointly.
    Scratch,
    /// Continual pretraining from a frozen domain teacher. The run's sensor
    /// list is `[source, target]`: the teacher was trained on `source`.
    Continual { teacher_checkpoint: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub preset: BackbonePreset,
    pub input_side: usize,
    pub epoch: usize,
    pub step: usize,
    pub steps_per_epoch: usize,
    pub regime: Regime,
    pub config_hash: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint {} has format version {}, expected {FORMAT_VERSION}",
            dir.display(),
            meta.format_version
        )));
    }
    Ok(meta)
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta = read_meta(dir)?;
        let path = dir.join(TENSORS_FILE);
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint tensors missing"),
            ));
        }
        let tensors = candle_core::safetensors::load(&path, &Device::Cpu)?;
        Ok(Self { meta, tensors })
    }

    /// Reads only the sidecar.
    pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
        read_meta(dir)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(TENSORS_FILE);
        candle_core::safetensors::save(&self.tensors, &path)?;
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    /// Parameters of one group (`"student"`, `"teacher"`, `"heads"`, `"frozen"`).
    pub fn params(&self, group: &str) -> Result<ParamSet> {
        let set = ParamSet::import_from(&format!("{group}."), &self.tensors)?;
        if set.is_empty() {
            return Err(Error::Parameter(format!("checkpoint has no `{group}` parameters")));
        }
        Ok(set)
    }

    pub fn center(&self) -> Result<Tensor> {
        self.tensors
            .get("center")
            .cloned()
            .ok_or_else(|| Error::Parameter("checkpoint has no center".into()))
    }

    /// Encoder built from the backbone parameters of `group`; the teacher is
    /// the usual choice for evaluation and continual pretraining.
    pub fn backbone(&self, group: &str) -> Result<(ParamSet, VisionTransformer)> {
        self.backbone_as(group, self.meta.config.precision.dtype())
    }

    /// [`backbone`](Self::backbone) converted to `dtype`.
    pub fn backbone_as(&self, group: &str, dtype: DType) -> Result<(ParamSet, VisionTransformer)> {
        let mut params = self.params(group)?.with_prefix("backbone.").to_dtype(dtype)?;
        let expected = params.len();
        let vit = {
            let mut b = ParamBuilder::new(&mut params, 0, dtype);
            VisionTransformer::new(&mut b, "backbone", &self.meta.preset, self.meta.input_side)?
        };
        if params.len() != expected {
            return Err(Error::Parameter(format!(
                "checkpoint backbone is incomplete for preset `{}`",
                self.meta.preset.name
            )));
        }
        Ok((params, vit))
    }
}
