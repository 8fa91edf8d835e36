//! Self-distillation training with the cross-sensor alignment term, from
//! scratch or continually from a frozen domain teacher.

mod augment;
mod config;
mod optim;
mod schedule;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use augment::{augment_view, multicrop_augment, random_resized_crop_region, MultiCropConfig, MultiCropViews};
pub use config::{config_hash, Precision, TrainConfig};
pub use optim::{clip_per_parameter, collect_grads, AdamW};
pub use schedule::{teacher_temperature, CosineSchedule};

use crate::backbone::{BackbonePreset, DinoHead, DinoNetwork, ProjectionHead, TokenEmbeddings, VisionTransformer};
use crate::checkpoint::{Checkpoint, CheckpointMeta, Regime, FORMAT_VERSION};
use crate::data::{iterate_groups, resize_to_input, PairManifest, PairStreamOptions, PairedSample, Split};
use crate::losses::{
    dino_loss_from_logits, msad_loss, msad_probabilities_global, msad_probabilities_patchwise, sharpen,
    smooth_targets, update_center, xstars_loss, xstars_loss_value, LossWeights,
};
use crate::params::{ema_update, ParamBuilder, ParamSet};
use crate::raster::Raster;
use crate::seed;
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_dino: f64,
    pub loss_msad: f64,
    /// MSAD value per sensor pair, keyed `"a|b"`.
    pub msad_pairs: BTreeMap<String, f64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub teacher_temp: f64,
    pub grad_norm: f64,
    pub clamp_count: usize,
    pub batch_size: usize,
}

/// Inputs of one step after resizing and augmentation.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub footprints: Vec<String>,
    /// Resized chips per sensor, in the run's sensor order.
    pub plain: BTreeMap<String, Vec<Raster>>,
    /// Per DINO sensor: global views, each a batch of images.
    pub globals: BTreeMap<String, Vec<Vec<Raster>>>,
    /// Per DINO sensor: local views, each a batch of images.
    pub locals: BTreeMap<String, Vec<Vec<Raster>>>,
}

impl PreparedBatch {
    pub fn batch_size(&self) -> usize {
        self.footprints.len()
    }
}

/// Loss tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub total: Tensor,
    pub dino: Tensor,
    pub msad: Option<Tensor>,
    pub msad_pairs: Vec<((String, String), Tensor)>,
    pub clamped: usize,
    /// Raw teacher logits of every global view, for the center update.
    pub teacher_logits: Tensor,
}

struct FrozenEncoder {
    params: ParamSet,
    encoder: VisionTransformer,
}

/// Student, EMA teacher, projection heads, optional frozen domain teacher
/// and optimizer state.
pub struct Trainer {
    config: TrainConfig,
    regime: Regime,
    preset: BackbonePreset,
    student_params: ParamSet,
    student: DinoNetwork,
    teacher_params: ParamSet,
    teacher: DinoNetwork,
    head_params: ParamSet,
    heads: BTreeMap<String, ProjectionHead>,
    frozen: Option<FrozenEncoder>,
    center: Tensor,
    optimizer: AdamW,
    epoch: usize,
    step: usize,
    steps_per_epoch: usize,
}

fn build_network(params: &mut ParamSet, seed: u64, dtype: DType, config: &TrainConfig, preset: &BackbonePreset) -> Result<DinoNetwork> {
    let mut b = ParamBuilder::new(params, seed, dtype);
    DinoNetwork::new(&mut b, preset, config.input_side, &config.dino_head)
}

fn build_heads(
    params: &mut ParamSet,
    seed: u64,
    dtype: DType,
    sensors: &[String],
    width: usize,
    out: usize,
) -> Result<BTreeMap<String, ProjectionHead>> {
    let mut b = ParamBuilder::new(params, seed, dtype);
    sensors
        .iter()
        .map(|s| Ok((s.clone(), ProjectionHead::new(&mut b, s, width, out)?)))
        .collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl Trainer {
    /// Fresh run with randomly initialized student; the teacher starts as a
    /// copy of the student.
    pub fn new_scratch(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let preset = config.backbone_preset()?;
        let dtype = config.precision.dtype();
        let mut student_params = ParamSet::new();
        let student = build_network(&mut student_params, seed::derive(&[config.seed, 1]), dtype, &config, &preset)?;
        let mut teacher_params = student_params.deep_clone()?;
        let teacher = build_network(&mut teacher_params, 0, dtype, &config, &preset)?;
        let center = Tensor::zeros((1, config.dino_head.out_dim), dtype, &Device::Cpu)?;
        Self::assemble(config, Regime::Scratch, preset, student_params, student, teacher_params, teacher, None, center)
    }

    /// Continual run: the student, teacher and frozen encoder all start from
    /// the teacher weights of `teacher_checkpoint`. `config.sensors` must be
    /// `[source, target]` with `source` among the checkpoint's sensors.
    pub fn new_continual(config: TrainConfig, teacher_checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        if config.sensors.len() != 2 {
            return Err(Error::Config(format!(
                "continual training needs sensors = [source, target], got {:?}",
                config.sensors
            )));
        }
        let ckpt = Checkpoint::load(teacher_checkpoint)?;
        let preset = config.backbone_preset()?;
        if ckpt.meta.preset != preset {
            return Err(Error::Config(format!(
                "domain teacher uses backbone `{}` but the configuration asks for `{}`",
                ckpt.meta.preset.name, preset.name
            )));
        }
        if ckpt.meta.input_side != config.input_side {
            return Err(Error::Config(format!(
                "domain teacher was trained at input side {} but the configuration asks for {}",
                ckpt.meta.input_side, config.input_side
            )));
        }
        if ckpt.meta.config.dino_head != config.dino_head {
            return Err(Error::Config(format!(
                "domain teacher DINO head {:?} differs from configured {:?}",
                ckpt.meta.config.dino_head, config.dino_head
            )));
        }
        let source = &config.sensors[0];
        if !ckpt.meta.config.sensors.contains(source) {
            return Err(Error::Config(format!(
                "source sensor `{source}` was not part of the domain teacher's training set {:?}",
                ckpt.meta.config.sensors
            )));
        }
        let dtype = config.precision.dtype();
        let base = ckpt.params("teacher")?.to_dtype(dtype)?;
        let mut student_params = base.deep_clone()?;
        let student = build_network(&mut student_params, 0, dtype, &config, &preset)?;
        let mut teacher_params = base.deep_clone()?;
        let teacher = build_network(&mut teacher_params, 0, dtype, &config, &preset)?;
        student_params.check_same_structure(&base)?;
        let (params, encoder) = ckpt.backbone_as("teacher", dtype)?;
        let frozen = FrozenEncoder { params, encoder };
        let center = ckpt.center()?.to_dtype(dtype)?;
        Self::assemble(
            config,
            Regime::Continual {
                teacher_checkpoint: teacher_checkpoint.to_path_buf(),
            },
            preset,
            student_params,
            student,
            teacher_params,
            teacher,
            Some(frozen),
            center,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        regime: Regime,
        preset: BackbonePreset,
        student_params: ParamSet,
        student: DinoNetwork,
        teacher_params: ParamSet,
        teacher: DinoNetwork,
        frozen: Option<FrozenEncoder>,
        center: Tensor,
    ) -> Result<Self> {
        let dtype = config.precision.dtype();
        let mut head_params = ParamSet::new();
        let out = config.projection_dim.unwrap_or(preset.width);
        let heads = build_heads(&mut head_params, seed::derive(&[config.seed, 2]), dtype, &config.sensors, preset.width, out)?;
        Ok(Self {
            config,
            regime,
            preset,
            student_params,
            student,
            teacher_params,
            teacher,
            head_params,
            heads,
            frozen,
            center,
            optimizer: AdamW::new(),
            epoch: 0,
            step: 0,
            steps_per_epoch: 1,
        })
    }

    /// Restores a run from one of its checkpoints.
    pub fn resume(dir: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(dir)?;
        let meta = &ckpt.meta;
        let config = meta.config.clone();
        config.validate()?;
        let preset = meta.preset.clone();
        let dtype = config.precision.dtype();
        let mut student_params = ckpt.params("student")?.to_dtype(dtype)?;
        let n_student = student_params.len();
        let student = build_network(&mut student_params, 0, dtype, &config, &preset)?;
        let mut teacher_params = ckpt.params("teacher")?.to_dtype(dtype)?;
        let teacher = build_network(&mut teacher_params, 0, dtype, &config, &preset)?;
        let mut head_params = ckpt.params("heads")?.to_dtype(dtype)?;
        let n_heads = head_params.len();
        let out = config.projection_dim.unwrap_or(preset.width);
        let heads = build_heads(&mut head_params, 0, dtype, &config.sensors, preset.width, out)?;
        if student_params.len() != n_student || head_params.len() != n_heads {
            return Err(Error::Parameter(format!("checkpoint {} is incomplete", dir.display())));
        }
        student_params.check_same_structure(&teacher_params)?;
        let frozen = match &meta.regime {
            Regime::Scratch => None,
            Regime::Continual { .. } => {
                let (params, encoder) = ckpt.backbone_as("frozen", dtype)?;
                Some(FrozenEncoder { params, encoder })
            }
        };
        let optimizer = AdamW::import_from("optim.", &ckpt.tensors, dtype)?;
        Ok(Self {
            center: ckpt.center()?.to_dtype(dtype)?,
            regime: meta.regime.clone(),
            epoch: meta.epoch,
            step: meta.step,
            steps_per_epoch: meta.steps_per_epoch.max(1),
            config,
            preset,
            student_params,
            student,
            teacher_params,
            teacher,
            head_params,
            heads,
            frozen,
            optimizer,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn regime(&self) -> &Regime {
        &self.regime
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> usize {
        self.step
    }

    pub fn student(&self) -> &DinoNetwork {
        &self.student
    }

    pub fn teacher(&self) -> &DinoNetwork {
        &self.teacher
    }

    pub fn student_params(&self) -> &ParamSet {
        &self.student_params
    }

    pub fn teacher_params(&self) -> &ParamSet {
        &self.teacher_params
    }

    pub fn head_params(&self) -> &ParamSet {
        &self.head_params
    }

    pub fn frozen_params(&self) -> Option<&ParamSet> {
        self.frozen.as_ref().map(|f| &f.params)
    }

    pub fn frozen_encoder(&self) -> Option<&VisionTransformer> {
        self.frozen.as_ref().map(|f| &f.encoder)
    }

    pub fn center(&self) -> &Tensor {
        &self.center
    }

    /// Sets the number of optimizer steps per epoch used by the schedules.
    pub fn set_steps_per_epoch(&mut self, n: usize) {
        self.steps_per_epoch = n.max(1);
    }

    fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        CosineSchedule::new(self.config.peak_lr(), self.config.min_lr, self.total_steps())
            .with_warmup(self.config.warmup_epochs * self.steps_per_epoch, 0.0)
            .at(step)
    }

    pub fn weight_decay_at(&self, step: usize) -> f64 {
        CosineSchedule::new(self.config.weight_decay, self.config.weight_decay_end, self.total_steps()).at(step)
    }

    pub fn ema_momentum_at(&self, step: usize) -> f64 {
        CosineSchedule::new(self.config.ema_momentum_start, self.config.ema_momentum_end, self.total_steps()).at(step)
    }

    pub fn teacher_temp_at(&self, epoch: usize) -> f64 {
        teacher_temperature(
            epoch,
            self.config.warmup_teacher_temp,
            self.config.teacher_temp,
            self.config.warmup_teacher_temp_epochs,
        )
    }

    /// Sensors that receive the DINO objective.
    fn dino_sensors(&self) -> Vec<String> {
        match self.regime {
            Regime::Scratch => self.config.sensors.clone(),
            Regime::Continual { .. } => vec![self.config.sensors[1].clone()],
        }
    }

    /// Sensor pairs of the alignment term: `(student side, other side)`.
    fn msad_pairs(&self) -> Vec<(String, String)> {
        let s = &self.config.sensors;
        match self.regime {
            Regime::Scratch => {
                let mut out = Vec::new();
                for i in 0..s.len() {
                    for j in i + 1..s.len() {
                        out.push((s[i].clone(), s[j].clone()));
                    }
                }
                out
            }
            Regime::Continual { .. } if self.config.continual_swap_roles => vec![(s[0].clone(), s[1].clone())],
            Regime::Continual { .. } => vec![(s[1].clone(), s[0].clone())],
        }
    }

    pub fn multicrop_config(&self) -> Result<MultiCropConfig> {
        let mut mc = MultiCropConfig::new(
            self.config.input_side,
            self.config.effective_local_side()?,
            self.config.local_crops,
        );
        mc.global_scale = self.config.global_crop_scale;
        mc.local_scale = self.config.local_crop_scale;
        Ok(mc)
    }

    /// Resizes chips to the input side and draws the multi-crop views. The
    /// augmentation stream of each chip is keyed by run seed, epoch,
    /// footprint and sensor.
    pub fn prepare(&self, batch: &[PairedSample]) -> Result<PreparedBatch> {
        if batch.is_empty() {
            return Err(Error::Parameter("empty batch".into()));
        }
        let mc = self.multicrop_config()?;
        let dino = self.dino_sensors();
        let mut plain: BTreeMap<String, Vec<Raster>> = BTreeMap::new();
        let mut globals: BTreeMap<String, Vec<Vec<Raster>>> = BTreeMap::new();
        let mut locals: BTreeMap<String, Vec<Vec<Raster>>> = BTreeMap::new();
        for sensor in &self.config.sensors {
            let mut imgs = Vec::with_capacity(batch.len());
            let mut g = vec![Vec::with_capacity(batch.len()); 2];
            let mut l = vec![Vec::with_capacity(batch.len()); mc.local_crops];
            for sample in batch {
                let chip = sample.chip(sensor).ok_or_else(|| {
                    Error::Config(format!(
                        "footprint `{}` has no chip for sensor `{sensor}`",
                        sample.footprint_id
                    ))
                })?;
                let resized = resize_to_input(chip, self.config.input_side)?.pixels;
                if dino.contains(sensor) {
                    let mut rng = seed::rng(&[
                        self.config.seed,
                        self.epoch as u64,
                        seed::hash_str(&sample.footprint_id),
                        seed::hash_str(sensor),
                    ]);
                    let views = multicrop_augment(&resized, &mc, &mut rng)?;
                    for (v, img) in views.globals.into_iter().enumerate() {
                        g[v].push(img);
                    }
                    for (v, img) in views.locals.into_iter().enumerate() {
                        l[v].push(img);
                    }
                }
                imgs.push(resized);
            }
            if dino.contains(sensor) {
                globals.insert(sensor.clone(), g);
                locals.insert(sensor.clone(), l);
            }
            plain.insert(sensor.clone(), imgs);
        }
        Ok(PreparedBatch {
            footprints: batch.iter().map(|s| s.footprint_id.clone()).collect(),
            plain,
            globals,
            locals,
        })
    }

    fn split_views(logits: &Tensor, views: usize, b: usize) -> Result<Vec<Tensor>> {
        (0..views).map(|v| Ok(logits.narrow(0, v * b, b)?)).collect()
    }

    fn split_tokens(tokens: &TokenEmbeddings, groups: usize, b: usize) -> Result<Vec<TokenEmbeddings>> {
        (0..groups)
            .map(|g| {
                Ok(TokenEmbeddings {
                    global: tokens.global.narrow(0, g * b, b)?,
                    patches: tokens.patches.narrow(0, g * b, b)?,
                    grid: tokens.grid,
                })
            })
            .collect()
    }

    fn alignment(&self, a: &TokenEmbeddings, b: &TokenEmbeddings) -> Result<crate::losses::MsadLoss> {
        let sim = if self.config.patchwise {
            msad_probabilities_patchwise(&a.patches, &b.patches, self.config.msad_tau)?
        } else {
            msad_probabilities_global(&a.global, &b.global, self.config.msad_tau)?
        };
        let targets = smooth_targets(a.batch_size(), self.config.effective_alpha())?;
        msad_loss(&sim, &targets)
    }

    /// Forward pass producing every loss term. Teacher and frozen-encoder
    /// outputs are detached, so gradients reach only the student and heads.
    pub fn losses(&self, prepared: &PreparedBatch) -> Result<StepLosses> {
        let b = prepared.batch_size();
        let student_temp = self.config.student_temp;
        let teacher_temp = self.teacher_temp_at(self.epoch);
        let mut dino_terms = Vec::new();
        let mut teacher_logits = Vec::new();
        for sensor in self.dino_sensors() {
            let globals = &prepared.globals[&sensor];
            let locals = &prepared.locals[&sensor];
            let g_imgs: Vec<Raster> = globals.iter().flatten().cloned().collect();
            let t_logits = self.teacher.logits(&g_imgs)?.detach();
            let t_views = Self::split_views(&t_logits, globals.len(), b)?
                .iter()
                .map(|t| sharpen(t, teacher_temp, Some(&self.center)))
                .collect::<Result<Vec<_>>>()?;
            let mut s_views = Self::split_views(&self.student.logits(&g_imgs)?, globals.len(), b)?;
            if !locals.is_empty() {
                let l_imgs: Vec<Raster> = locals.iter().flatten().cloned().collect();
                s_views.extend(Self::split_views(&self.student.logits(&l_imgs)?, locals.len(), b)?);
            }
            dino_terms.push(dino_loss_from_logits(&s_views, student_temp, &t_views)?);
            teacher_logits.push(t_logits);
        }
        let dino = if dino_terms.len() == 1 {
            dino_terms.pop().expect("one term")
        } else {
            (Tensor::stack(&dino_terms, 0)?.sum_all()? / dino_terms.len() as f64)?
        };
        let teacher_logits = Tensor::cat(&teacher_logits, 0)?;

        let pairs = self.msad_pairs();
        let mut msad_pairs = Vec::new();
        let mut clamped = 0;
        if self.config.msad_enabled && !pairs.is_empty() {
            let students: Vec<String> = match self.regime {
                Regime::Scratch => self.config.sensors.clone(),
                Regime::Continual { .. } => vec![pairs[0].0.clone()],
            };
            let imgs: Vec<Raster> = students.iter().flat_map(|s| prepared.plain[s].iter().cloned()).collect();
            let encoded = self.student.backbone.encode(&imgs)?;
            let mut tokens: HashMap<String, TokenEmbeddings> = students
                .iter()
                .cloned()
                .zip(Self::split_tokens(&encoded, students.len(), b)?)
                .collect();
            if let (Some(frozen), Regime::Continual { .. }) = (&self.frozen, &self.regime) {
                let other = &pairs[0].1;
                tokens.insert(other.clone(), frozen.encoder.encode(&prepared.plain[other])?.detach());
            }
            for (sa, sb) in &pairs {
                let pa = self.heads[sa].project(&tokens[sa])?;
                let pb = self.heads[sb].project(&tokens[sb])?;
                let loss = self.alignment(&pa, &pb)?;
                clamped += loss.clamped;
                msad_pairs.push(((sa.clone(), sb.clone()), loss.value));
            }
        }
        let msad = match msad_pairs.len() {
            0 => None,
            1 => Some(msad_pairs[0].1.clone()),
            n => {
                let terms: Vec<Tensor> = msad_pairs.iter().map(|(_, t)| t.clone()).collect();
                Some((Tensor::stack(&terms, 0)?.sum_all()? / n as f64)?)
            }
        };
        let weights = LossWeights::new(self.config.lambda)?;
        let total = match &msad {
            Some(m) => xstars_loss(&dino, m, weights)?,
            None => dino.clone(),
        };
        Ok(StepLosses {
            total,
            dino,
            msad,
            msad_pairs,
            clamped,
            teacher_logits,
        })
    }

    /// One optimization step on a batch of footprint-aligned samples from
    /// scratch-mode sensors.
    pub fn pretrain_step(&mut self, batch: &[PairedSample]) -> Result<StepRecord> {
        if !matches!(self.regime, Regime::Scratch) {
            return Err(Error::Usage("pretrain_step called on a continual run".into()));
        }
        self.step_inner(batch)
    }

    /// One optimization step of continual pretraining.
    pub fn continual_step(&mut self, batch: &[PairedSample]) -> Result<StepRecord> {
        if !matches!(self.regime, Regime::Continual { .. }) {
            return Err(Error::Usage("continual_step called on a scratch run".into()));
        }
        self.step_inner(batch)
    }

    fn step_inner(&mut self, batch: &[PairedSample]) -> Result<StepRecord> {
        let prepared = self.prepare(batch)?;
        let losses = self.losses(&prepared)?;
        let dino = scalar(&losses.dino)?;
        let msad = match &losses.msad {
            Some(m) => scalar(m)?,
            None => 0.0,
        };
        let mut pair_values = BTreeMap::new();
        for ((a, b), t) in &losses.msad_pairs {
            pair_values.insert(format!("{a}|{b}"), scalar(t)?);
        }
        if !dino.is_finite() || !msad.is_finite() {
            let component = if !dino.is_finite() { "dino" } else { "msad" };
            let pair = pair_values
                .iter()
                .find(|(_, v)| !v.is_finite())
                .map(|(k, _)| k.replace('|', "/"))
                .unwrap_or_else(|| self.config.sensors.join("/"));
            return Err(Error::Numeric(format!(
                "non-finite {component} loss at step {} (epoch {}), sensor pair {pair}: dino={dino}, msad={msad}",
                self.step, self.epoch
            )));
        }
        let weights = LossWeights::new(self.config.lambda)?;
        let total = xstars_loss_value(dino, msad, weights);

        let store = losses.total.backward()?;
        let mut trainable = self.student_params.clone();
        trainable.extend_shared(&self.head_params)?;
        let mut grads = collect_grads(&trainable, &store);
        if self.epoch < self.config.freeze_last_layer_epochs {
            grads.remove(DinoHead::LAST_LAYER);
        }
        let grad_norm = clip_per_parameter(&mut grads, self.config.clip_grad)?;
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at step {} (epoch {}) for sensors {}",
                self.step,
                self.epoch,
                self.config.sensors.join("/")
            )));
        }
        let lr = self.lr_at(self.step);
        let wd = self.weight_decay_at(self.step);
        let momentum = self.ema_momentum_at(self.step);
        self.optimizer.step(&trainable, &grads, lr, wd)?;
        ema_update(&self.teacher_params, &self.student_params, momentum)?;
        self.center = update_center(&self.center, &losses.teacher_logits, self.config.center_momentum)?;

        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            loss_total: total,
            loss_dino: dino,
            loss_msad: msad,
            msad_pairs: pair_values,
            lr,
            weight_decay: wd,
            ema_momentum: momentum,
            teacher_temp: self.teacher_temp_at(self.epoch),
            grad_norm,
            clamp_count: losses.clamped,
            batch_size: prepared.batch_size(),
        };
        self.step += 1;
        Ok(record)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = HashMap::new();
        self.student_params.export_into("student.", &mut tensors);
        self.teacher_params.export_into("teacher.", &mut tensors);
        self.head_params.export_into("heads.", &mut tensors);
        if let Some(f) = &self.frozen {
            f.params.export_into("frozen.", &mut tensors);
        }
        self.optimizer.export_into("optim.", &mut tensors)?;
        tensors.insert("center".into(), self.center.clone());
        Ok(Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                preset: self.preset.clone(),
                input_side: self.config.input_side,
                epoch: self.epoch,
                step: self.step,
                steps_per_epoch: self.steps_per_epoch,
                regime: self.regime.clone(),
                config_hash: self.config.hash(),
                config: self.config.clone(),
            },
            tensors,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint()?.save(dir)
    }

    fn stream_options(&self, epoch: usize) -> PairStreamOptions {
        let mut opts = PairStreamOptions::new(self.config.batch_size, seed::derive(&[self.config.seed, epoch as u64]));
        opts.split = Some(Split::Train);
        opts.drop_singleton = self.config.smoothing && self.config.alpha > 0.0;
        opts
    }

    /// Trains until `config.epochs`, writing the effective configuration,
    /// the metrics log and periodic checkpoints under `out_dir`. A run with
    /// zero epochs writes only the initial checkpoint.
    pub fn fit(&mut self, manifest: &PairManifest, out_dir: &Path) -> Result<TrainOutcome> {
        let sensors = self.config.sensors.clone();
        let probe = iterate_groups(manifest, &sensors, self.stream_options(0))?;
        if probe.footprint_count() == 0 {
            return Err(Error::Config(format!(
                "no training footprint has chips for every sensor in [{}]",
                sensors.join(", ")
            )));
        }
        self.set_steps_per_epoch(probe.batch_count());
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let config_path = out_dir.join(CONFIG_FILE);
        let text = toml::to_string(&self.config).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(&config_path, format!("# config_hash = \"{}\"\n{text}", self.config.hash()))
            .map_err(|e| Error::io(&config_path, e))?;

        let metrics_path = out_dir.join(METRICS_FILE);
        let mut history = truncate_metrics(&metrics_path, self.step)?;
        let mut metrics = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        let ckpt_root = out_dir.join(CHECKPOINT_DIR);
        let mut checkpoints = Vec::new();
        if self.epoch == 0 {
            let dir = ckpt_root.join(checkpoint_name(0));
            self.save_checkpoint(&dir)?;
            checkpoints.push(dir);
        }
        while self.epoch < self.config.epochs {
            let epoch = self.epoch;
            let mut last = None;
            for batch in iterate_groups(manifest, &sensors, self.stream_options(epoch))? {
                let batch = batch?;
                let record = match self.regime {
                    Regime::Scratch => self.pretrain_step(&batch)?,
                    Regime::Continual { .. } => self.continual_step(&batch)?,
                };
                writeln!(metrics, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&metrics_path, e))?;
                last = Some(record.clone());
                history.push(record);
            }
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            self.epoch += 1;
            if let Some(r) = last {
                log::info!(
                    "epoch {}/{}: loss {:.4} (dino {:.4}, msad {:.4})",
                    self.epoch,
                    self.config.epochs,
                    r.loss_total,
                    r.loss_dino,
                    r.loss_msad
                );
            }
            if self.epoch % self.config.checkpoint_every == 0 || self.epoch == self.config.epochs {
                let dir = ckpt_root.join(checkpoint_name(self.epoch));
                self.save_checkpoint(&dir)?;
                checkpoints.push(dir);
            }
        }
        let final_checkpoint = ckpt_root.join(checkpoint_name(self.epoch));
        if !final_checkpoint.join(crate::checkpoint::META_FILE).is_file() {
            self.save_checkpoint(&final_checkpoint)?;
            checkpoints.push(final_checkpoint.clone());
        }
        Ok(TrainOutcome {
            checkpoints,
            final_checkpoint,
            metrics_path,
            history,
        })
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}")
}

/// Reads a metrics log, dropping lines at or beyond `keep_before` so a
/// resumed run does not duplicate steps. The file is rewritten in place.
fn truncate_metrics(path: &Path, keep_before: usize) -> Result<Vec<StepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let kept: Vec<StepRecord> = read_metrics(path)?.into_iter().filter(|r| r.step < keep_before).collect();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in &kept {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(kept)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub history: Vec<StepRecord>,
}

/// Scratch pretraining of `config.sensors` on `manifest`.
pub fn pretrain(manifest: &PairManifest, config: TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    Trainer::new_scratch(config)?.fit(manifest, out_dir)
}

/// Continual pretraining from the teacher in `teacher_checkpoint`.
pub fn continual_pretrain(
    manifest: &PairManifest,
    config: TrainConfig,
    teacher_checkpoint: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    Trainer::new_continual(config, teacher_checkpoint)?.fit(manifest, out_dir)
}
