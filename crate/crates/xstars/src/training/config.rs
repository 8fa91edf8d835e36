use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackbonePreset, DinoHeadConfig};
use crate::{Error, Result};

/// Floating-point precision used for parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

/// Every knob of a training run. Defaults follow the reference DINO recipe
/// plus the MSAD defaults (lambda 0.1, alpha 0.3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// MSAD weight.
    pub lambda: f64,
    /// Label smoothing strength, used when `smoothing` is on.
    pub alpha: f64,
    pub msad_tau: f64,
    pub patchwise: bool,
    pub smoothing: bool,
    /// Skip the MSAD term entirely (the "no MSAD" ablation).
    pub msad_enabled: bool,

    pub preset: String,
    pub dino_head: DinoHeadConfig,
    /// Output width of the per-sensor projection heads; `None` keeps the backbone width.
    pub projection_dim: Option<usize>,
    pub precision: Precision,

    pub input_side: usize,
    pub epochs: usize,
    pub batch_size: usize,

    pub global_crops: usize,
    pub global_crop_scale: (f64, f64),
    pub local_crops: usize,
    pub local_crop_scale: (f64, f64),
    /// Side of local crops; `None` derives `input_side * 96 / 224` rounded to a patch multiple.
    pub local_side: Option<usize>,

    pub student_temp: f64,
    pub teacher_temp: f64,
    pub warmup_teacher_temp: f64,
    pub warmup_teacher_temp_epochs: usize,
    pub center_momentum: f64,
    pub ema_momentum_start: f64,
    pub ema_momentum_end: f64,

    /// Peak learning rate before scaling by `batch_size / 256`.
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    /// Per-parameter gradient norm clip; zero disables clipping.
    pub clip_grad: f64,
    pub freeze_last_layer_epochs: usize,

    pub seed: u64,
    /// Sensors used in training. Scratch runs use all of them; a single
    /// sensor gives plain DINO.
    pub sensors: Vec<String>,
    pub checkpoint_every: usize,
    /// Continual mode: feed the source sensor to the student and the target
    /// sensor to the frozen teacher instead of the reverse.
    pub continual_swap_roles: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            alpha: 0.3,
            msad_tau: crate::losses::DEFAULT_MSAD_TAU,
            patchwise: true,
            smoothing: true,
            msad_enabled: true,
            preset: BackbonePreset::tiny_desk().name,
            dino_head: DinoHeadConfig::default(),
            projection_dim: None,
            precision: Precision::F32,
            input_side: 224,
            epochs: 800,
            batch_size: 32,
            global_crops: 2,
            global_crop_scale: (0.4, 1.0),
            local_crops: 8,
            local_crop_scale: (0.05, 0.4),
            local_side: None,
            student_temp: 0.1,
            teacher_temp: 0.07,
            warmup_teacher_temp: 0.04,
            warmup_teacher_temp_epochs: 30,
            center_momentum: 0.9,
            ema_momentum_start: 0.996,
            ema_momentum_end: 1.0,
            base_lr: 0.0005,
            min_lr: 1e-6,
            warmup_epochs: 10,
            weight_decay: 0.04,
            weight_decay_end: 0.4,
            clip_grad: 3.0,
            freeze_last_layer_epochs: 1,
            seed: 0,
            sensors: Vec::new(),
            checkpoint_every: 25,
            continual_swap_roles: false,
        }
    }
}

impl TrainConfig {
    /// Defaults for the continual regime (400 epochs).
    pub fn continual() -> Self {
        Self {
            epochs: 400,
            ..Self::default()
        }
    }

    pub fn backbone_preset(&self) -> Result<BackbonePreset> {
        BackbonePreset::by_name(&self.preset)
    }

    /// Smoothing actually applied to the targets.
    pub fn effective_alpha(&self) -> f64 {
        if self.smoothing {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn effective_local_side(&self) -> Result<usize> {
        let patch = self.backbone_preset()?.patch_side;
        Ok(match self.local_side {
            Some(s) => s,
            None => {
                let raw = self.input_side as f64 * 96.0 / 224.0;
                ((raw / patch as f64).round() as usize).max(1) * patch
            }
        })
    }

    /// Learning rate peak after the linear batch-size scaling rule.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    /// Returns every violated constraint, not only the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            out.push(format!("alpha must be in [0, 1), got {}", self.alpha));
        }
        if !(self.msad_tau > 0.0) {
            out.push(format!("msad_tau must be > 0, got {}", self.msad_tau));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.smoothing && self.alpha > 0.0 && self.batch_size < 2 {
            out.push("batch_size must be >= 2 when label smoothing is enabled".into());
        }
        if self.global_crops != 2 {
            out.push(format!("global_crops must be 2, got {}", self.global_crops));
        }
        for (name, (lo, hi)) in [
            ("global_crop_scale", self.global_crop_scale),
            ("local_crop_scale", self.local_crop_scale),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                out.push(format!("{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"));
            }
        }
        for (name, t) in [
            ("student_temp", self.student_temp),
            ("teacher_temp", self.teacher_temp),
            ("warmup_teacher_temp", self.warmup_teacher_temp),
        ] {
            if !(t > 0.0) {
                out.push(format!("{name} must be > 0, got {t}"));
            }
        }
        for (name, m) in [
            ("center_momentum", self.center_momentum),
            ("ema_momentum_start", self.ema_momentum_start),
            ("ema_momentum_end", self.ema_momentum_end),
        ] {
            if !(0.0..=1.0).contains(&m) {
                out.push(format!("{name} must be in [0, 1], got {m}"));
            }
        }
        if !(self.base_lr >= 0.0) || !(self.min_lr >= 0.0) {
            out.push("learning rates must be >= 0".into());
        }
        match self.backbone_preset() {
            Err(e) => out.push(e.to_string()),
            Ok(p) => {
                if self.input_side == 0 || self.input_side % p.patch_side != 0 {
                    out.push(format!(
                        "input_side {} must be a positive multiple of the patch side {}",
                        self.input_side, p.patch_side
                    ));
                }
                if let Ok(ls) = self.effective_local_side() {
                    if ls % p.patch_side != 0 || ls == 0 || ls > self.input_side {
                        out.push(format!(
                            "local_side {ls} must be a positive multiple of {} no larger than input_side",
                            p.patch_side
                        ));
                    }
                }
            }
        }
        if self.sensors.is_empty() {
            out.push("sensors must list at least one sensor".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sensors {
            if !seen.insert(s) {
                out.push(format!("sensor `{s}` listed twice"));
            }
        }
        if self.checkpoint_every == 0 {
            out.push("checkpoint_every must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Short stable hash of the full configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of the value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(digest)[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> TrainConfig {
        TrainConfig {
            sensors: vec!["s2".into(), "ls".into()],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = valid();
        c.validate().unwrap();
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.alpha, 0.3);
        assert_eq!(c.epochs, 800);
        assert_eq!(TrainConfig::continual().epochs, 400);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.input_side, 224);
        assert_eq!(c.local_crops, 8);
        assert_eq!(c.effective_local_side().unwrap(), 96);
        let small = TrainConfig {
            input_side: 96,
            ..valid()
        };
        assert_eq!(small.effective_local_side().unwrap(), 48);
    }

    #[test]
    fn problems_are_exhaustive() {
        let c = TrainConfig {
            lambda: -1.0,
            alpha: 1.0,
            batch_size: 1,
            input_side: 100,
            ..TrainConfig::default()
        };
        let p = c.problems();
        assert!(p.len() >= 4, "{p:?}");
        assert!(p.iter().any(|s| s.contains("lambda")));
        assert!(p.iter().any(|s| s.contains("alpha")));
        assert!(p.iter().any(|s| s.contains("input_side")));
        assert!(p.iter().any(|s| s.contains("sensors")));
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = valid();
        let text = toml::to_string(&c).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert!(toml::from_str::<TrainConfig>("lamda = 0.2").is_err());
        let partial: TrainConfig = toml::from_str("lambda = 0.5").unwrap();
        assert_eq!(partial.lambda, 0.5);
        assert_eq!(partial.alpha, 0.3);
        assert_ne!(partial.hash(), TrainConfig::default().hash());
    }
}
