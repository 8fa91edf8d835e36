use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::Raster;
use crate::{Error, Result};

/// GSD of the finest simulated sensor; downscale factors are relative to it.
pub const BASE_GSD: f64 = 1.5;

/// Image degradation applied to a base-resolution footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    /// Base side divided by chip side; `>= 1`.
    pub downscale: f64,
    /// Gaussian prefilter sigma in base pixels.
    pub blur_sigma: f64,
    /// Per-channel multiplicative color shift.
    pub color_gain: [f64; 3],
    /// Per-channel additive color shift.
    pub color_bias: [f64; 3],
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
}

impl Degradation {
    pub fn identity() -> Self {
        Self {
            downscale: 1.0,
            blur_sigma: 0.0,
            color_gain: [1.0; 3],
            color_bias: [0.0; 3],
            noise_sigma: 0.0,
        }
    }
}

/// One simulated sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorProfile {
    pub sensor_id: String,
    /// Meters per pixel.
    pub gsd: f64,
    pub degradation: Degradation,
}

impl SensorProfile {
    pub fn new(sensor_id: impl Into<String>, gsd: f64, degradation: Degradation) -> Result<Self> {
        let p = Self {
            sensor_id: sensor_id.into(),
            gsd,
            degradation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensor_id.is_empty() {
            return Err(Error::Config("sensor profile with empty sensor_id".into()));
        }
        if !(self.gsd > 0.0) {
            return Err(Error::Config(format!(
                "sensor `{}`: gsd must be > 0, got {}",
                self.sensor_id, self.gsd
            )));
        }
        let d = &self.degradation;
        if !(d.downscale >= 1.0) {
            return Err(Error::Config(format!(
                "sensor `{}`: downscale factor must be >= 1, got {}",
                self.sensor_id, d.downscale
            )));
        }
        if d.blur_sigma < 0.0 || d.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "sensor `{}`: blur and noise sigmas must be >= 0",
                self.sensor_id
            )));
        }
        Ok(())
    }

    /// Degradation-free sensor at the base resolution.
    pub fn identity(sensor_id: &str) -> Self {
        Self {
            sensor_id: sensor_id.to_string(),
            gsd: BASE_GSD,
            degradation: Degradation::identity(),
        }
    }

    /// SPOT-6 like: 1.5 m/px, the base resolution.
    pub fn spot6() -> Self {
        Self {
            sensor_id: "s6".into(),
            gsd: 1.5,
            degradation: Degradation {
                noise_sigma: 0.005,
                ..Degradation::identity()
            },
        }
    }

    /// Sentinel-2 like: 10 m/px.
    pub fn sentinel2() -> Self {
        Self {
            sensor_id: "s2".into(),
            gsd: 10.0,
            degradation: Degradation {
                downscale: 10.0 / BASE_GSD,
                blur_sigma: 2.0,
                color_gain: [0.95, 1.0, 1.08],
                color_bias: [0.02, 0.01, -0.01],
                noise_sigma: 0.01,
            },
        }
    }

    /// Landsat-8 like: 30 m/px.
    pub fn landsat8() -> Self {
        Self {
            sensor_id: "ls".into(),
            gsd: 30.0,
            degradation: Degradation {
                downscale: 30.0 / BASE_GSD,
                blur_sigma: 6.0,
                color_gain: [1.05, 0.97, 0.92],
                color_bias: [-0.01, 0.02, 0.03],
                noise_sigma: 0.015,
            },
        }
    }

    /// Looks up a built-in profile: `s6`, `s2`, `ls` or `identity`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "s6" | "spot6" => Ok(Self::spot6()),
            "s2" | "sentinel2" => Ok(Self::sentinel2()),
            "ls" | "landsat8" => Ok(Self::landsat8()),
            "identity" => Ok(Self::identity("identity")),
            other => Err(Error::Config(format!(
                "unknown sensor profile `{other}` (built-ins: s6, s2, ls, identity)"
            ))),
        }
    }

    /// Chip side produced from a base footprint of `base_side` pixels.
    pub fn chip_side(&self, base_side: usize) -> usize {
        ((base_side as f64 / self.degradation.downscale).round() as usize).max(1)
    }

    /// Runs the degradation chain: prefilter blur, downscale, per-channel
    /// affine color shift, additive noise, clamp to `[0, 1]`.
    pub fn degrade(&self, base: &Raster, seed: u64) -> Result<Raster> {
        let side = base.side().ok_or_else(|| {
            Error::Shape(format!(
                "base footprint must be square, got {}x{}",
                base.height(),
                base.width()
            ))
        })?;
        let d = &self.degradation;
        let chip = self.chip_side(side);
        let mut out = base.gaussian_blur(d.blur_sigma).resize(chip, chip);
        let shifted = d.color_gain != [1.0; 3] || d.color_bias != [0.0; 3];
        if shifted {
            for px in out.data_mut().chunks_exact_mut(3) {
                for c in 0..3 {
                    px[c] = (px[c] as f64 * d.color_gain[c] + d.color_bias[c]) as f32;
                }
            }
        }
        if d.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, d.noise_sigma).expect("finite sigma");
            for v in out.data_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        if shifted || d.noise_sigma > 0.0 {
            out.clamp_unit();
        }
        Ok(out)
    }
}
