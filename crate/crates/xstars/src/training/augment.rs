//! DINO multi-crop augmentation: two global views and several local views of
//! one image, each with flips, colour jitter, grayscale, blur and (second
//! global view only) solarization.

use rand::Rng;

use crate::raster::Raster;
use crate::{Error, Result};

const MAX_CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiCropConfig {
    pub global_side: usize,
    pub local_side: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub local_crops: usize,
    pub aspect_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    /// Blur probability for the first global, second global and local views.
    pub blur_p: [f64; 3],
    /// Blur sigma range in pixels of a 224-pixel view; scaled to the view side.
    pub blur_sigma: (f64, f64),
    pub solarize_p: f64,
}

impl MultiCropConfig {
    pub fn new(global_side: usize, local_side: usize, local_crops: usize) -> Self {
        Self {
            global_side,
            local_side,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.4),
            local_crops,
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: [1.0, 0.1, 0.5],
            blur_sigma: (0.1, 2.0),
            solarize_p: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiCropViews {
    pub globals: Vec<Raster>,
    pub locals: Vec<Raster>,
}

/// Region `(top, left, height, width)` of a random resized crop. Falls back to
/// the largest centred crop within the aspect range after bounded retries.
pub fn random_resized_crop_region<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut R,
) -> (f64, f64, f64, f64) {
    let area = (height * width) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..MAX_CROP_ATTEMPTS {
        let target = area * rng.random_range(scale.0..=scale.1);
        let r = rng.random_range(lr0..=lr1).exp();
        let w = (target * r).sqrt();
        let h = (target / r).sqrt();
        if w >= 1.0 && h >= 1.0 && w <= width as f64 && h <= height as f64 {
            let top = rng.random_range(0.0..=(height as f64 - h));
            let left = rng.random_range(0.0..=(width as f64 - w));
            return (top, left, h, w);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < ratio.0 {
        (width as f64 / ratio.0, width as f64)
    } else if in_ratio > ratio.1 {
        (height as f64, height as f64 * ratio.1)
    } else {
        (height as f64, width as f64)
    };
    ((height as f64 - h) / 2.0, (width as f64 - w) / 2.0, h, w)
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn map_pixels(img: &mut Raster, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
    for px in img.data_mut().chunks_exact_mut(3) {
        let out = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&out);
    }
}

fn rotate_hue(p: [f32; 3], shift: f32) -> [f32; 3] {
    let (r, g, b) = (p[0], p[1], p[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return p;
    }
    let mut h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    h = (h + shift).rem_euclid(1.0);
    let s = delta / max;
    let v = max;
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (pp, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, pp],
        1 => [q, v, pp],
        2 => [pp, v, t],
        3 => [pp, q, v],
        4 => [t, pp, v],
        _ => [v, pp, q],
    }
}

fn color_jitter<R: Rng + ?Sized>(img: &mut Raster, cfg: &MultiCropConfig, rng: &mut R) {
    let b = rng.random_range(1.0 - cfg.brightness..=1.0 + cfg.brightness) as f32;
    let c = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) as f32;
    let s = rng.random_range(1.0 - cfg.saturation..=1.0 + cfg.saturation) as f32;
    let h = rng.random_range(-cfg.hue..=cfg.hue) as f32;
    map_pixels(img, |p| p.map(|v| (v * b).clamp(0.0, 1.0)));
    let n = (img.height() * img.width()) as f32;
    let mean = img.data().chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>() / n;
    map_pixels(img, |p| p.map(|v| (mean + c * (v - mean)).clamp(0.0, 1.0)));
    map_pixels(img, |p| {
        let g = luma(p);
        p.map(|v| (g + s * (v - g)).clamp(0.0, 1.0))
    });
    if h != 0.0 {
        map_pixels(img, |p| rotate_hue(p, h));
    }
}

/// One augmented view of `image` at `side x side`.
pub fn augment_view<R: Rng + ?Sized>(
    image: &Raster,
    side: usize,
    scale: (f64, f64),
    blur_p: f64,
    solarize_p: f64,
    cfg: &MultiCropConfig,
    rng: &mut R,
) -> Raster {
    let (top, left, h, w) = random_resized_crop_region(image.height(), image.width(), scale, cfg.aspect_ratio, rng);
    let mut view = image.resize_region(top, left, h, w, side, side);
    if rng.random_bool(cfg.flip_p) {
        view = view.flip_horizontal();
    }
    if rng.random_bool(cfg.jitter_p) {
        color_jitter(&mut view, cfg, rng);
    }
    if rng.random_bool(cfg.grayscale_p) {
        map_pixels(&mut view, |p| [luma(p); 3]);
    }
    if rng.random_bool(blur_p) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1) * side as f64 / 224.0;
        view = view.gaussian_blur(sigma);
    }
    if rng.random_bool(solarize_p) {
        map_pixels(&mut view, |p| p.map(|v| if v >= 0.5 { 1.0 - v } else { v }));
    }
    view.clamp_unit();
    view
}

/// Two global and `cfg.local_crops` local views. Deterministic given the RNG state.
pub fn multicrop_augment<R: Rng + ?Sized>(image: &Raster, cfg: &MultiCropConfig, rng: &mut R) -> Result<MultiCropViews> {
    if image.height() == 0 || image.width() == 0 {
        return Err(Error::Shape("cannot augment an empty image".into()));
    }
    if cfg.global_side == 0 || cfg.local_side == 0 {
        return Err(Error::Parameter("crop sides must be > 0".into()));
    }
    let globals = vec![
        augment_view(image, cfg.global_side, cfg.global_scale, cfg.blur_p[0], 0.0, cfg, rng),
        augment_view(image, cfg.global_side, cfg.global_scale, cfg.blur_p[1], cfg.solarize_p, cfg, rng),
    ];
    let locals = (0..cfg.local_crops)
        .map(|_| augment_view(image, cfg.local_side, cfg.local_scale, cfg.blur_p[2], 0.0, cfg, rng))
        .collect();
    Ok(MultiCropViews { globals, locals })
}
