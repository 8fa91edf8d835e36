//! Procedural land-cover scenes used as base imagery when no real photos are
//! at hand. Each class has a distinct spatial structure with randomized
//! colors, scales and orientations so that no single statistic separates the
//! classes perfectly.

use std::f32::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SceneClass {
    Forest,
    Water,
    Urban,
    Cropland,
    Desert,
    Parcels,
}

impl SceneClass {
    pub const ALL: [SceneClass; 6] = [
        SceneClass::Forest,
        SceneClass::Water,
        SceneClass::Urban,
        SceneClass::Cropland,
        SceneClass::Desert,
        SceneClass::Parcels,
    ];

    pub fn index(self) -> u32 {
        Self::ALL.iter().position(|c| *c == self).unwrap() as u32
    }

    pub fn from_index(i: u32) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SceneClass::Forest => "forest",
            SceneClass::Water => "water",
            SceneClass::Urban => "urban",
            SceneClass::Cropland => "cropland",
            SceneClass::Desert => "desert",
            SceneClass::Parcels => "parcels",
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, rgb: [f32; 3], amount: f32) -> [f32; 3] {
    rgb.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Smooth value noise in `[0, 1]` on a lattice of `cells` per side.
fn value_noise(rng: &mut ChaCha8Rng, side: usize, cells: usize) -> Vec<f32> {
    let n = cells + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random::<f32>()).collect();
    let scale = cells as f32 / side as f32;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let fy = y as f32 * scale;
            let fx = x as f32 * scale;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f32, fx - ix as f32);
            let s = |v: f32| v * v * (3.0 - 2.0 * v);
            let (ty, tx) = (s(ty), s(tx));
            let l = |yy: usize, xx: usize| lattice[yy * n + xx];
            let a = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
            let b = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
            out.push(a * (1.0 - ty) + b * ty);
        }
    }
    out
}

fn forest(rng: &mut ChaCha8Rng, side: usize) -> Raster {
    let ground = jitter(rng, [0.12, 0.28, 0.10], 0.06);
    let mut img = Raster::filled(side, side, ground);
    let crowns = (side * side) / rng.random_range(60..140);
    let r_max = (side as f32 * rng.random_range(0.03..0.07)).max(1.5);
    for _ in 0..crowns {
        let cy = rng.random_range(0.0..side as f32);
        let cx = rng.random_range(0.0..side as f32);
        let r = rng.random_range(0.5 * r_max..r_max);
        let tone = jitter(rng, [0.10, 0.40, 0.12], 0.08);
        let (y0, y1) = ((cy - r).max(0.0) as usize, ((cy + r) as usize + 1).min(side));
        let (x0, x1) = ((cx - r).max(0.0) as usize, ((cx + r) as usize + 1).min(side));
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt() / r;
                if d <= 1.0 {
                    let shade = 1.0 - 0.35 * d;
                    let i = (y * side + x) * 3;
                    let px = &mut img.data_mut()[i..i + 3];
                    for c in 0..3 {
                        px[c] = tone[c] * shade;
                    }
                }
            }
        }
    }
    img
}

fn water(rng: &mut ChaCha8Rng, side: usize) -> Raster {
    let deep = jitter(rng, [0.05, 0.15, 0.35], 0.06);
    let shallow = jitter(rng, [0.15, 0.35, 0.45], 0.06);
    let theta = rng.random_range(0.0..PI);
    let freq = rng.random_range(1.0..4.0) * 2.0 * PI / side as f32;
    let noise = value_noise(rng, side, 3);
    Raster::from_fn(side, side, |y, x| {
        let u = x as f32 * theta.cos() + y as f32 * theta.sin();
        let ripple = 0.5 + 0.08 * (u * freq * 6.0).sin();
        let t = (0.6 * noise[y * side + x] + 0.4 * ripple).clamp(0.0, 1.0);
        mix(deep, shallow, t)
    })
}

fn urban(rng: &mut ChaCha8Rng, side: usize) -> Raster {
    let street = jitter(rng, [0.35, 0.35, 0.37], 0.08);
    let block = rng.random_range((side / 10).max(3)..(side / 5).max(4));
    let gap = (block / 4).max(1);
    let roofs = [[0.55, 0.30, 0.25], [0.60, 0.60, 0.62], [0.45, 0.45, 0.50], [0.70, 0.65, 0.55]];
    let offset = (rng.random_range(0..block), rng.random_range(0..block));
    let n = side / block + 2;
    let colors: Vec<[f32; 3]> = (0..n * n)
        .map(|_| {
            let base = roofs[rng.random_range(0..roofs.len())];
            jitter(rng, base, 0.08)
        })
        .collect();
    Raster::from_fn(side, side, |y, x| {
        let (yy, xx) = (y + offset.0, x + offset.1);
        let (by, bx) = (yy / block, xx / block);
        let (iy, ix) = (yy % block, xx % block);
        if iy < gap || ix < gap {
            street
        } else {
            colors[(by % n) * n + (bx % n)]
        }
    })
}

fn cropland(rng: &mut ChaCha8Rng, side: usize) -> Raster {
    let theta = rng.random_range(0.0..PI);
    let palette = [
        [0.75, 0.65, 0.30],
        [0.35, 0.55, 0.20],
        [0.50, 0.38, 0.22],
        [0.60, 0.70, 0.35],
    ];
    let widths: Vec<f32> = (0..64)
        .map(|_| side as f32 * rng.random_range(0.04..0.12))
        .collect();
    let colors: Vec<[f32; 3]> = (0..64)
        .map(|_| {
            let base = palette[rng.random_range(0..palette.len())];
            jitter(rng, base, 0.07)
        })
        .collect();
    let furrow = rng.random_range(2.0..5.0);
    Raster::from_fn(side, side, |y, x| {
        let u = x as f32 * theta.cos() + y as f32 * theta.sin() + side as f32;
        let mut acc = 0.0;
        let mut k = 0;
        while acc + widths[k % 64] < u {
            acc += widths[k % 64];
            k += 1;
        }
        let c = colors[k % 64];
        let v = x as f32 * -theta.sin() + y as f32 * theta.cos();
        let f = 0.92 + 0.08 * (v * 2.0 * PI / furrow).sin();
        c.map(|ch| ch * f)
    })
}

fn desert(rng: &mut ChaCha8Rng, side: usize) -> Raster {
    let sand = jitter(rng, [0.82, 0.70, 0.50], 0.07);
    let shadow = jitter(rng, [0.62, 0.50, 0.35], 0.07);
    let theta = rng.random_range(0.0..PI);
    let wavelength = side as f32 * rng.random_range(0.08..0.2);
    let noise = value_noise(rng, side, 4);
    Raster::from_fn(side, side, |y, x| {
        let u = x as f32 * theta.cos() + y as f32 * theta.sin();
        let warp = 6.0 * noise[y * side + x];
        let dune = ((u + warp * wavelength / 4.0) * 2.0 * PI / wavelength).sin();
        mix(sand, shadow, 0.5 + 0.5 * dune.powi(3))
    })
}

fn parcels(rng: &mut ChaCha8Rng, side: usize) -> Raster {
    let palette = [
        [0.30, 0.50, 0.18],
        [0.55, 0.45, 0.25],
        [0.70, 0.68, 0.40],
        [0.20, 0.35, 0.15],
        [0.45, 0.60, 0.30],
    ];
    let cuts = rng.random_range(3..7);
    let mut ys: Vec<usize> = (0..cuts).map(|_| rng.random_range(0..side)).collect();
    let mut xs: Vec<usize> = (0..cuts).map(|_| rng.random_range(0..side)).collect();
    ys.sort_unstable();
    xs.sort_unstable();
    let cells = (cuts + 1) * (cuts + 1);
    let colors: Vec<[f32; 3]> = (0..cells)
        .map(|_| {
            let base = palette[rng.random_range(0..palette.len())];
            jitter(rng, base, 0.06)
        })
        .collect();
    let hedge = jitter(rng, [0.15, 0.25, 0.10], 0.04);
    Raster::from_fn(side, side, |y, x| {
        if ys.iter().any(|&c| y.abs_diff(c) < 1) || xs.iter().any(|&c| x.abs_diff(c) < 1) {
            return hedge;
        }
        let cy = ys.iter().filter(|&&c| c < y).count();
        let cx = xs.iter().filter(|&&c| c < x).count();
        colors[cy * (cuts + 1) + cx]
    })
}

/// Renders one `side x side` scene of the given class.
pub fn render_scene(class: SceneClass, side: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut img = match class {
        SceneClass::Forest => forest(rng, side),
        SceneClass::Water => water(rng, side),
        SceneClass::Urban => urban(rng, side),
        SceneClass::Cropland => cropland(rng, side),
        SceneClass::Desert => desert(rng, side),
        SceneClass::Parcels => parcels(rng, side),
    };
    // global illumination change and fine grain
    let gain = rng.random_range(0.8..1.2);
    for v in img.data_mut() {
        *v = *v * gain + rng.random_range(-0.02..0.02);
    }
    img.clamp_unit();
    img
}

/// Scene made of a `cells x cells` grid of class patches, plus the per-cell
/// class map (row-major).
pub fn render_segmentation_scene(
    classes: &[SceneClass],
    cells: usize,
    side: usize,
    rng: &mut ChaCha8Rng,
) -> (Raster, Vec<u32>) {
    let labels: Vec<u32> = (0..cells * cells)
        .map(|_| classes[rng.random_range(0..classes.len())].index())
        .collect();
    let layers: Vec<Raster> = classes.iter().map(|c| render_scene(*c, side, rng)).collect();
    let cell = side as f32 / cells as f32;
    let img = Raster::from_fn(side, side, |y, x| {
        let cy = ((y as f32 / cell) as usize).min(cells - 1);
        let cx = ((x as f32 / cell) as usize).min(cells - 1);
        let class = labels[cy * cells + cx];
        let li = classes.iter().position(|c| c.index() == class).unwrap();
        layers[li].pixel(y, x)
    });
    (img, labels)
}
