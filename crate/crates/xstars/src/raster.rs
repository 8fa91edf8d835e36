//! In-memory RGB rasters with values in `[0, 1]` and the pixel operations the
//! data pipeline needs (resize, crop, flip, blur, PNG IO).

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::{Error, Result};

/// Row-major `height x width x 3` image with channel-interleaved `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "raster {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Side length of a square raster.
    pub fn side(&self) -> Option<usize> {
        (self.height == self.width).then_some(self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Raster> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({top}, {left}) outside {}x{} raster",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Raster {
            height,
            width,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Raster {
        Raster::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    /// Bilinear resampling with half-pixel centers. Same-size requests return
    /// an exact copy.
    pub fn resize(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        self.resize_region(0.0, 0.0, self.height as f64, self.width as f64, height, width)
    }

    /// Bilinearly samples the axis-aligned region `[top, top+h) x [left, left+w)`
    /// (in source pixel units) onto an `out_h x out_w` grid.
    pub fn resize_region(
        &self,
        top: f64,
        left: f64,
        h: f64,
        w: f64,
        out_h: usize,
        out_w: usize,
    ) -> Raster {
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        let xs: Vec<(usize, usize, f32)> = (0..out_w)
            .map(|x| {
                let fx = (left + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                (x0, x1, (fx - x0 as f64) as f32)
            })
            .collect();
        let mut data = Vec::with_capacity(out_h * out_w * 3);
        for y in 0..out_h {
            let fy = (top + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for &(x0, x1, wx) in &xs {
                for c in 0..3 {
                    let a = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
                    let b = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
                    data.push(a * (1.0 - wy) + b * wy);
                }
            }
        }
        Raster {
            height: out_h,
            width: out_w,
            data,
        }
    }

    /// Separable Gaussian blur with reflected borders. `sigma <= 0` is a no-op.
    pub fn gaussian_blur(&self, sigma: f64) -> Raster {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let sum: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);

        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let mut m = i.rem_euclid(period);
            if m >= n {
                m = period - m;
            }
            m as usize
        };

        let (h, w) = (self.height, self.width);
        let mut tmp = vec![0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - radius, w);
                    let i = (y * w + xx) * 3;
                    for c in 0..3 {
                        acc[c] += kv * self.data[i + c];
                    }
                }
                tmp[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
            }
        }
        let mut out = vec![0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - radius, h);
                    let i = (yy * w + x) * 3;
                    for c in 0..3 {
                        acc[c] += kv * tmp[i + c];
                    }
                }
                out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
            }
        }
        Raster {
            height: h,
            width: w,
            data: out,
        }
    }

    /// Channel means over the whole raster.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.map(|v| v / n)
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Raster {
        Raster {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Reads any image format the `image` crate decodes, converted to RGB.
    pub fn load(path: &Path) -> Result<Raster> {
        let img = image::open(path)?.to_rgb8();
        Ok(Raster::from_rgb8(&img))
    }
}
