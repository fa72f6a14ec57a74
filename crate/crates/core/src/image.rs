//! RGB float images and the pixel/normalized coordinate conventions.
//!
//! Normalized coordinates place `(-1, -1)` at the centre of the top-left
//! pixel and `(1, 1)` at the centre of the bottom-right pixel. Pixel
//! coordinates are continuous, with pixel `i` centred at `i`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel index along an axis of `size` samples to normalized `[-1, 1]`.
pub fn to_normalized(pixel: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        2.0 * pixel / (size - 1) as f64 - 1.0
    }
}

/// Normalized coordinate to continuous pixel position.
pub fn to_pixel(norm: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        (norm + 1.0) * 0.5 * (size - 1) as f64
    }
}

/// 2-D point `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn in_unit_box(self) -> bool {
        (-1.0..=1.0).contains(&self.x) && (-1.0..=1.0).contains(&self.y)
    }
}

/// Normalized point → pixel point in a `height x width` frame.
pub fn point_to_pixel(p: Point, height: usize, width: usize) -> Point {
    Point::new(to_pixel(p.x, width), to_pixel(p.y, height))
}

pub fn point_to_normalized(p: Point, height: usize, width: usize) -> Point {
    Point::new(to_normalized(p.x, width), to_normalized(p.y, height))
}

/// Height x width x 3 image, channel-last, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel position; `None` outside the
    /// pixel-centre hull.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        let eps = 1e-9;
        if !(x >= -eps && y >= -eps && x <= (self.width - 1) as f64 + eps && y <= (self.height - 1) as f64 + eps) {
            return None;
        }
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let (a, b, c, d) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bot = c[k] + (d[k] - c[k]) * fx;
            out[k] = top + (bot - top) * fy;
        }
        Some(out)
    }

    /// Bilinear resize with half-pixel alignment: destination pixel `j` reads
    /// source position `(j + 0.5) * src / dst - 0.5`.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Image::new(height, width);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                out.set_pixel(y, x, self.sample(fx, fy).unwrap_or([0.0; 3]));
            }
        }
        out
    }

    /// Crop a window whose top-left pixel is `(top, left)`; the window may
    /// extend past the image, in which case it is padded with `fill`.
    pub fn crop(&self, top: i64, left: i64, height: usize, width: usize, fill: [f32; 3]) -> Image {
        let mut out = Image::filled(height, width, fill);
        for y in 0..height {
            let sy = top + y as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            for x in 0..width {
                let sx = left + x as i64;
                if sx < 0 || sx >= self.width as i64 {
                    continue;
                }
                out.set_pixel(y, x, self.pixel(sy as usize, sx as usize));
            }
        }
        out
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Image {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image { height: h as usize, width: w as usize, data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let buf = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size matches dims")
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?;
        Ok(Image::from_dynamic(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Channel-first copy, as consumed by the networks.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                out[c * hw + i] = self.data[i * 3 + c];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}
