use std::path::Path;

use crate::error::{Error, Result};

/// Per-channel normalization constants (ImageNet statistics).
const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 32;

/// An `H x W x 3` image with values in `[0, 1]` (or normalized).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    normalized: bool,
}

impl ImageInput {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image {width}x{height} is smaller than the {MIN_SIDE}px minimum side"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::shape("ImageInput::new", &[height, width, 3], &[pixels.len()]));
        }
        Ok(ImageInput {
            height,
            width,
            pixels,
            normalized: false,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        ImageInput::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Channel-wise `(x - mean) / std`. Idempotent.
    pub fn normalize(&self) -> ImageInput {
        if self.normalized {
            return self.clone();
        }
        let pixels = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - MEAN[i % 3]) / STD[i % 3])
            .collect();
        ImageInput {
            pixels,
            normalized: true,
            ..*self
        }
    }

    /// Bilinear resize (half-pixel centers).
    pub fn resize(&self, height: usize, width: usize) -> Result<ImageInput> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| self.pixels[(yy * self.width + xx) * 3 + c];
                    let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                    let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                    pixels.push(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        let mut out = ImageInput::new(height, width, pixels)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Scale factor and resized image such that the shortest side equals
    /// `side`, preserving aspect ratio.
    pub fn resize_shortest_side(&self, side: usize) -> Result<(f64, ImageInput)> {
        let short = self.height.min(self.width) as f64;
        let scale = side as f64 / short;
        let h = ((self.height as f64 * scale).round() as usize).max(side);
        let w = ((self.width as f64 * scale).round() as usize).max(side);
        Ok((scale, self.resize(h, w)?))
    }

    /// Crops `[x0, x1) x [y0, y1)` in whole pixels; the region is clipped to
    /// the image and padded with `fill` up to the minimum side.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize, fill: [f64; 3]) -> Result<ImageInput> {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid("empty crop"));
        }
        let w = (x1 - x0).max(MIN_SIDE);
        let h = (y1 - y0).max(MIN_SIDE);
        let mut out = ImageInput::filled(h, w, fill)?;
        for y in y0..y1 {
            for x in x0..x1 {
                out.set_pixel(y - y0, x - x0, self.pixel(y, x));
            }
        }
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Pads on the right and bottom with `fill` up to at least `height x width`.
    pub fn pad_to(&self, height: usize, width: usize, fill: [f64; 3]) -> Result<ImageInput> {
        if height <= self.height && width <= self.width {
            return Ok(self.clone());
        }
        let mut out = ImageInput::filled(height.max(self.height), width.max(self.width), fill)?;
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, x));
            }
        }
        out.normalized = self.normalized;
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> ImageInput {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    /// Decodes a PNG or PPM/PGM file.
    pub fn load(path: &Path) -> Result<ImageInput> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn from_encoded(bytes: &[u8]) -> Result<ImageInput> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    fn from_rgb8(img: &image::RgbImage) -> Result<ImageInput> {
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        ImageInput::new(h as usize, w as usize, pixels)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let src = if self.normalized { self.denormalize() } else { self.clone() };
        let raw = src
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    fn denormalize(&self) -> ImageInput {
        let pixels = self
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| v * STD[i % 3] + MEAN[i % 3])
            .collect();
        ImageInput {
            pixels,
            normalized: false,
            ..*self
        }
    }
}
