use std::path::Path;

use crate::encoders::BoundingBox;
use crate::error::{Error, Result};

/// Binary per-instance mask over the image grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<InstanceMask> {
        if bits.len() != width * height {
            return Err(Error::shape("InstanceMask::new", &[height, width], &[bits.len()]));
        }
        Ok(InstanceMask { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> InstanceMask {
        let bits = (0..width * height).map(|i| f(i % width, i / width)).collect();
        InstanceMask { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.bits[y * self.width + x]
    }

    /// Whether the pixel holding the continuous point `(x, y)` is set.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && self.get(x as usize, y as usize)
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight box around the set pixels, `None` when empty.
    pub fn bbox(&self) -> Option<BoundingBox> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.bits[y * self.width + x] {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b.map(|(x0, y0, x1, y1)| BoundingBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
    }

    /// Mask resampled to a new grid by nearest pixel center.
    pub fn resize(&self, width: usize, height: usize) -> InstanceMask {
        let (sx, sy) = (self.width as f64 / width as f64, self.height as f64 / height as f64);
        InstanceMask::from_fn(width, height, |x, y| {
            self.get(((x as f64 + 0.5) * sx) as usize, ((y as f64 + 0.5) * sy) as usize)
        })
    }

    /// Run-length text: `rle:W,H:r0,r1,...`, runs alternate starting with
    /// unset pixels, row-major.
    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        let runs: Vec<String> = runs.iter().map(usize::to_string).collect();
        format!("rle:{},{}:{}", self.width, self.height, runs.join(","))
    }

    pub fn from_rle(text: &str) -> Result<InstanceMask> {
        let bad = |m: &str| Error::invalid(format!("malformed mask RLE: {m}"));
        let body = text.trim().strip_prefix("rle:").ok_or_else(|| bad("missing rle: prefix"))?;
        let (dims, runs) = body.split_once(':').ok_or_else(|| bad("missing runs"))?;
        let (w, h) = dims.split_once(',').ok_or_else(|| bad("missing height"))?;
        let w: usize = w.trim().parse().map_err(|_| bad("width"))?;
        let h: usize = h.trim().parse().map_err(|_| bad("height"))?;
        let mut bits = Vec::with_capacity(w * h);
        let mut value = false;
        for r in runs.split(',').filter(|r| !r.trim().is_empty()) {
            let n: usize = r.trim().parse().map_err(|_| bad("run length"))?;
            if bits.len() + n > w * h {
                return Err(bad("runs exceed the mask size"));
            }
            bits.extend(std::iter::repeat(value).take(n));
            value = !value;
        }
        if bits.len() != w * h {
            return Err(bad("runs do not cover the mask"));
        }
        InstanceMask::new(w, h, bits)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.bits.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Any pixel with luminance above one half counts as set.
    pub fn load_png(path: &Path) -> Result<InstanceMask> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        InstanceMask::new(w as usize, h as usize, img.as_raw().iter().map(|&v| v > 127).collect())
    }

    /// Reads either an inline `rle:` string or a PNG path relative to `base`.
    pub fn resolve(reference: &str, base: &Path) -> Result<InstanceMask> {
        if reference.starts_with("rle:") {
            InstanceMask::from_rle(reference)
        } else {
            InstanceMask::load_png(&base.join(reference))
        }
    }
}
