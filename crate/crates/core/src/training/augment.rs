use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassAnnotation, CountingSample, InstanceMask};
use crate::encoders::BoundingBox;
use crate::error::Result;

/// Flip, rescale and crop settings. Sizes are shortest-side lengths in
/// pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Probability of cropping before the rescale.
    pub crop_prob: f64,
    pub crop_range: (usize, usize),
    /// Candidate shortest sides for the rescale; empty keeps the size.
    pub sides: Vec<usize>,
}

impl AugmentConfig {
    /// Flip only.
    pub fn flip_only() -> AugmentConfig {
        AugmentConfig {
            flip_prob: 0.5,
            crop_prob: 0.0,
            crop_range: (0, 0),
            sides: Vec::new(),
        }
    }

    /// The recipe used at 800 px (sides 480..=800 in steps of 32, crops of
    /// 384..=600) scaled to an inference side of `side` pixels.
    pub fn scaled(side: usize) -> AugmentConfig {
        let f = side as f64 / 800.0;
        let scale = |v: usize| ((v as f64 * f).round() as usize).max(crate::encoders::MIN_SIDE);
        let mut sides: Vec<usize> = (480..=800).step_by(32).map(scale).collect();
        sides.dedup();
        AugmentConfig {
            flip_prob: 0.5,
            crop_prob: 0.5,
            crop_range: (scale(384), scale(600)),
            sides,
        }
    }
}

const CROP_TRIES: usize = 10;

fn flip_box(b: &BoundingBox, w: f64) -> BoundingBox {
    BoundingBox::new(w - b.x1, b.y0, w - b.x0, b.y1)
}

/// Mirrors the image and every annotation about the vertical center line.
/// A point at continuous coordinate `x` moves to `W − x`.
pub fn flip(sample: &CountingSample) -> CountingSample {
    let w = sample.image.width() as f64;
    let fx = |(x, y): (f64, f64)| (w - x, y);
    let classes = sample
        .classes
        .iter()
        .map(|c| ClassAnnotation {
            name: c.name.clone(),
            points: c.points.iter().copied().map(fx).collect(),
            exemplars: c.exemplars.iter().map(|b| flip_box(b, w)).collect(),
            masks: c
                .masks
                .iter()
                .map(|m| InstanceMask::from_fn(m.width(), m.height(), |x, y| m.get(m.width() - 1 - x, y)))
                .collect(),
            parts: c.parts.iter().map(|p| p.iter().copied().map(fx).collect()).collect(),
        })
        .collect();
    CountingSample {
        image: sample.image.flip_horizontal(),
        classes,
        ..sample.clone()
    }
}

/// Crops `[x0, x0+w) x [y0, y0+h)`: keeps points strictly inside, clips
/// exemplar boxes and drops those losing more than half their area.
pub fn crop(sample: &CountingSample, x0: usize, y0: usize, w: usize, h: usize) -> Result<CountingSample> {
    let image = sample.image.crop(x0, y0, x0 + w, y0 + h, [0.0; 3])?;
    let (fx0, fy0, fw, fh) = (x0 as f64, y0 as f64, w as f64, h as f64);
    let inside = |&(x, y): &(f64, f64)| x >= fx0 && x < fx0 + fw && y >= fy0 && y < fy0 + fh;
    let shift = |(x, y): (f64, f64)| (x - fx0, y - fy0);
    let mut classes = Vec::with_capacity(sample.classes.len());
    for c in &sample.classes {
        let keep: Vec<usize> = (0..c.points.len()).filter(|&i| inside(&c.points[i])).collect();
        let mut exemplars = Vec::new();
        let mut masks = Vec::new();
        for (i, b) in c.exemplars.iter().enumerate() {
            let clipped = BoundingBox::new(
                b.x0.max(fx0) - fx0,
                b.y0.max(fy0) - fy0,
                b.x1.min(fx0 + fw) - fx0,
                b.y1.min(fy0 + fh) - fy0,
            );
            let area = |b: &BoundingBox| b.width().max(0.0) * b.height().max(0.0);
            if clipped.width() >= 1.0 && clipped.height() >= 1.0 && area(&clipped) >= 0.5 * area(b) {
                exemplars.push(clipped);
                if let Some(m) = c.masks.get(i) {
                    masks.push(InstanceMask::from_fn(image.width(), image.height(), |x, y| m.get(x + x0, y + y0)));
                }
            }
        }
        if masks.len() != exemplars.len() {
            masks.clear();
        }
        classes.push(ClassAnnotation {
            name: c.name.clone(),
            points: keep.iter().map(|&i| shift(c.points[i])).collect(),
            exemplars,
            masks,
            parts: keep
                .iter()
                .filter_map(|&i| c.parts.get(i))
                .map(|p| p.iter().copied().map(shift).collect())
                .collect(),
        });
    }
    Ok(CountingSample {
        image,
        classes,
        ..sample.clone()
    })
}

/// Rescales so that the shortest side equals `side`.
pub fn resize(sample: &CountingSample, side: usize) -> Result<CountingSample> {
    let (s, image) = sample.image.resize_shortest_side(side)?;
    let (w, h) = (image.width(), image.height());
    let classes = sample
        .classes
        .iter()
        .map(|c| ClassAnnotation {
            name: c.name.clone(),
            points: c
                .points
                .iter()
                .map(|&(x, y)| ((x * s).min(w as f64 - 1e-6), (y * s).min(h as f64 - 1e-6)))
                .collect(),
            exemplars: c
                .exemplars
                .iter()
                .map(|b| {
                    let b = b.scaled(s);
                    BoundingBox::new(b.x0, b.y0, b.x1.min(w as f64), b.y1.min(h as f64))
                })
                .collect(),
            masks: c.masks.iter().map(|m| m.resize(w, h)).collect(),
            parts: c
                .parts
                .iter()
                .map(|p| p.iter().map(|&(x, y)| (x * s, y * s)).collect())
                .collect(),
        })
        .collect();
    Ok(CountingSample {
        image,
        classes,
        ..sample.clone()
    })
}

/// Random flip, then either a rescale or a crop followed by a rescale. A
/// crop that would leave the primary class without points and exemplars is
/// redrawn a bounded number of times and then skipped.
pub fn augment<R: Rng>(sample: &CountingSample, rng: &mut R, cfg: &AugmentConfig) -> Result<CountingSample> {
    let mut out = if rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        flip(sample)
    } else {
        sample.clone()
    };
    if cfg.crop_prob > 0.0 && rng.gen_bool(cfg.crop_prob.clamp(0.0, 1.0)) {
        let (w, h) = (out.image.width(), out.image.height());
        let short = w.min(h);
        let lo = cfg.crop_range.0.min(short).max(crate::encoders::MIN_SIDE.min(short));
        let hi = cfg.crop_range.1.min(short).max(lo);
        for _ in 0..CROP_TRIES {
            let c = rng.gen_range(lo..=hi);
            let (cw, ch) = if w <= h {
                (c, ((c * h) as f64 / w as f64).round() as usize)
            } else {
                (((c * w) as f64 / h as f64).round() as usize, c)
            };
            let (cw, ch) = (cw.min(w), ch.min(h));
            let x0 = rng.gen_range(0..=w - cw);
            let y0 = rng.gen_range(0..=h - ch);
            let cand = crop(&out, x0, y0, cw, ch)?;
            if !cand.primary().points.is_empty() {
                out = cand;
                break;
            }
        }
    }
    if !cfg.sides.is_empty() {
        let side = cfg.sides[rng.gen_range(0..cfg.sides.len())];
        out = resize(&out, side)?;
    }
    Ok(out)
}
