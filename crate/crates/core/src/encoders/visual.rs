//! Multi-scale image tokens and exemplar tokens pooled from them.

use serde::{Deserialize, Serialize};

use crate::encoders::ImageInput;
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore, Session};
use crate::tensor::{Tensor, Var, PAD};

/// Axis-aligned box in pixel coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn scaled(&self, s: f64) -> Self {
        BoundingBox::new(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BoundingBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    /// Checks `0 <= x0 < x1 <= width` and `0 <= y0 < y1 <= height`.
    pub fn validate(&self, width: f64, height: f64) -> Result<()> {
        let ok = self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x0 < self.x1
            && self.y0 < self.y1
            && self.x1 <= width
            && self.y1 <= height;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("box {self:?} is not inside a {width}x{height} image")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Stride of the finest level; the others are `2s` and `4s`.
    pub stride: usize,
    /// Backbone widths of the three stages before projection.
    pub channels: [usize; 3],
    pub d_model: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stride: 4,
            channels: [16, 32, 64],
            d_model: 64,
        }
    }
}

/// One level of the pyramid: a `height x width` grid of `d_model` tokens.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLevel {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub levels: Vec<FeatureLevel>,
    pub d_model: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl MultiScaleFeatures {
    pub fn num_tokens(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }

    /// Cell-center of every token (level-major, row-major), normalized to the
    /// image and clamped to `[0, 1]`.
    pub fn token_centers(&self) -> Vec<(f64, f64)> {
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        self.levels
            .iter()
            .flat_map(|l| {
                (0..l.height * l.width).map(move |c| {
                    let (i, j) = (c / l.width, c % l.width);
                    let x = ((j as f64 + 0.5) * l.stride as f64 / w).clamp(0.0, 1.0);
                    let y = ((i as f64 + 0.5) * l.stride as f64 / h).clamp(0.0, 1.0);
                    (x, y)
                })
            })
            .collect()
    }

    /// Level index of every token.
    pub fn token_levels(&self) -> Vec<usize> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat(i).take(l.height * l.width))
            .collect()
    }
}

/// Conv-patch pyramid. A stem patchifies at stride 2 and alternates 3x3
/// convs with 2x2 patch merges until stride `s` (a stride that is not a
/// power of two is patchified directly), then two more merge + conv stages
/// give strides `2s` and `4s`; every level is projected to `d_model` by a
/// 1x1 projection.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    config: EncoderConfig,
    stem_stride: usize,
    stem: Linear,
    /// One conv per stage, stem stages first.
    convs: Vec<Linear>,
    /// One merge per stage after the first.
    merges: Vec<Linear>,
    projections: [Linear; 3],
}

/// Channel widths of the stages at strides `stem_stride, 2·stem_stride, ..,
/// s`: halving with every halving of the stride, at least 8.
fn stem_channels(stride: usize, stem_stride: usize, c0: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut t = stem_stride;
    while t < stride {
        out.push((c0 * t / stride).max(8).min(c0));
        t *= 2;
    }
    out.push(c0);
    out
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: EncoderConfig) -> Self {
        let st = cfg.stride;
        let stem_stride = if st >= 4 && st.is_power_of_two() { 2 } else { st };
        let mut widths = stem_channels(st, stem_stride, cfg.channels[0]);
        widths.extend_from_slice(&cfg.channels[1..]);
        let relu_gain = 2f64.sqrt();
        let stem = Linear::with_gain(store, init, "image.stem", 3 * stem_stride * stem_stride, widths[0], relu_gain);
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::with_gain(store, init, &format!("image.conv{i}"), 9 * c, c, relu_gain))
            .collect();
        let merges = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::with_gain(store, init, &format!("image.merge{}", i + 1), 4 * w[0], w[1], relu_gain))
            .collect();
        let [c0, c1, c2] = cfg.channels;
        ImageEncoder {
            config: cfg,
            stem_stride,
            stem,
            convs,
            merges,
            projections: [
                Linear::new(store, init, "image.proj0", c0, cfg.d_model),
                Linear::new(store, init, "image.proj1", c1, cfg.d_model),
                Linear::new(store, init, "image.proj2", c2, cfg.d_model),
            ],
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encode(&self, s: &mut Session, img: &ImageInput) -> Result<MultiScaleFeatures> {
        if !img.is_normalized() {
            return Err(Error::invalid("encode_image expects a normalized image"));
        }
        let st = self.config.stride;
        if img.height() < 4 * st || img.width() < 4 * st {
            return Err(Error::invalid(format!(
                "image {}x{} is smaller than the coarsest stride {}",
                img.width(),
                img.height(),
                4 * st
            )));
        }
        let ss = self.stem_stride;
        let (mut h, mut w) = (img.height().div_ceil(ss), img.width().div_ceil(ss));
        let patches = s.constant(patchify(img, ss));
        let mut x = self.stem.forward(s, patches)?;
        x = s.tape.relu(x)?;
        x = self.conv3x3(s, 0, x, h, w)?;

        // stages at strides below `st` are internal; the last three are levels
        let levels_from = self.convs.len() - 3;
        let mut stage = Vec::with_capacity(3);
        if levels_from == 0 {
            stage.push((x, h, w));
        }
        for m in 0..self.merges.len() {
            let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
            let merged = s.tape.regroup_rows(x, &merge_indices(h, w), 4)?;
            x = self.merges[m].forward(s, merged)?;
            x = s.tape.relu(x)?;
            x = self.conv3x3(s, m + 1, x, nh, nw)?;
            (h, w) = (nh, nw);
            if m + 1 >= levels_from {
                stage.push((x, h, w));
            }
        }

        let mut levels = Vec::with_capacity(3);
        for (i, &(x, h, w)) in stage.iter().enumerate() {
            let features = self.projections[i].forward(s, x)?;
            levels.push(FeatureLevel {
                stride: st << i,
                height: h,
                width: w,
                features,
            });
        }
        Ok(MultiScaleFeatures {
            levels,
            d_model: self.config.d_model,
            image_height: img.height(),
            image_width: img.width(),
        })
    }

    fn conv3x3(&self, s: &mut Session, i: usize, x: Var, h: usize, w: usize) -> Result<Var> {
        let cols = s.tape.regroup_rows(x, &neighbourhood_indices(h, w), 9)?;
        let y = self.convs[i].forward(s, cols)?;
        s.tape.relu(y)
    }
}

/// `[cells x 3s²]` patch matrix, channels innermost, zero beyond the image.
fn patchify(img: &ImageInput, st: usize) -> Tensor {
    let (h, w) = (img.height().div_ceil(st), img.width().div_ceil(st));
    let width = 3 * st * st;
    let mut data = vec![0.0; h * w * width];
    for i in 0..h {
        for j in 0..w {
            let row = &mut data[(i * w + j) * width..(i * w + j + 1) * width];
            for dy in 0..st {
                for dx in 0..st {
                    let (y, x) = (i * st + dy, j * st + dx);
                    if y < img.height() && x < img.width() {
                        let o = (dy * st + dx) * 3;
                        row[o..o + 3].copy_from_slice(&img.pixel(y, x));
                    }
                }
            }
        }
    }
    Tensor::new([h * w, width], data).expect("patch matrix")
}

fn neighbourhood_indices(h: usize, w: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * 9);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (y, x) = (i + di, j + dj);
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    idx.push(if inside { y as usize * w + x as usize } else { PAD });
                }
            }
        }
    }
    idx
}

fn merge_indices(h: usize, w: usize) -> Vec<usize> {
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(nh * nw * 4);
    for i in 0..nh {
        for j in 0..nw {
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (y, x) = (2 * i + di, 2 * j + dj);
                idx.push(if y < h && x < w { y * w + x } else { PAD });
            }
        }
    }
    idx
}

/// Bilinear weights of a continuous sample at `(y, x)` in cell-index
/// coordinates (cell `i` is centered at index `i`). Samples more than one
/// cell outside the map contribute nothing; others are clamped to the edge.
fn bilinear(h: usize, w: usize, y: f64, x: f64, weight: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1, ly, lx);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
        ly = y - y0 as f64;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
        lx = x - x0 as f64;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (idx, wgt) in [
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ] {
        if wgt != 0.0 {
            out.push((idx, weight * wgt));
        }
    }
}

/// RoIAlign over an `h x w` map for a box given in map units (one unit per
/// cell, cell `i` spanning `[i, i+1)`), averaged over `pool x pool` bins.
///
/// Half-pixel aligned: the box is shifted by `-0.5` so that sample
/// coordinates are cell-center indices. Each bin is sampled on a
/// `ceil(bin_h) x ceil(bin_w)` grid (at least one point), so a box that
/// covers whole cells samples exactly their centers and a sub-cell box is
/// still sampled bilinearly. Returns `(cell, weight)` pairs whose weights
/// sum to one for boxes inside the map.
pub fn roi_align_weights(h: usize, w: usize, bbox: &BoundingBox, pool: usize) -> Vec<(usize, f64)> {
    let pool = pool.max(1);
    let (sx, sy) = (bbox.x0 - 0.5, bbox.y0 - 0.5);
    let (bw, bh) = (bbox.width() / pool as f64, bbox.height() / pool as f64);
    let gw = (bw.ceil() as usize).max(1);
    let gh = (bh.ceil() as usize).max(1);
    let weight = 1.0 / (pool * pool * gw * gh) as f64;
    let mut out = Vec::new();
    for py in 0..pool {
        for px in 0..pool {
            for iy in 0..gh {
                let y = sy + py as f64 * bh + (iy as f64 + 0.5) * bh / gh as f64;
                for ix in 0..gw {
                    let x = sx + px as f64 * bw + (ix as f64 + 0.5) * bw / gw as f64;
                    bilinear(h, w, y, x, weight, &mut out);
                }
            }
        }
    }
    out
}

/// Turns exemplar boxes into one token each: every pyramid level is
/// upsampled to the finest resolution, the three are concatenated along
/// channels and projected back to `d_model`, and each box is RoI-pooled
/// from that map.
#[derive(Clone, Debug)]
pub struct ExemplarEncoder {
    fuse: Linear,
}

impl ExemplarEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, d_model: usize) -> Self {
        let fuse = Linear::new(store, init, "exemplar.fuse", 3 * d_model, d_model);
        // start close to the finest level's features, which the image tokens
        // that exemplars are compared with also carry
        let w = store.get_mut(fuse.weight);
        for i in 0..d_model {
            w.data_mut()[i * d_model + i] += 1.0;
        }
        ExemplarEncoder { fuse }
    }

    pub fn tokenize(
        &self,
        s: &mut Session,
        feats: &MultiScaleFeatures,
        boxes: &[BoundingBox],
        pool: usize,
    ) -> Result<Var> {
        let d = feats.d_model;
        if boxes.is_empty() {
            return Ok(s.constant(Tensor::zeros([0, d])));
        }
        for b in boxes {
            b.validate(feats.image_width as f64, feats.image_height as f64)?;
        }
        let base = feats.levels[0];
        let mut parts = vec![base.features];
        for level in &feats.levels[1..] {
            let ratio = base.stride as f64 / level.stride as f64;
            let weights: Vec<Vec<(usize, f64)>> = (0..base.height * base.width)
                .map(|c| {
                    let (i, j) = ((c / base.width) as f64, (c % base.width) as f64);
                    let mut ws = Vec::with_capacity(4);
                    let y = ((i + 0.5) * ratio - 0.5).clamp(0.0, (level.height - 1) as f64);
                    let x = ((j + 0.5) * ratio - 0.5).clamp(0.0, (level.width - 1) as f64);
                    bilinear(level.height, level.width, y, x, 1.0, &mut ws);
                    ws
                })
                .collect();
            parts.push(s.tape.weighted_rows(level.features, &weights)?);
        }
        let stacked = s.tape.concat_cols(&parts)?;
        let map = self.fuse.forward(s, stacked)?;
        let scale = 1.0 / base.stride as f64;
        let weights: Vec<Vec<(usize, f64)>> = boxes
            .iter()
            .map(|b| roi_align_weights(base.height, base.width, &b.scaled(scale), pool))
            .collect();
        s.tape.weighted_rows(map, &weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn pooled(map: &Tensor, h: usize, w: usize, b: BoundingBox, pool: usize) -> f64 {
        roi_align_weights(h, w, &b, pool).iter().map(|&(i, wt)| map.data()[i] * wt).sum()
    }

    /// Direct evaluation of the same sampling formula, written without the
    /// shared helper: average bilinear interpolation at the grid points.
    fn oracle(map: &[f64], h: usize, w: usize, b: BoundingBox) -> f64 {
        let gh = b.height().ceil().max(1.0) as usize;
        let gw = b.width().ceil().max(1.0) as usize;
        let mut acc = 0.0;
        for iy in 0..gh {
            for ix in 0..gw {
                let y = (b.y0 + (iy as f64 + 0.5) * b.height() / gh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let x = (b.x0 + (ix as f64 + 0.5) * b.width() / gw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ly, lx) = (y - y0 as f64, x - x0 as f64);
                let v = |yy: usize, xx: usize| map[yy * w + xx];
                acc += (1.0 - ly) * ((1.0 - lx) * v(y0, x0) + lx * v(y0, x1))
                    + ly * ((1.0 - lx) * v(y1, x0) + lx * v(y1, x1));
            }
        }
        acc / (gh * gw) as f64
    }

    #[test]
    fn top_left_quad_of_ramp_pools_to_its_mean() {
        let map = Tensor::from_fn([16], |i| i as f64);
        let v = pooled(&map, 4, 4, BoundingBox::new(0.0, 0.0, 2.0, 2.0), 1);
        assert!((v - 2.5).abs() < 1e-12);
        assert!((oracle(map.data(), 4, 4, BoundingBox::new(0.0, 0.0, 2.0, 2.0)) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn full_extent_box_pools_to_global_mean() {
        let map = Tensor::from_fn([16], |i| ((i * 7919) % 13) as f64);
        let mean = map.sum() / 16.0;
        let v = pooled(&map, 4, 4, BoundingBox::new(0.0, 0.0, 4.0, 4.0), 1);
        assert!((v - mean).abs() < 1e-12);
        // finer pooling grids average to the same value
        let v2 = pooled(&map, 4, 4, BoundingBox::new(0.0, 0.0, 4.0, 4.0), 2);
        assert!((v2 - mean).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_formula_on_arbitrary_boxes() {
        let (h, w) = (7, 9);
        let map: Vec<f64> = (0..h * w).map(|i| ((i as f64) * 0.731).sin()).collect();
        let t = Tensor::vector(map.clone());
        for b in [
            BoundingBox::new(0.3, 1.2, 4.9, 5.5),
            BoundingBox::new(2.0, 2.0, 2.4, 2.3),
            BoundingBox::new(6.1, 0.0, 9.0, 7.0),
        ] {
            assert!((pooled(&t, h, w, b, 1) - oracle(&map, h, w, b)).abs() < 1e-12, "{b:?}");
        }
    }

    #[test]
    fn degenerate_box_is_sampled_bilinearly() {
        let map = Tensor::from_fn([16], |i| i as f64);
        // tiny box centered between cells (1,1),(1,2),(2,1),(2,2)
        let v = pooled(&map, 4, 4, BoundingBox::new(1.9, 1.9, 2.1, 2.1), 1);
        assert!((v - 7.5).abs() < 1e-12);
    }

    #[test]
    fn pooling_is_translation_consistent_on_periodic_maps() {
        // period-3 map in both directions
        let (h, w) = (12, 12);
        let map = Tensor::from_fn([h * w], |c| {
            let (i, j) = (c / w, c % w);
            ((i % 3) * 3 + (j % 3)) as f64
        });
        let b = BoundingBox::new(1.3, 2.2, 3.9, 4.1);
        let base = pooled(&map, h, w, b, 2);
        for (dx, dy) in [(3.0, 0.0), (0.0, 3.0), (6.0, 3.0)] {
            let shifted = pooled(&map, h, w, b.translated(dx, dy), 2);
            assert!((shifted - base).abs() < 1e-12);
        }
        // one-cell shift moves to the neighbouring cells' values
        let one = pooled(&map, h, w, BoundingBox::new(4.0, 4.0, 5.0, 5.0), 1);
        let next = pooled(&map, h, w, BoundingBox::new(5.0, 4.0, 6.0, 5.0), 1);
        assert_eq!(one, map.data()[4 * w + 4]);
        assert_eq!(next, map.data()[4 * w + 5]);
    }

    #[test]
    fn weighted_rows_applies_roi_weights() {
        let mut t = Tape::new();
        let map = t.constant(Tensor::new([16, 1], (0..16).map(|i| i as f64).collect()).unwrap());
        let w = roi_align_weights(4, 4, &BoundingBox::new(0.0, 0.0, 2.0, 2.0), 1);
        let out = t.weighted_rows(map, &[w]).unwrap();
        assert!((t.value(out).item() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(0.0, 0.0, 10.0, 10.0).validate(10.0, 10.0).is_ok());
        assert!(BoundingBox::new(5.0, 0.0, 5.0, 10.0).validate(10.0, 10.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 11.0, 10.0).validate(10.0, 10.0).is_err());
    }
}
