//! Counting from the similarity matrix, tiled counting for dense scenes,
//! mask-based self-similarity correction and error metrics.

use serde::{Deserialize, Serialize};

use crate::data::{CountingSample, InstanceMask};
use crate::encoders::{BoundingBox, ImageInput};
use crate::error::{Error, Result};
use crate::fusion::{TokenKind, TokenOrigin};
use crate::model::{CountingModel, Prediction, Prompt};
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 0.23;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Center in pixel coordinates of the input image.
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    /// Prompt token with the highest score.
    pub token: usize,
    pub tile: usize,
    /// Contribution to the count (below one for detections in tile overlaps).
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub count: usize,
    pub detections: Vec<Detection>,
    pub sigma: f64,
    pub tiles: usize,
    /// Set once the self-similarity correction has divided the count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tt_norm_divisor: Option<usize>,
}

pub fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("sigma must lie in (0, 1), got {sigma}")))
    }
}

/// Queries whose best score over the permitted tokens exceeds `sigma`, as
/// `(query, score, token)`. Ties between tokens go to the lower index.
pub fn count_scores(similarity: &Tensor, sigma: f64, token_mask: &[bool]) -> Result<Vec<(usize, f64, usize)>> {
    check_sigma(sigma)?;
    if similarity.rank() != 2 || token_mask.len() != similarity.cols() {
        return Err(Error::shape("count", similarity.shape(), &[token_mask.len()]));
    }
    if !token_mask.iter().any(|&m| m) {
        return Err(Error::invalid("token mask selects no prompt token"));
    }
    let mut out = Vec::new();
    for q in 0..similarity.rows() {
        let mut best: Option<(f64, usize)> = None;
        for (j, &v) in similarity.row(q).iter().enumerate() {
            if token_mask[j] && best.map_or(true, |(b, _)| v > b) {
                best = Some((v, j));
            }
        }
        if let Some((v, j)) = best {
            if v > sigma {
                out.push((q, v, j));
            }
        }
    }
    Ok(out)
}

/// Thresholds the row-max of the prediction's scores over `token_mask`
/// (all tokens when `None`).
pub fn count(pred: &Prediction, sigma: f64, token_mask: Option<&[bool]>) -> Result<CountResult> {
    let full = vec![true; pred.similarity.cols()];
    let hits = count_scores(&pred.similarity, sigma, token_mask.unwrap_or(&full))?;
    let detections: Vec<Detection> = hits
        .into_iter()
        .map(|(q, confidence, token)| Detection {
            x: pred.centers.at(q, 0) * pred.image_width as f64,
            y: pred.centers.at(q, 1) * pred.image_height as f64,
            confidence,
            token,
            tile: 0,
            weight: 1.0,
        })
        .collect();
    Ok(CountResult {
        count: detections.len(),
        detections,
        sigma,
        tiles: 1,
        tt_norm_divisor: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub tiles: Vec<BoundingBox>,
    pub crop: (f64, f64),
    pub overlap: (f64, f64),
    width: f64,
    height: f64,
}

impl TilePlan {
    /// Whether `(x, y)` lies in `tile`; tiles are half-open except at the
    /// image's right and bottom border.
    pub fn tile_contains(&self, tile: &BoundingBox, x: f64, y: f64) -> bool {
        let in_x = x >= tile.x0 && (x < tile.x1 || (tile.x1 >= self.width && x <= self.width));
        let in_y = y >= tile.y0 && (y < tile.y1 || (tile.y1 >= self.height && y <= self.height));
        in_x && in_y
    }

    pub fn covering(&self, x: f64, y: f64) -> usize {
        self.tiles.iter().filter(|t| self.tile_contains(t, x, y)).count()
    }
}

fn axis_starts(extent: f64, crop: f64, stride: f64) -> Vec<f64> {
    let mut starts = vec![0.0];
    while starts.last().unwrap() + crop < extent {
        let last = extent - crop;
        let next = starts.last().unwrap() + stride;
        if next >= last {
            // rounding can leave `last + crop` a hair below `extent`
            starts.push(last);
            break;
        }
        starts.push(next);
    }
    starts
}

/// Tiles of four times the mean exemplar size overlapping by 1.25 times the
/// mean exemplar size, the last tile in each direction flush with the image
/// edge. Without exemplars the image is split into four equal quadrants.
pub fn plan_tiles(width: f64, height: f64, boxes: &[BoundingBox]) -> TilePlan {
    if boxes.is_empty() {
        let (hw, hh) = (width / 2.0, height / 2.0);
        let tiles = [(0.0, 0.0), (hw, 0.0), (0.0, hh), (hw, hh)]
            .iter()
            .map(|&(x, y)| BoundingBox::new(x, y, x + hw, y + hh))
            .collect();
        return TilePlan {
            tiles,
            crop: (hw, hh),
            overlap: (0.0, 0.0),
            width,
            height,
        };
    }
    let n = boxes.len() as f64;
    let mw = boxes.iter().map(BoundingBox::width).sum::<f64>() / n;
    let mh = boxes.iter().map(BoundingBox::height).sum::<f64>() / n;
    let crop = (4.0 * mw, 4.0 * mh);
    let overlap = (1.25 * mw, 1.25 * mh);
    let xs = if crop.0 >= width {
        vec![0.0]
    } else {
        axis_starts(width, crop.0, crop.0 - overlap.0)
    };
    let ys = if crop.1 >= height {
        vec![0.0]
    } else {
        axis_starts(height, crop.1, crop.1 - overlap.1)
    };
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            tiles.push(BoundingBox::new(x, y, (x + crop.0).min(width), (y + crop.1).min(height)));
        }
    }
    TilePlan {
        tiles,
        crop,
        overlap,
        width,
        height,
    }
}

/// Sums tile detections (already in image coordinates, tagged with their
/// tile index) weighting each by one over the number of tiles covering its
/// center, and rounds the total.
pub fn merge_tiles(plan: &TilePlan, detections: Vec<Detection>, sigma: f64) -> CountResult {
    let mut kept = Vec::with_capacity(detections.len());
    for mut d in detections {
        let c = plan.covering(d.x, d.y);
        if c == 0 {
            continue;
        }
        d.weight = 1.0 / c as f64;
        kept.push(d);
    }
    let total: f64 = kept.iter().map(|d| d.weight).sum();
    CountResult {
        count: total.round() as usize,
        detections: kept,
        sigma,
        tiles: plan.tiles.len(),
        tt_norm_divisor: None,
    }
}

/// Divides the count when each exemplar's instance mask holds several
/// detections on average (objects made of repeated parts). Detections
/// inside an exemplar box but outside its mask never count. Survivors are
/// chosen greedily: the most confident detection absorbs its nearest
/// `divisor - 1` neighbours. Applying it twice equals applying it once.
pub fn tt_norm(result: &CountResult, masks: &[InstanceMask], num_exemplars: usize) -> Result<CountResult> {
    if masks.len() != num_exemplars {
        return Err(Error::invalid(format!(
            "{} masks given for {num_exemplars} exemplars",
            masks.len()
        )));
    }
    if masks.is_empty() || result.tt_norm_divisor.is_some() {
        return Ok(result.clone());
    }
    let per_mask: Vec<f64> = masks
        .iter()
        .map(|m| {
            result
                .detections
                .iter()
                .filter(|d| m.contains(d.x, d.y))
                .map(|d| d.weight)
                .sum()
        })
        .collect();
    let m = per_mask.iter().sum::<f64>() / masks.len() as f64;
    if m <= 1.5 {
        return Ok(result.clone());
    }
    let divisor = m.round() as usize;
    let target = (result.count as f64 / divisor as f64).round() as usize;

    let mut order: Vec<usize> = (0..result.detections.len()).collect();
    order.sort_by(|&a, &b| {
        result.detections[b]
            .confidence
            .total_cmp(&result.detections[a].confidence)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; result.detections.len()];
    let mut keepers = Vec::new();
    for &i in &order {
        if taken[i] {
            continue;
        }
        taken[i] = true;
        keepers.push(i);
        let di = &result.detections[i];
        let mut near: Vec<(f64, usize)> = (0..result.detections.len())
            .filter(|&j| !taken[j])
            .map(|j| {
                let dj = &result.detections[j];
                ((dj.x - di.x).powi(2) + (dj.y - di.y).powi(2), j)
            })
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in near.iter().take(divisor - 1) {
            taken[j] = true;
        }
    }
    // keepers are in decreasing confidence; drop the weakest beyond the target
    keepers.truncate(target);
    keepers.sort_unstable();
    Ok(CountResult {
        count: target,
        detections: keepers.iter().map(|&i| result.detections[i].clone()).collect(),
        sigma: result.sigma,
        tiles: result.tiles,
        tt_norm_divisor: Some(divisor),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

pub fn evaluate(preds: &[f64], gts: &[f64]) -> Result<Metrics> {
    if preds.len() != gts.len() {
        return Err(Error::shape("evaluate", &[preds.len()], &[gts.len()]));
    }
    if preds.is_empty() {
        return Err(Error::invalid("evaluate needs at least one image"));
    }
    let n = preds.len() as f64;
    let mae = preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let mse = preds.iter().zip(gts).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n;
    Ok(Metrics { mae, rmse: mse.sqrt() })
}

/// Which parts of a sample's annotations make up the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Text,
    Exemplars,
    Both,
}

/// A full counting request against an image in its original resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CountRequest {
    pub text: String,
    /// Exemplar boxes in original pixel coordinates.
    pub boxes: Vec<BoundingBox>,
    pub sigma: f64,
    /// Restrict scoring to these text tokens.
    pub keyword_span: Option<(usize, usize)>,
    pub adaptive_crop: bool,
    /// Exemplar instance masks enabling the self-similarity correction.
    pub masks: Option<Vec<InstanceMask>>,
}

impl CountRequest {
    pub fn new(text: impl Into<String>, boxes: Vec<BoundingBox>) -> CountRequest {
        CountRequest {
            text: text.into(),
            boxes,
            sigma: DEFAULT_SIGMA,
            keyword_span: None,
            adaptive_crop: false,
            masks: None,
        }
    }

    /// Prompt for the primary class of `sample`.
    pub fn for_sample(sample: &CountingSample, mode: PromptMode, sigma: f64) -> CountRequest {
        let p = sample.primary();
        let text = match mode {
            PromptMode::Exemplars => String::new(),
            _ => sample.class_text(),
        };
        let boxes = match mode {
            PromptMode::Text => Vec::new(),
            _ => p.exemplars.clone(),
        };
        CountRequest {
            sigma,
            keyword_span: if mode == PromptMode::Exemplars { None } else { sample.keyword_span },
            ..CountRequest::new(text, boxes)
        }
    }
}

/// Resizes `image` (values in `[0, 1]`) to the model's working size and
/// returns the normalized image with the scale factor applied.
pub fn prepare_image(model: &CountingModel, image: &ImageInput) -> Result<(f64, ImageInput)> {
    let (scale, resized) = image.resize_shortest_side(model.config().image_side)?;
    Ok((scale, resized.normalize()))
}

/// Counts with the full pipeline: resize, predict, optional tiling when
/// the query budget saturates, optional self-similarity correction.
/// Detection coordinates are reported in the original image.
pub fn run(model: &CountingModel, image: &ImageInput, req: &CountRequest) -> Result<CountResult> {
    analyze(model, image, req).map(|a| a.result)
}

/// Best score and center of one query on the whole image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// How strongly the queries respond to one prompt token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSummary {
    /// The word for text tokens, `exemplar <i>` for exemplars.
    pub label: String,
    pub kind: TokenKind,
    pub max_score: f64,
    pub mean_score: f64,
    /// Queries whose score on this token exceeds sigma.
    pub above_sigma: usize,
}

/// A count with the whole-image scores behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub result: CountResult,
    pub queries: Vec<QueryScore>,
    pub tokens: Vec<TokenSummary>,
}

/// [`run`], also reporting every query's score and per-token summaries of
/// the whole-image prediction (tiles are not included).
pub fn analyze(model: &CountingModel, image: &ImageInput, req: &CountRequest) -> Result<Analysis> {
    check_sigma(req.sigma)?;
    let text = model.parse_text(&req.text)?;
    if text.is_empty() && req.boxes.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    for b in &req.boxes {
        b.validate(image.width() as f64, image.height() as f64)?;
    }
    let text = match req.keyword_span {
        Some(span) => text.with_keyword(span)?,
        None => text,
    };
    let (scale, img) = prepare_image(model, image)?;
    let prompt = Prompt::new(text, req.boxes.iter().map(|b| clamp_box(b.scaled(scale), &img)).collect());
    let pred = model.predict(&img, &prompt, true)?;
    let mask = token_mask(&pred, &prompt);
    let mut result = count(&pred, req.sigma, Some(&mask))?;
    let k_used = pred.similarity.rows();
    if req.adaptive_crop && result.count >= k_used {
        result = tiled(model, &img, &prompt, req.sigma)?;
    }
    for d in &mut result.detections {
        d.x /= scale;
        d.y /= scale;
    }
    if let Some(masks) = &req.masks {
        result = tt_norm(&result, masks, req.boxes.len())?;
    }
    let queries = (0..k_used)
        .map(|q| QueryScore {
            x: pred.centers.at(q, 0) * img.width() as f64 / scale,
            y: pred.centers.at(q, 1) * img.height() as f64 / scale,
            score: pred
                .similarity
                .row(q)
                .iter()
                .zip(&mask)
                .filter(|(_, &on)| on)
                .map(|(&v, _)| v)
                .fold(0.0, f64::max),
        })
        .collect();
    let tokens = (0..pred.similarity.cols())
        .map(|j| {
            let col: Vec<f64> = (0..k_used).map(|q| pred.similarity.at(q, j)).collect();
            let label = match pred.origins[j] {
                TokenOrigin::Text(t) => model
                    .vocab()
                    .word(prompt.text.tokens[t])
                    .unwrap_or("?")
                    .to_string(),
                TokenOrigin::Exemplar(e) => format!("exemplar {e}"),
            };
            TokenSummary {
                label,
                kind: pred.kinds[j],
                max_score: col.iter().copied().fold(0.0, f64::max),
                mean_score: col.iter().sum::<f64>() / k_used.max(1) as f64,
                above_sigma: col.iter().filter(|&&v| v > req.sigma).count(),
            }
        })
        .collect();
    Ok(Analysis { result, queries, tokens })
}

fn clamp_box(b: BoundingBox, img: &ImageInput) -> BoundingBox {
    let (w, h) = (img.width() as f64, img.height() as f64);
    BoundingBox::new(b.x0.clamp(0.0, w), b.y0.clamp(0.0, h), b.x1.clamp(0.0, w), b.y1.clamp(0.0, h))
}

fn token_mask(pred: &Prediction, prompt: &Prompt) -> Vec<bool> {
    match prompt.text.keyword_span {
        Some(span) => pred.text_mask(span),
        None => vec![true; pred.similarity.cols()],
    }
}

/// Counts every tile of `img` (normalized, model resolution) separately and
/// merges. Exemplar tokens come from the whole image so that tiles without
/// an exemplar still see the prompt.
pub fn tiled(model: &CountingModel, img: &ImageInput, prompt: &Prompt, sigma: f64) -> Result<CountResult> {
    let plan = plan_tiles(img.width() as f64, img.height() as f64, &prompt.boxes);
    let mut tile_prompt = prompt.clone();
    if !prompt.boxes.is_empty() {
        tile_prompt.exemplar_tokens = Some(model.exemplar_tokens(img, &prompt.boxes)?);
    }
    let min_side = (4 * model.config().encoder.stride).max(crate::encoders::MIN_SIDE);
    let mut detections = Vec::new();
    for (t, tile) in plan.tiles.iter().enumerate() {
        let (x0, y0) = (tile.x0.floor() as usize, tile.y0.floor() as usize);
        let (x1, y1) = (tile.x1.ceil() as usize, tile.y1.ceil() as usize);
        let crop = img.crop(x0, y0, x1, y1, [0.0; 3])?.pad_to(min_side, min_side, [0.0; 3])?;
        let pred = model.predict(&crop, &tile_prompt, true)?;
        let mask = token_mask(&pred, &tile_prompt);
        for mut d in count(&pred, sigma, Some(&mask))?.detections {
            d.x += x0 as f64;
            d.y += y0 as f64;
            d.tile = t;
            // padding beyond the tile is not part of it
            if plan.tile_contains(tile, d.x, d.y) {
                detections.push(d);
            }
        }
    }
    Ok(merge_tiles(&plan, detections, sigma))
}

/// One line of a prediction report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub count: usize,
    pub sigma: f64,
    pub tiles: usize,
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<usize>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, result: &CountResult) -> Self {
        PredictionRecord {
            id: id.into(),
            count: result.count,
            sigma: result.sigma,
            tiles: result.tiles,
            points: result.detections.iter().map(|d| [d.x, d.y]).collect(),
            ground_truth: None,
        }
    }
}

/// Counts the primary class of every sample with `mode` prompts and
/// returns the metrics and predicted counts.
pub fn evaluate_samples(
    model: &CountingModel,
    samples: &[CountingSample],
    mode: PromptMode,
    sigma: f64,
) -> Result<(Metrics, Vec<f64>)> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for sample in samples {
        let req = CountRequest::for_sample(sample, mode, sigma);
        preds.push(run(model, &sample.image, &req)?.count as f64);
        gts.push(sample.count() as f64);
    }
    Ok((evaluate(&preds, &gts)?, preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_row_maxima() {
        let sim = Tensor::from_rows(&[vec![0.5, 0.1], vec![0.1, 0.05], vec![0.2, 0.3]]).unwrap();
        let hits = count_scores(&sim, 0.23, &[true, true]).unwrap();
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(hits[1].2, 1);
        assert!(count_scores(&Tensor::zeros([4, 2]), 0.23, &[true, true]).unwrap().is_empty());
        assert!(count_scores(&sim, 1.0, &[true, true]).is_err());
        assert!(count_scores(&sim, 0.0, &[true, true]).is_err());
        assert!(count_scores(&sim, 0.2, &[false, false]).is_err());
        // restricting to the first token drops query 2
        assert_eq!(count_scores(&sim, 0.23, &[true, false]).unwrap().len(), 1);
    }

    #[test]
    fn axis_layout() {
        assert_eq!(axis_starts(100.0, 40.0, 27.5), vec![0.0, 27.5, 55.0, 60.0]);
        assert_eq!(axis_starts(80.0, 40.0, 40.0), vec![0.0, 40.0]);
    }

    #[test]
    fn metrics_example() {
        let m = evaluate(&[3.0, 5.0], &[1.0, 5.0]).unwrap();
        assert_eq!(m.mae, 1.0);
        assert!((m.rmse - 2f64.sqrt()).abs() < 1e-15);
        assert!(evaluate(&[], &[]).is_err());
    }
}
