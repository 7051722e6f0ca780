use serde::{Deserialize, Serialize};

use super::matching::{hungarian_match, MatchResult};
use crate::decoder::DecoderOutput;
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::tensor::{focal_positive, sigmoid, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_loc: f64,
    pub lambda_cls: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_loc: 1.0,
            lambda_cls: 5.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_loc > 0.0 && self.lambda_cls > 0.0 && self.alpha > 0.0 && self.alpha < 1.0 && self.gamma >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// Ground-truth points (normalized to `[0, 1]`) and, for each point, the
/// prompt tokens of its class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub points: Vec<(f64, f64)>,
    pub token_masks: Vec<Vec<bool>>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same targets listed in another order.
    pub fn permuted(&self, order: &[usize]) -> Targets {
        Targets {
            points: order.iter().map(|&i| self.points[i]).collect(),
            token_masks: order.iter().map(|&i| self.token_masks[i].clone()).collect(),
        }
    }
}

/// Matching cost `k x l`: `λ_loc · |ĉ_i − c_j|₁ + λ_cls · focal(p̂_ij)` where
/// `p̂_ij` is query `i`'s best score over the tokens of target `j`'s class
/// and the focal term is the positive-label focal loss of that score.
pub fn match_cost(similarity: &Tensor, centers: &Tensor, targets: &Targets, cfg: &LossConfig) -> Result<Tensor> {
    let (k, m) = (similarity.rows(), similarity.cols());
    if centers.shape() != [k, 2] {
        return Err(Error::shape("match_cost", centers.shape(), &[k, 2]));
    }
    if targets.token_masks.len() != targets.points.len() {
        return Err(Error::shape("match_cost", &[targets.points.len()], &[targets.token_masks.len()]));
    }
    for mask in &targets.token_masks {
        if mask.len() != m {
            return Err(Error::shape("match_cost", &[mask.len()], &[m]));
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::invalid("target token mask selects no prompt token"));
        }
    }
    let l = targets.len();
    let mut cost = vec![0.0; k * l];
    for i in 0..k {
        let row = similarity.row(i);
        let (cx, cy) = (centers.at(i, 0), centers.at(i, 1));
        for (j, (&(tx, ty), mask)) in targets.points.iter().zip(&targets.token_masks).enumerate() {
            let p = row
                .iter()
                .zip(mask)
                .filter(|(_, &on)| on)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let loc = (cx - tx).abs() + (cy - ty).abs();
            cost[i * l + j] = cfg.lambda_loc * loc + cfg.lambda_cls * focal_positive(p, cfg.alpha, cfg.gamma);
        }
    }
    Tensor::new([k, l], cost)
}

/// Loss components of one prediction stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub loc: f64,
    pub cls: f64,
    pub total: f64,
}

/// `λ_loc · L_loc + λ_cls · L_cls` for a matched prediction, both terms
/// divided by `max(l, 1)`. `L_cls` is the focal loss over every query and
/// prompt token, positive exactly at (matched query, token of the target's
/// class); unmatched queries are negatives everywhere. `centers` may be
/// omitted (fixed reference points), leaving only the classification term.
pub fn set_loss(
    s: &mut Session,
    logits: Var,
    centers: Option<Var>,
    matching: &MatchResult,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let shape = s.tape.shape(logits).to_vec();
    let (k, m) = (shape[0], shape[1]);
    let norm = 1.0 / targets.len().max(1) as f64;
    let mut labels = Tensor::zeros([k, m]);
    for &(q, t) in &matching.assignment {
        for (j, &on) in targets.token_masks[t].iter().enumerate() {
            if on {
                labels.data_mut()[q * m + j] = 1.0;
            }
        }
    }
    let focal = s.tape.focal_loss(logits, &labels, cfg.alpha, cfg.gamma)?;
    let cls = s.tape.sum(focal)?;
    let cls = s.tape.scale(cls, norm)?;
    let mut parts = LossParts {
        cls: s.value(cls).item(),
        ..LossParts::default()
    };
    let mut total = s.tape.scale(cls, cfg.lambda_cls)?;

    if let (Some(c), false) = (centers, matching.assignment.is_empty()) {
        let rows: Vec<usize> = matching.assignment.iter().map(|&(q, _)| q).collect();
        let pred = s.tape.gather_rows(c, &rows)?;
        let gt = Tensor::new(
            [rows.len(), 2],
            matching
                .assignment
                .iter()
                .flat_map(|&(_, t)| [targets.points[t].0, targets.points[t].1])
                .collect(),
        )?;
        let gt = s.constant(gt);
        let diff = s.tape.sub(pred, gt)?;
        let diff = s.tape.abs(diff)?;
        let loc = s.tape.sum(diff)?;
        let loc = s.tape.scale(loc, norm)?;
        parts.loc = s.value(loc).item();
        let weighted = s.tape.scale(loc, cfg.lambda_loc)?;
        total = s.tape.add(total, weighted)?;
    }
    parts.total = s.value(total).item();
    Ok((total, parts))
}

fn probabilities(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| sigmoid(x)).collect()).expect("same shape")
}

/// Matches and scores one stage given its logits and (optional) center
/// predictions; `fixed_centers` is used for matching when no center head
/// is trained at that stage.
pub fn stage_loss(
    s: &mut Session,
    logits: Var,
    centers: Option<Var>,
    fixed_centers: Option<&Tensor>,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<(Var, LossParts, MatchResult)> {
    let sim = probabilities(s.value(logits));
    let c = match (centers, fixed_centers) {
        (Some(v), _) => s.value(v).clone(),
        (None, Some(t)) => t.clone(),
        (None, None) => return Err(Error::invalid("stage_loss needs centers to match against")),
    };
    let cost = match_cost(&sim, &c, targets, cfg)?;
    let matching = hungarian_match(&cost)?;
    let (loss, parts) = set_loss(s, logits, centers, &matching, targets, cfg)?;
    Ok((loss, parts, matching))
}

/// Training objective of a full forward pass: the final decoder layer,
/// optionally every earlier layer and the query-selection scores as
/// auxiliary terms. The selection scores are supervised over all image
/// tokens, each target assigned to a distinct nearest token by location
/// alone, so that the top-k choice itself is trained and cannot lock onto
/// whichever tokens score high early. Returns the loss and the final
/// layer's components.
pub fn output_loss(
    s: &mut Session,
    out: &DecoderOutput,
    targets: &Targets,
    cfg: &LossConfig,
    auxiliary: bool,
) -> Result<(Var, LossParts)> {
    let last = out.last();
    let (mut total, parts, _) = stage_loss(s, last.logits, Some(last.centers), None, targets, cfg)?;
    if auxiliary {
        for layer in &out.layers[..out.layers.len() - 1] {
            let (l, _, _) = stage_loss(s, layer.logits, Some(layer.centers), None, targets, cfg)?;
            total = s.tape.add(total, l)?;
        }
        let centers = Tensor::new(
            [out.token_centers.len(), 2],
            out.token_centers.iter().flat_map(|&(x, y)| [x, y]).collect(),
        )?;
        let sim = probabilities(s.value(out.token_logits));
        let by_location = LossConfig {
            lambda_cls: 0.0,
            ..*cfg
        };
        let matching = hungarian_match(&match_cost(&sim, &centers, targets, &by_location)?)?;
        let (l, _) = set_loss(s, out.token_logits, None, &matching, targets, cfg)?;
        total = s.tape.add(total, l)?;
    }
    Ok((total, parts))
}
