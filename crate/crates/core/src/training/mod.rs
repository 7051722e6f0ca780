//! Set-prediction training: matching, loss, augmentation, optimization.

mod augment;
mod loss;
mod matching;
mod optim;

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, crop, flip, resize, AugmentConfig};
pub use loss::{match_cost, output_loss, set_loss, stage_loss, LossConfig, LossParts, Targets};
pub use matching::{hungarian_match, MatchResult};
pub use optim::{clip_grad_norm, AdamW, Schedule};

use crate::data::CountingSample;
use crate::encoders::{ImageInput, TextPrompt};
use crate::error::{Error, Result};
use crate::inference::{evaluate_samples, Metrics, PromptMode, DEFAULT_SIGMA};
use crate::model::{CountingModel, Forward, Prompt};
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps (across epochs).
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub loss: LossConfig,
    /// Supervise earlier decoder layers and the selection stage too.
    pub auxiliary: bool,
    pub mode: PromptMode,
    /// Class names always present in the caption, in addition to the
    /// sample's own classes. Empty uses only the sample's classes.
    pub caption_classes: Vec<String>,
    /// List every annotated class of a sample in its caption, not only the
    /// primary one.
    pub scene_classes: bool,
    pub shuffle_caption: bool,
    pub augment: AugmentConfig,
    /// Threshold used for validation counts.
    pub sigma: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
    /// Parameter name prefixes excluded from updates.
    pub freeze: Vec<String>,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            max_steps: None,
            batch_size: 1,
            schedule: Schedule::default(),
            weight_decay: 1e-4,
            grad_clip: Some(0.1),
            loss: LossConfig::default(),
            auxiliary: true,
            mode: PromptMode::Both,
            caption_classes: Vec::new(),
            scene_classes: true,
            shuffle_caption: true,
            augment: AugmentConfig::scaled(128),
            sigma: DEFAULT_SIGMA,
            patience: None,
            freeze: Vec::new(),
            seed: 0,
            log_path: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        crate::inference::check_sigma(self.sigma)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.schedule.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A training prompt with the classes it supervises.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: ImageInput,
    pub prompt: Prompt,
    /// `(prompt class index, normalized points)` per supervised class.
    pub classes: Vec<(usize, Vec<(f64, f64)>)>,
}

impl Example {
    /// Resolves class indices to token masks of an assembled prompt.
    pub fn targets(&self, forward: &Forward) -> Targets {
        let mut t = Targets::default();
        for (c, points) in &self.classes {
            let mask = forward.tokens.class_mask(*c);
            for &p in points {
                t.points.push(p);
                t.token_masks.push(mask.clone());
            }
        }
        t
    }
}

/// Builds the prompt for `sample` (already at working resolution). The
/// caption lists the primary class, the sample's other classes when
/// `scene_classes` is set, and `caption_classes`, each phrase followed by
/// the separator; exemplars attach to the primary class. Every listed class
/// with annotations is supervised.
pub fn build_example(
    model: &CountingModel,
    sample: &CountingSample,
    mode: PromptMode,
    caption_classes: &[String],
    scene_classes: bool,
    shuffle: Option<&mut ChaCha8Rng>,
) -> Result<Example> {
    let (w, h) = (sample.image.width() as f64, sample.image.height() as f64);
    let norm = |pts: &[(f64, f64)]| pts.iter().map(|&(x, y)| (x / w, y / h)).collect::<Vec<_>>();
    let primary = sample.primary();
    let image = sample.image.normalize();
    if mode == PromptMode::Exemplars {
        if primary.exemplars.is_empty() {
            return Err(Error::invalid(format!("sample {} has no exemplars", sample.id)));
        }
        return Ok(Example {
            image,
            prompt: Prompt::new(TextPrompt::empty(), primary.exemplars.clone()),
            classes: vec![(0, norm(&primary.points))],
        });
    }
    let mut names: Vec<String> = vec![sample.class_text()];
    for c in sample.classes[1..].iter().filter(|_| scene_classes) {
        if !names.contains(&c.name) {
            names.push(c.name.clone());
        }
    }
    for c in caption_classes {
        if !names.contains(c) {
            names.push(c.clone());
        }
    }
    if let Some(rng) = shuffle {
        names.shuffle(rng);
    }
    let phrases: Vec<Vec<&str>> = names.iter().map(|n| n.split_whitespace().collect()).collect();
    let text = TextPrompt::from_phrases(&phrases, model.vocab())?;
    let index = |n: &str| names.iter().position(|x| x == n).expect("listed above");
    let p0 = index(&sample.class_text());
    let mut classes = vec![(p0, norm(&primary.points))];
    for c in &sample.classes[1..] {
        if let Some(i) = names.iter().position(|x| *x == c.name) {
            classes.push((i, norm(&c.points)));
        }
    }
    let boxes = if mode == PromptMode::Both {
        primary.exemplars.clone()
    } else {
        Vec::new()
    };
    let mut prompt = Prompt::new(text, boxes);
    prompt.exemplar_classes = vec![p0; prompt.boxes.len()];
    Ok(Example { image, prompt, classes })
}

/// Forward pass and loss of one example in a training session.
pub fn example_loss(
    model: &CountingModel,
    s: &mut Session,
    ex: &Example,
    cfg: &LossConfig,
    auxiliary: bool,
) -> Result<(crate::tensor::Var, LossParts)> {
    let k = model.config().k.min(model.num_image_tokens(ex.image.height(), ex.image.width()));
    let f = model.forward_with_k(s, &ex.image, &ex.prompt, k)?;
    let targets = ex.targets(&f);
    output_loss(s, &f.output, &targets, cfg, auxiliary)
}

/// Mask of parameters that receive updates.
pub fn trainable_mask(params: &ParamStore, freeze: &[String]) -> Vec<bool> {
    params
        .ids()
        .map(|id| !freeze.iter().any(|p| params.name(id).starts_with(p.as_str())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_mae: Option<f64>,
    pub val_rmse: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Trains in place. With validation data the parameters of the epoch with
/// the lowest validation MAE are restored at the end and written to the
/// checkpoint path, if any.
pub fn train(
    model: &mut CountingModel,
    train_set: &[CountingSample],
    val_set: &[CountingSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let trainable = trainable_mask(model.params(), &cfg.freeze);
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let mut log = match &cfg.log_path {
        Some(p) => {
            let fresh = !p.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "epoch,loss,val_mae,val_rmse,lr")?;
            }
            Some(f)
        }
        None => None,
    };

    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: 0,
        best_epoch: None,
        best_val: None,
        step_losses: Vec::new(),
    };
    let mut best_params: Option<ParamStore> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let side = model.config().image_side;

    'epochs: for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break;
            }
            let mut acc: Vec<Option<Tensor>> = vec![None; model.params().len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut sample = augment(&train_set[i], &mut rng, &cfg.augment)?;
                if cfg.augment.sides.is_empty() {
                    sample = resize(&sample, side)?;
                }
                let ex = build_example(
                    model,
                    &sample,
                    cfg.mode,
                    &cfg.caption_classes,
                    cfg.scene_classes,
                    if cfg.shuffle_caption { Some(&mut rng) } else { None },
                )?;
                let mut s = Session::with_trainable(model.params(), Some(trainable.clone()));
                let (loss, _) = example_loss(model, &mut s, &ex, &cfg.loss, cfg.auxiliary)?;
                let value = s.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: b,
                        loss: value,
                    });
                }
                batch_loss += value;
                s.tape.backward(loss)?;
                for (slot, g) in acc.iter_mut().zip(s.param_grads()) {
                    if let Some(g) = g {
                        match slot {
                            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                            None => *slot = Some(g),
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            for g in acc.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x /= n);
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut acc, c);
            }
            opt.step(model.params_mut(), &acc, lr)?;
            report.steps += 1;
            report.step_losses.push(batch_loss / n);
            epoch_loss += batch_loss;
            epoch_steps += batch.len();
        }
        if epoch_steps == 0 {
            break;
        }
        let mut stats = EpochStats {
            epoch,
            loss: epoch_loss / epoch_steps as f64,
            val_mae: None,
            val_rmse: None,
            lr,
        };
        if !val_set.is_empty() {
            let (m, _) = evaluate_samples(model, val_set, cfg.mode, cfg.sigma)?;
            stats.val_mae = Some(m.mae);
            stats.val_rmse = Some(m.rmse);
            if report.best_val.map_or(true, |b| m.mae < b.mae) {
                report.best_val = Some(m);
                report.best_epoch = Some(epoch);
                best_params = Some(model.params().clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        if let Some(f) = log.as_mut() {
            let opt_str = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            writeln!(
                f,
                "{},{:.6},{},{},{:e}",
                epoch,
                stats.loss,
                opt_str(stats.val_mae),
                opt_str(stats.val_rmse),
                lr
            )?;
        }
        report.epochs.push(stats);
        if cfg.patience.is_some_and(|p| since_best > p) {
            break 'epochs;
        }
        if cfg.max_steps.is_some_and(|m| report.steps >= m) {
            break;
        }
    }
    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    if let Some(path) = &cfg.checkpoint_path {
        let meta = serde_json::json!({
            "best_epoch": report.best_epoch,
            "best_val": report.best_val,
            "steps": report.steps,
            "train": cfg,
        });
        model.save(path, meta)?;
    }
    Ok(report)
}

/// The loss-weight and threshold grid searched on validation MAE.
pub const LAMBDA_GRID: [f64; 3] = [1.0, 2.5, 5.0];
pub const SIGMA_GRID: [f64; 5] = [0.14, 0.17, 0.2, 0.23, 0.26];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub lambda_loc: f64,
    pub lambda_cls: f64,
    pub sigma: f64,
    pub val: Metrics,
}

/// Every `(λ_loc, λ_cls, σ)` combination of the grid.
pub fn tune_grid() -> Vec<(f64, f64, f64)> {
    let mut out = Vec::with_capacity(45);
    for &l in &LAMBDA_GRID {
        for &c in &LAMBDA_GRID {
            for &s in &SIGMA_GRID {
                out.push((l, c, s));
            }
        }
    }
    out
}

/// Trains one model per `(λ_loc, λ_cls)` pair from `fresh()` and evaluates
/// it at every σ of the grid; results come back sorted by validation MAE.
pub fn tune(
    fresh: impl Fn() -> Result<CountingModel>,
    train_set: &[CountingSample],
    val_set: &[CountingSample],
    base: &TrainConfig,
) -> Result<Vec<TuneResult>> {
    if val_set.is_empty() {
        return Err(Error::invalid("tuning needs a validation set"));
    }
    let mut results = Vec::with_capacity(45);
    for &lambda_loc in &LAMBDA_GRID {
        for &lambda_cls in &LAMBDA_GRID {
            let mut cfg = base.clone();
            cfg.loss.lambda_loc = lambda_loc;
            cfg.loss.lambda_cls = lambda_cls;
            cfg.checkpoint_path = None;
            let mut model = fresh()?;
            train(&mut model, train_set, val_set, &cfg)?;
            for &sigma in &SIGMA_GRID {
                let (val, _) = evaluate_samples(&model, val_set, cfg.mode, sigma)?;
                results.push(TuneResult {
                    lambda_loc,
                    lambda_cls,
                    sigma,
                    val,
                });
            }
        }
    }
    results.sort_by(|a, b| a.val.mae.total_cmp(&b.val.mae));
    Ok(results)
}
