//! TOML configuration. Every value resolves as flag, then file, then the
//! library default.
//!
//! ```toml
//! [model]
//! stride = 8
//! channels = [64, 64, 64]
//! d_model = 32
//! k = 50
//! image_side = 96
//!
//! [train]
//! epochs = 30
//! batch_size = 4
//! lr = 1e-3
//! lambda_loc = 5.0
//! mode = "both"
//! augment = "flip"
//!
//! [inference]
//! sigma = 0.23
//! adaptive_crop = true
//! ```

use std::path::{Path, PathBuf};

use countgd::decoder::DecoderConfig;
use countgd::encoders::EncoderConfig;
use countgd::fusion::EnhancerConfig;
use countgd::inference::{PromptMode, DEFAULT_SIGMA};
use countgd::model::ModelConfig;
use countgd::training::{AugmentConfig, TrainConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub inference: InferenceSection,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub stride: Option<usize>,
    pub channels: Option<[usize; 3]>,
    pub d_model: Option<usize>,
    pub text_layers: Option<usize>,
    pub enhancer_blocks: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub heads: Option<usize>,
    pub k: Option<usize>,
    pub pool: Option<usize>,
    pub image_side: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    /// Flip, random crop and multi-scale resize.
    Paper,
    Flip,
    None,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub decay_every: Option<usize>,
    pub decay_factor: Option<f64>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub lambda_loc: Option<f64>,
    pub lambda_cls: Option<f64>,
    pub mode: Option<PromptMode>,
    pub scene_classes: Option<bool>,
    pub augment: Option<AugmentKind>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub sigma: Option<f64>,
    pub adaptive_crop: Option<bool>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<FileConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Runtime(format!("reading {}: {e}", p.display())))?;
                FileConfig::parse(&text)
            }
        }
    }
}

/// Model flags; unset ones fall back to the file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Query budget.
    #[arg(long)]
    pub k: Option<usize>,
    /// Shortest image side fed to the network.
    #[arg(long)]
    pub image_side: Option<usize>,
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub lambda_loc: Option<f64>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, value_enum)]
    pub augment: Option<AugmentKind>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Text,
    Exemplars,
    Both,
}

impl From<Mode> for PromptMode {
    fn from(m: Mode) -> PromptMode {
        match m {
            Mode::Text => PromptMode::Text,
            Mode::Exemplars => PromptMode::Exemplars,
            Mode::Both => PromptMode::Both,
        }
    }
}

pub fn model_config(flags: &ModelFlags, file: &ModelSection) -> ModelConfig {
    let d = ModelConfig::default();
    ModelConfig {
        encoder: EncoderConfig {
            stride: flags.stride.or(file.stride).unwrap_or(d.encoder.stride),
            channels: file.channels.unwrap_or(d.encoder.channels),
            d_model: flags.d_model.or(file.d_model).unwrap_or(d.encoder.d_model),
        },
        text_layers: file.text_layers.unwrap_or(d.text_layers),
        max_text_len: d.max_text_len,
        enhancer: EnhancerConfig {
            blocks: file.enhancer_blocks.unwrap_or(d.enhancer.blocks),
            heads: file.heads.unwrap_or(d.enhancer.heads),
        },
        decoder: DecoderConfig {
            layers: file.decoder_layers.unwrap_or(d.decoder.layers),
            heads: file.heads.unwrap_or(d.decoder.heads),
        },
        heads: file.heads.unwrap_or(d.heads),
        k: flags.k.or(file.k).unwrap_or(d.k),
        pool: file.pool.unwrap_or(d.pool),
        image_side: flags.image_side.or(file.image_side).unwrap_or(d.image_side),
        seed: flags.model_seed.or(file.seed).unwrap_or(d.seed),
    }
}

pub fn train_config(flags: &TrainFlags, file: &TrainSection, image_side: usize) -> TrainConfig {
    let d = TrainConfig::default();
    let augment = match flags.augment.or(file.augment).unwrap_or(AugmentKind::Paper) {
        AugmentKind::Paper => AugmentConfig::scaled(image_side),
        AugmentKind::Flip => AugmentConfig::flip_only(),
        AugmentKind::None => AugmentConfig {
            flip_prob: 0.0,
            ..AugmentConfig::flip_only()
        },
    };
    let mut cfg = TrainConfig {
        epochs: flags.epochs.or(file.epochs).unwrap_or(d.epochs),
        max_steps: flags.max_steps.or(file.max_steps).or(d.max_steps),
        batch_size: flags.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        weight_decay: file.weight_decay.unwrap_or(d.weight_decay),
        grad_clip: file.grad_clip.or(d.grad_clip),
        mode: flags.mode.map(PromptMode::from).or(file.mode).unwrap_or(d.mode),
        scene_classes: file.scene_classes.unwrap_or(d.scene_classes),
        patience: file.patience.or(d.patience),
        seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        augment,
        ..d
    };
    cfg.schedule.lr = flags.lr.or(file.lr).unwrap_or(cfg.schedule.lr);
    cfg.schedule.decay_every = flags.decay_every.or(file.decay_every).unwrap_or(cfg.schedule.decay_every);
    cfg.schedule.decay_factor = file.decay_factor.unwrap_or(cfg.schedule.decay_factor);
    cfg.loss.lambda_loc = flags.lambda_loc.or(file.lambda_loc).unwrap_or(cfg.loss.lambda_loc);
    cfg.loss.lambda_cls = flags.lambda_cls.or(file.lambda_cls).unwrap_or(cfg.loss.lambda_cls);
    cfg
}

pub fn sigma(flag: Option<f64>, file: &InferenceSection) -> f64 {
    flag.or(file.sigma).unwrap_or(DEFAULT_SIGMA)
}

pub fn adaptive_crop(flag: bool, file: &InferenceSection) -> bool {
    flag || file.adaptive_crop.unwrap_or(false)
}

/// Resolves `path` against `base` unless absolute.
pub fn relative_to(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
