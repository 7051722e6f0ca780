use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use countgd::data::{load_annotations, save_annotations, CountingSample, DatasetSpec, InstanceMask, Palette};
use countgd::encoders::{BoundingBox, ImageInput, Vocabulary};
use countgd::inference::{analyze, evaluate, CountRequest, PredictionRecord, PromptMode};
use countgd::model::CountingModel;
use countgd::training::{train, tune, TrainConfig};
use serde_json::json;

use crate::config::{self, FileConfig, Mode, ModelFlags, TrainFlags};
use crate::service;
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "countgd", version, about = "Open-world object counting prompted by exemplar boxes, text, or both")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Count every image of a manifest and report MAE and RMSE.
    Eval(EvalArgs),
    /// Count objects in one image.
    Predict(PredictArgs),
    /// Grid search over the loss weights and the threshold.
    Tune(TuneArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Manifest to write; images go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 96)]
    pub side: usize,
    #[arg(long, default_value_t = 7)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 30)]
    pub max_objects: usize,
    /// Classes per scene; all but the first are distractors.
    #[arg(long, default_value_t = 1)]
    pub classes: usize,
    #[arg(long, value_enum, default_value = "train")]
    pub palette: PaletteArg,
    /// Name classes by color and shape.
    #[arg(long)]
    pub color_names: bool,
    /// Let distractors share the primary shape (needs --color-names).
    #[arg(long)]
    pub shared_shapes: bool,
    /// Draw every object as two identical parts.
    #[arg(long)]
    pub self_similar: bool,
    /// Packing density between 0 and 1.
    #[arg(long, default_value_t = 0.0)]
    pub clutter: f64,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum PaletteArg {
    Train,
    Heldout,
    All,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Vocabulary file (one word per line); derived from the class names
    /// when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub training: TrainFlags,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: Mode,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub adaptive_crop: bool,
    /// JSON-lines file receiving one prediction per image.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "")]
    pub text: String,
    /// Exemplar box `x0,y0,x1,y1` in pixels; repeatable.
    #[arg(long = "box", value_parser = parse_box)]
    pub boxes: Vec<BoundingBox>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Token range `start:end` of the subject within the text.
    #[arg(long, value_parser = parse_span)]
    pub keyword_span: Option<(usize, usize)>,
    #[arg(long)]
    pub adaptive_crop: bool,
    /// Instance mask of each exemplar (PNG path or `rle:` string), in box
    /// order; enables the repeated-part correction.
    #[arg(long = "mask")]
    pub masks: Vec<String>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Results as JSON, best first.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub training: TrainFlags,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    /// Checkpoint to load; without one the service answers 503.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory that image and mask paths in requests resolve against.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
}

fn parse_box(s: &str) -> Result<BoundingBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x0, y0, x1, y1] if x0 < x1 && y0 < y1 => Ok(BoundingBox::new(x0, y0, x1, y1)),
        [_, _, _, _] => Err("box needs x0 < x1 and y0 < y1".into()),
        _ => Err("expected x0,y0,x1,y1".into()),
    }
}

fn parse_span(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected start:end")?;
    let (a, b) = (
        a.parse::<usize>().map_err(|e| e.to_string())?,
        b.parse::<usize>().map_err(|e| e.to_string())?,
    );
    if a < b {
        Ok((a, b))
    } else {
        Err("span must be non-empty".into())
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Tune(a) => tune_cmd(a),
        Command::Serve(a) => serve(a),
    }
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    if a.min_objects == 0 || a.min_objects > a.max_objects {
        return Err(CliError::Usage("need 0 < --min-objects <= --max-objects".into()));
    }
    if a.shared_shapes && !a.color_names {
        return Err(CliError::Usage("--shared-shapes needs --color-names".into()));
    }
    let spec = DatasetSpec {
        width: a.side,
        height: a.side,
        count_range: (a.min_objects, a.max_objects),
        classes_per_scene: a.classes,
        palette: match a.palette {
            PaletteArg::Train => Palette::Train,
            PaletteArg::Heldout => Palette::Heldout,
            PaletteArg::All => Palette::All,
        },
        self_similar: a.self_similar,
        clutter: a.clutter,
        color_names: a.color_names,
        shared_shapes: a.shared_shapes,
        ..DatasetSpec::default()
    };
    let samples = spec.generate(a.seed, a.count)?;
    save_annotations(&samples, &a.out)?;
    println!("{}", json!({ "images": samples.len(), "manifest": a.out }));
    Ok(())
}

fn load_set(path: &Path) -> Result<Vec<CountingSample>, CliError> {
    let samples = load_annotations(path)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(format!("{} holds no images", path.display())));
    }
    Ok(samples)
}

/// Every word of every class name and caption override.
fn vocabulary_of(sets: &[&[CountingSample]]) -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    for s in sets.iter().flat_map(|s| s.iter()) {
        for c in &s.classes {
            words.extend(c.name.split_whitespace().map(str::to_string));
        }
        if let Some(t) = &s.text {
            words.extend(t.split_whitespace().map(str::to_string));
        }
    }
    words.sort();
    Vocabulary::new(words)
}

fn prepare_training(
    config_path: Option<&Path>,
    model_flags: &ModelFlags,
    train_flags: &TrainFlags,
) -> Result<(countgd::model::ModelConfig, TrainConfig), CliError> {
    let file = FileConfig::load(config_path)?;
    let mc = config::model_config(model_flags, &file.model);
    mc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let tc = config::train_config(train_flags, &file.train, mc.image_side);
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((mc, tc))
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let (mc, mut tc) = prepare_training(a.config.as_deref(), &a.model, &a.training)?;
    let train_set = load_set(&a.train)?;
    let val = match &a.val {
        Some(p) => load_set(p)?,
        None => Vec::new(),
    };
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => vocabulary_of(&[&train_set, &val]),
    };
    tc.log_path = a.log.clone();
    tc.checkpoint_path = Some(a.out.clone());
    let mut model = CountingModel::new(mc, vocab)?;
    let report = train(&mut model, &train_set, &val, &tc)?;
    println!(
        "{}",
        json!({
            "steps": report.steps,
            "epochs": report.epochs.len(),
            "best_epoch": report.best_epoch,
            "best_val_mae": report.best_val,
            "checkpoint": a.out,
        })
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<CountingModel, CliError> {
    CountingModel::load(path)
        .map(|(m, _)| m)
        .map_err(|e| CliError::Runtime(format!("loading {}: {e}", path.display())))
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let sigma = config::sigma(a.sigma, &file.inference);
    countgd::inference::check_sigma(sigma).map_err(|e| CliError::Usage(e.to_string()))?;
    let model = load_model(&a.checkpoint)?;
    let samples = load_set(&a.manifest)?;
    let mode = PromptMode::from(a.mode);
    let mut out = match &a.predictions {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for s in &samples {
        let req = CountRequest {
            adaptive_crop: config::adaptive_crop(a.adaptive_crop, &file.inference),
            ..CountRequest::for_sample(s, mode, sigma)
        };
        let result = countgd::inference::run(&model, &s.image, &req)?;
        preds.push(result.count as f64);
        gts.push(s.count() as f64);
        if let Some(w) = out.as_mut() {
            let mut rec = PredictionRecord::new(s.id.clone(), &result);
            rec.ground_truth = Some(s.count());
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    if let Some(mut w) = out {
        w.flush()?;
    }
    let m = evaluate(&preds, &gts)?;
    println!("{}", json!({ "images": samples.len(), "mae": m.mae, "rmse": m.rmse, "sigma": sigma }));
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    if a.text.trim().is_empty() && a.boxes.is_empty() {
        return Err(CliError::Usage("empty prompt: give --text, --box, or both".into()));
    }
    if !a.masks.is_empty() && a.masks.len() != a.boxes.len() {
        return Err(CliError::Usage(format!(
            "{} masks given for {} boxes",
            a.masks.len(),
            a.boxes.len()
        )));
    }
    let file = FileConfig::load(a.config.as_deref())?;
    let sigma = config::sigma(a.sigma, &file.inference);
    countgd::inference::check_sigma(sigma).map_err(|e| CliError::Usage(e.to_string()))?;
    let model = load_model(&a.checkpoint)?;
    let image = ImageInput::load(&a.image)?;
    let base = a.image.parent().unwrap_or(Path::new("."));
    let masks = if a.masks.is_empty() {
        None
    } else {
        Some(
            a.masks
                .iter()
                .map(|m| InstanceMask::resolve(m, base))
                .collect::<countgd::Result<Vec<_>>>()?,
        )
    };
    let req = CountRequest {
        sigma,
        keyword_span: a.keyword_span,
        adaptive_crop: config::adaptive_crop(a.adaptive_crop, &file.inference),
        masks,
        ..CountRequest::new(a.text.clone(), a.boxes.clone())
    };
    let analysis = analyze(&model, &image, &req)?;
    let report = serde_json::to_string_pretty(&json!({
        "image": a.image,
        "count": analysis.result.count,
        "result": analysis.result,
        "tokens": analysis.tokens,
    }))?;
    if let Some(out) = &a.out {
        std::fs::write(out, &report)?;
    }
    println!("{report}");
    Ok(())
}

fn tune_cmd(a: TuneArgs) -> Result<(), CliError> {
    let (mc, tc) = prepare_training(a.config.as_deref(), &a.model, &a.training)?;
    let train_set = load_set(&a.train)?;
    let val = load_set(&a.val)?;
    let vocab = vocabulary_of(&[&train_set, &val]);
    let results = tune(|| CountingModel::new(mc.clone(), vocab.clone()), &train_set, &val, &tc)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&results)?)?;
    let best = &results[0];
    println!(
        "{}",
        json!({
            "configurations": results.len(),
            "best": { "lambda_loc": best.lambda_loc, "lambda_cls": best.lambda_cls, "sigma": best.sigma, "mae": best.val.mae, "rmse": best.val.rmse },
        })
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let state = service::AppState::new(service::ServiceConfig {
        sigma: config::sigma(None, &file.inference),
        adaptive_crop: file.inference.adaptive_crop.unwrap_or(false),
        image_root: a.image_root.clone(),
    });
    if let Some(p) = &a.checkpoint {
        state.load_checkpoint(p)?;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}
