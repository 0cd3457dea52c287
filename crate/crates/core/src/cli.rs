//! Command-line front end: `synth`, `train`, `parse`, `eval`, `gradcheck`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::{
    load_segments_csv, synth_generate, write_segments_csv, Dataset, DenseAnnotation, LabelGrid,
    Modality, ScoredSegment, SynthConfig, VideoBag, DEFAULT_AUDIO_DIM, DEFAULT_CLASSES,
    DEFAULT_SNIPPETS, DEFAULT_VISUAL_DIM,
};
use crate::error::{Error, Result};
use crate::losses::{LossMode, LossSettings, SmoothingConfig};
use crate::metrics::{self, MetricReport, VideoParse, DEFAULT_IOU_THRESHOLD, FINAL_METRICS_FILE};
use crate::mmil::{parse_video, Pooling};
use crate::model::{
    batch_loss, loss_and_grad, predict, Example, ModelConfig, ModelParams, Temporal,
};
use crate::numeric::{grad_check, GradCheckReport};
use crate::trainer::{self, Checkpoint, RunDir, TrainConfig};

pub const CONFIG_SNAPSHOT_FILE: &str = "config.snapshot";
pub const THREADS_ENV: &str = "AVVP_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "avvp",
    version,
    about = "Weakly-supervised audio-visual video parsing"
)]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic planted-event dataset.
    Synth(SynthArgs),
    /// Train a model on weakly-labelled videos.
    Train(TrainArgs),
    /// Write the event segments predicted by a checkpoint.
    Parse(ParseArgs),
    /// Score predicted segments against dense annotations.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random data.
    Gradcheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub videos: usize,
    #[arg(long, default_value_t = DEFAULT_SNIPPETS)]
    pub snippets: usize,
    #[arg(long, default_value_t = DEFAULT_AUDIO_DIM)]
    pub d_a: usize,
    #[arg(long, default_value_t = DEFAULT_VISUAL_DIM)]
    pub d_v: usize,
    #[arg(long, default_value_t = DEFAULT_CLASSES)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub modality_bias: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Put the last N videos in `<out>/test` and the rest in `<out>/train`.
    #[arg(long)]
    pub split_test: Option<usize>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory with dense annotations.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Run directory for checkpoints, logs and the config snapshot.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written under the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub lr_step_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, value_enum)]
    pub temporal: Option<Temporal>,
    #[arg(long, value_enum)]
    pub pool: Option<Pooling>,
    #[arg(long)]
    pub learned_attention: Option<bool>,
    #[arg(long, value_enum)]
    pub loss: Option<LossMode>,
    #[arg(long)]
    pub smooth_eps_a: Option<f64>,
    #[arg(long)]
    pub smooth_eps_v: Option<f64>,
    #[arg(long)]
    pub smooth_k: Option<usize>,
    #[arg(long)]
    pub positive_only_wsl: Option<bool>,
    #[arg(long)]
    pub clip_grad_norm: Option<f64>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output segments CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory holding the dense annotations.
    #[arg(long)]
    pub data: PathBuf,
    /// Predicted segments, in parse-output or annotation format.
    #[arg(long)]
    pub pred: PathBuf,
    /// Metrics CSV; defaults to `final_metrics.csv` next to the predictions.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub per_video: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
}

#[derive(Clone, Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Snippets per video.
    #[arg(long, default_value_t = 4)]
    pub t: usize,
    /// Hidden width.
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    #[arg(long, default_value_t = 6)]
    pub d_a: usize,
    /// Defaults to the hidden width.
    #[arg(long)]
    pub d_v: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value_t = Temporal::Han)]
    pub temporal: Temporal,
    #[arg(long, value_enum, default_value_t = Pooling::Attentive)]
    pub pool: Pooling,
    #[arg(long, value_enum, default_value_t = LossMode::Both)]
    pub loss: LossMode,
    #[arg(long, default_value_t = 0.1)]
    pub smooth_eps: f64,
    #[arg(long)]
    pub learned_attention: bool,
}

impl Default for GradCheckArgs {
    fn default() -> Self {
        #[derive(Parser)]
        struct Wrap {
            #[command(flatten)]
            args: GradCheckArgs,
        }
        Wrap::parse_from(["gradcheck"]).args
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Parse(a) => cmd_parse(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => {
            let report = run_gradcheck(&a)?;
            println!(
                "gradcheck: {} coordinates, max relative error {:.3e} (tolerance {:.0e}) at {}",
                report.coordinates,
                report.max_rel_error,
                a.tolerance,
                worst_location(&report)
            );
            if report.max_rel_error < a.tolerance {
                println!("PASS");
                Ok(())
            } else {
                Err(Error::GradCheckFailed {
                    max_rel_error: report.max_rel_error,
                    tolerance: a.tolerance,
                    location: worst_location(&report),
                })
            }
        }
    }
}

fn worst_location(report: &GradCheckReport) -> String {
    report
        .worst
        .as_ref()
        .map_or_else(|| "-".to_string(), |(name, i)| format!("{name}[{i}]"))
}

fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_videos: a.videos,
        snippets: a.snippets,
        d_a: a.d_a,
        d_v: a.d_v,
        classes: a.classes,
        noise_sigma: a.noise,
        modality_bias: a.modality_bias,
        seed: a.seed,
    };
    let data = synth_generate(&cfg)?.dataset;
    prepare_output_dir(&a.out, a.force)?;
    match a.split_test {
        Some(n) => {
            if n >= data.len() {
                return Err(Error::InvalidArgument(format!(
                    "--split-test {n} leaves no training videos out of {}",
                    data.len()
                )));
            }
            let (train, test) = data.split_at(cfg.n_videos - n);
            train.save(&a.out.join("train"))?;
            test.save(&a.out.join("test"))?;
            println!(
                "wrote {} train and {} test videos to {}",
                train.len(),
                test.len(),
                a.out.display()
            );
        }
        None => {
            data.save(&a.out)?;
            println!("wrote {} videos to {}", data.len(), a.out.display());
        }
    }
    Ok(())
}

/// Defaults, then the config file, then flags.
pub fn resolve_train_config(file: Option<&Path>, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = o.$flag { cfg.$field = v; })*
        };
    }
    set!(
        epochs => epochs,
        batch_size => batch_size,
        lr => lr0,
        lr_decay => lr_decay,
        lr_step_epochs => lr_step_epochs,
        seed => seed,
        width => width,
        temporal => temporal,
        pool => pooling,
        learned_attention => learned_attention,
        loss => loss,
        smooth_eps_a => smooth_eps_a,
        smooth_eps_v => smooth_eps_v,
        positive_only_wsl => positive_only_wsl,
        eval_interval => eval_interval,
        threshold => threshold,
    );
    if o.smooth_k.is_some() {
        cfg.smooth_k = o.smooth_k;
    }
    if o.clip_grad_norm.is_some() {
        cfg.clip_grad_norm = o.clip_grad_norm;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a.config.as_deref(), &a.overrides)?;
    let train_data = Dataset::load(&a.data)?;
    let val = a.val.as_deref().map(Dataset::load).transpose()?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let run_dir = RunDir::create(&a.out)?;
    crate::datamodel::write_atomic(&a.out.join(CONFIG_SNAPSHOT_FILE), cfg.to_toml().as_bytes())?;
    println!("config digest {}", cfg.digest());

    let outcome = trainer::train(&train_data, val.as_ref(), &cfg, Some(&run_dir), resume)?;
    if let Some(last) = outcome.history.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.loss.total);
    }
    if let Some((epoch, score)) = outcome.best {
        println!("best validation segment Type@AV {score:.4} at epoch {epoch}");
    }
    if let Some(v) = &val {
        let report = trainer::evaluate(&outcome.params, v, cfg.threshold)?;
        report.write_csv(&a.out.join(FINAL_METRICS_FILE))?;
        print!("{}", report.to_csv());
    }
    Ok(())
}

pub fn cmd_parse(a: &ParseArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    check_model_fits(&ck.params.config, &data)?;
    let per_video = data
        .samples
        .par_iter()
        .map(|s| {
            let probs = predict(&ck.params, &s.bag)?;
            Ok(parse_video(&probs, a.threshold)
                .into_iter()
                .map(|e| ScoredSegment {
                    video_id: s.bag.video_id.clone(),
                    segment: e.segment,
                    confidence: Some(e.confidence),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let segments: Vec<ScoredSegment> = per_video.into_iter().flatten().collect();
    write_segments_csv(&a.out, &segments, &data.taxonomy)?;
    println!(
        "wrote {} segments for {} videos to {}",
        segments.len(),
        data.len(),
        a.out.display()
    );
    Ok(())
}

fn check_model_fits(model: &ModelConfig, data: &Dataset) -> Result<()> {
    if model.classes != data.classes() {
        return Err(Error::shape(
            "checkpoint classes",
            model.classes,
            data.classes(),
        ));
    }
    if let Some((d_a, d_v)) = data.feature_dims() {
        if (d_a, d_v) != (model.d_a, model.d_v) {
            return Err(Error::shape(
                "checkpoint feature dims",
                format!("{}x{}", model.d_a, model.d_v),
                format!("{d_a}x{d_v}"),
            ));
        }
    }
    Ok(())
}

/// Groups predicted segments by video. Without explicit audio-visual rows
/// the audio-visual parse is the audio/visual intersection.
pub fn predictions_from_segments(
    segments: &[ScoredSegment],
    data: &Dataset,
    explicit_av: bool,
) -> Result<Vec<VideoParse>> {
    let known: std::collections::HashSet<&str> = data
        .samples
        .iter()
        .map(|s| s.bag.video_id.as_str())
        .collect();
    let mut unknown: Vec<String> = segments
        .iter()
        .filter(|s| !known.contains(s.video_id.as_str()))
        .map(|s| s.video_id.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::MissingAnnotations(unknown));
    }
    data.samples
        .iter()
        .map(|s| {
            let id = &s.bag.video_id;
            let segs: Vec<_> = segments
                .iter()
                .filter(|p| &p.video_id == id)
                .map(|p| p.segment)
                .collect();
            let (t, c) = (s.bag.snippets(), data.classes());
            if explicit_av {
                VideoParse::from_segments(id.clone(), t, c, &segs)
            } else {
                let grid = |m: Modality| {
                    LabelGrid::from_segments(t, c, segs.iter().filter(|x| x.modality == m))
                };
                let ann = DenseAnnotation::from_grids(
                    id.clone(),
                    grid(Modality::Audio)?,
                    grid(Modality::Visual)?,
                )?;
                Ok(VideoParse::from_annotation(&ann))
            }
        })
        .collect()
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

pub fn evaluate_files(data_dir: &Path, pred: &Path, iou: f64) -> Result<MetricReport> {
    let data = Dataset::load(data_dir)?;
    data.validate_for_evaluation()?;
    let (segments, explicit_av) = load_segments_csv(pred, &data.taxonomy)?;
    let preds = predictions_from_segments(&segments, &data, explicit_av)?;
    let gts: Vec<&DenseAnnotation> = data
        .samples
        .iter()
        .filter_map(|s| s.dense.as_ref())
        .collect();
    thread_pool()?.install(|| metrics::evaluate(&preds, &gts, iou))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report = evaluate_files(&a.data, &a.pred, a.iou)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.pred
            .parent()
            .unwrap_or(Path::new("."))
            .join(FINAL_METRICS_FILE)
    });
    report.write_csv(&out)?;
    if let Some(p) = &a.per_video {
        crate::datamodel::write_atomic(p, report.per_video_csv().as_bytes())?;
    }
    print!("{}", report.to_csv());
    Ok(())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> crate::numeric::Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    crate::numeric::Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Random model, bags and weak labels; compares the loss gradient against
/// central differences.
pub fn run_gradcheck(a: &GradCheckArgs) -> Result<GradCheckReport> {
    if a.t == 0 || a.batch == 0 {
        return Err(Error::InvalidArgument(
            "--t and --batch must be at least 1".into(),
        ));
    }
    let config = ModelConfig {
        d_a: a.d_a,
        d_v: a.d_v.unwrap_or(a.d),
        width: a.d,
        classes: a.classes,
        temporal: a.temporal,
        pooling: a.pool,
        learned_attention: a.learned_attention,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut params = ModelParams::new(config, &mut rng)?;
    let bags = (0..a.batch)
        .map(|i| {
            let audio = random_matrix(&mut rng, a.t, config.d_a);
            let visual = random_matrix(&mut rng, a.t, config.d_v);
            VideoBag::new(format!("g{i}"), audio, visual)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<bool>> = (0..a.batch)
        .map(|_| {
            let mut l: Vec<bool> = (0..a.classes).map(|_| rng.random_bool(0.5)).collect();
            if !l.contains(&true) {
                let c = rng.random_range(0..a.classes);
                l[c] = true;
            }
            l
        })
        .collect();
    let batch: Vec<Example<'_>> = bags
        .iter()
        .zip(&labels)
        .map(|(bag, label)| Example { bag, label })
        .collect();
    let settings = LossSettings {
        mode: a.loss,
        smoothing: SmoothingConfig {
            eps_a: a.smooth_eps,
            eps_v: a.smooth_eps,
            k: None,
        },
        positive_only_wsl: false,
    };
    grad_check(
        &mut params,
        a.epsilon,
        |p| batch_loss(p, &batch, &settings).map(|b| b.total),
        |p| loss_and_grad(p, &batch, &settings).map(|b| b.total),
    )
}

/// Single-line JSON for stderr.
pub fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "kind": kind, "message": message }).to_string()
}
