//! Mini-batch training with step-decayed Adam, checkpoints and periodic
//! validation.
//!
//! Parameters are initialized from `ChaCha8Rng` stream 0 of the configured
//! seed; epoch `e` shuffles with stream `e + 1` of the same seed, so a run
//! resumed from a checkpoint sees the same batches as an uninterrupted one.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossMode, LossSettings, SmoothingConfig};
use crate::metrics::{evaluate as score, MetricReport, VideoParse, DEFAULT_IOU_THRESHOLD};
use crate::mmil::Pooling;
use crate::model::{loss_and_grad, predict, Example, ModelConfig, ModelParams, Temporal};
use crate::numeric::{adam_step, clip_grad_norm, AdamConfig, AdamState, Parameterized};

pub const HISTORY_FILE: &str = "history.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const BEST_CHECKPOINT: &str = "ckpt_best";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub seed: u64,
    pub width: usize,
    pub temporal: Temporal,
    pub pooling: Pooling,
    pub learned_attention: bool,
    pub loss: LossMode,
    pub smooth_eps_a: f64,
    pub smooth_eps_v: f64,
    /// Defaults to the number of classes.
    pub smooth_k: Option<usize>,
    /// Drops the negative-class term of the weak-supervision BCE.
    pub positive_only_wsl: bool,
    /// Global gradient-norm cap; off when unset.
    pub clip_grad_norm: Option<f64>,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_interval: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 40,
            lr0: 3e-4,
            lr_decay: 0.1,
            lr_step_epochs: 10,
            seed: 0,
            width: 512,
            temporal: Temporal::Han,
            pooling: Pooling::Attentive,
            learned_attention: false,
            loss: LossMode::Both,
            smooth_eps_a: 0.1,
            smooth_eps_v: 0.1,
            smooth_k: None,
            positive_only_wsl: false,
            clip_grad_norm: None,
            eval_interval: 1,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("lr_step_epochs", self.lr_step_epochs),
            ("width", self.width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config(format!(
                "lr_decay must be positive, got {}",
                self.lr_decay
            )));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "clip_grad_norm must be positive, got {c}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        self.smoothing()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn smoothing(&self) -> SmoothingConfig {
        SmoothingConfig {
            eps_a: self.smooth_eps_a,
            eps_v: self.smooth_eps_v,
            k: self.smooth_k,
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            mode: self.loss,
            smoothing: self.smoothing(),
            positive_only_wsl: self.positive_only_wsl,
        }
    }

    pub fn model_config(&self, d_a: usize, d_v: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            d_a,
            d_v,
            width: self.width,
            classes,
            temporal: self.temporal,
            pooling: self.pooling,
            learned_attention: self.learned_attention,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("TrainConfig serializes to TOML")
    }

    /// Hex SHA-256 of the TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// `lr0 * lr_decay ^ floor(epoch / lr_step_epochs)`, rounded to 15
/// significant digits so decimal schedules come out exact.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.lr_step_epochs.max(1)) as i32;
    let raw = cfg.lr0 * cfg.lr_decay.powi(k);
    format!("{raw:.14e}").parse().unwrap_or(raw)
}

/// Model, optimizer state and progress after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub config_digest: String,
    pub params: ModelParams,
    pub adam: AdamState,
}

const CKPT_MAGIC: &[u8; 4] = b"AVCK";
const CKPT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn enum_code<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn enum_decode<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Checkpoint(format!("unknown enum value {s:?}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.u64(self.epoch as u64);
        w.str(&self.config_digest);
        let mc = &self.params.config;
        for v in [mc.d_a, mc.d_v, mc.width, mc.classes] {
            w.u64(v as u64);
        }
        w.str(&enum_code(&mc.temporal));
        w.str(&enum_code(&mc.pooling));
        w.u8(mc.learned_attention as u8);

        let mut tensors = Vec::new();
        self.params.visit_params_ref("", &mut |name, v, _| {
            tensors.push((name.to_string(), v.to_vec()))
        });
        w.u32(tensors.len() as u32);
        for (name, v) in &tensors {
            w.str(name);
            w.f64s(v);
        }

        let a = &self.adam;
        for v in [a.config.beta1, a.config.beta2, a.config.eps] {
            w.f64(v);
        }
        w.u64(a.step);
        w.u32(a.first.len() as u32);
        for (m, v) in a.first.iter().zip(&a.second) {
            w.f64s(m);
            w.f64s(v);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(4)?;
        if magic != CKPT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                offset: 0,
                found: magic.try_into().expect("4 bytes"),
            });
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: CKPT_VERSION,
            });
        }
        let epoch = r.usize()?;
        let config_digest = r.str()?;
        let (d_a, d_v, width, classes) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let config = ModelConfig {
            d_a,
            d_v,
            width,
            classes,
            temporal: enum_decode(&r.str()?)?,
            pooling: enum_decode(&r.str()?)?,
            learned_attention: r.u8()? != 0,
        };
        config.validate()?;
        let mut params = ModelParams::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;

        let n = r.u32()? as usize;
        let mut stored = Vec::with_capacity(n);
        for _ in 0..n {
            stored.push((r.str()?, r.f64s()?));
        }
        let mut mismatch = None;
        let mut idx = 0;
        params.visit_params("", &mut |p| {
            match stored.get(idx) {
                Some((name, v)) if *name == p.name && v.len() == p.value.len() => {
                    p.value.copy_from_slice(v)
                }
                _ if mismatch.is_none() => mismatch = Some(p.name.clone()),
                _ => {}
            }
            idx += 1;
        });
        if let Some(name) =
            mismatch.or((idx != n).then(|| format!("{n} stored tensors, {idx} expected")))
        {
            return Err(Error::Checkpoint(format!(
                "parameter layout mismatch at {name}"
            )));
        }

        let adam_config = AdamConfig {
            beta1: f64::from_bits(r.u64()?),
            beta2: f64::from_bits(r.u64()?),
            eps: f64::from_bits(r.u64()?),
        };
        let step = r.u64()?;
        let moments = r.u32()? as usize;
        let mut adam = AdamState::new(adam_config);
        adam.step = step;
        for _ in 0..moments {
            adam.first.push(r.f64s()?);
            adam.second.push(r.f64s()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::PayloadMismatch {
                path: path.to_path_buf(),
                expected: r.pos as u64,
                found: bytes.len() as u64,
            });
        }
        Ok(Checkpoint {
            epoch,
            config_digest,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    /// Segment- and event-level Type@AV on the validation set.
    pub val_type_av: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best: Option<(usize, f64)>,
}

/// Thresholds snippet predictions for every video in parallel; output order
/// follows the dataset.
pub fn parse_dataset(
    params: &ModelParams,
    data: &Dataset,
    threshold: f64,
) -> Result<Vec<VideoParse>> {
    data.samples
        .par_iter()
        .map(|s| {
            let probs = predict(params, &s.bag)?;
            Ok(VideoParse::from_probs(
                s.bag.video_id.clone(),
                &probs,
                threshold,
            ))
        })
        .collect()
}

/// Parses and scores a densely annotated dataset. Parameters are not touched.
pub fn evaluate(params: &ModelParams, data: &Dataset, threshold: f64) -> Result<MetricReport> {
    data.validate_for_evaluation()?;
    let preds = parse_dataset(params, data, threshold)?;
    let gts: Vec<_> = data
        .samples
        .iter()
        .filter_map(|s| s.dense.as_ref())
        .collect();
    score(&preds, &gts, DEFAULT_IOU_THRESHOLD)
}

/// Validation reports for the epochs selected by `interval` (every
/// `interval`-th epoch and the last one); empty when `interval` is 0.
pub fn evaluate_during_training(
    data: &Dataset,
    snapshots: &[(usize, &ModelParams)],
    interval: usize,
    total_epochs: usize,
    threshold: f64,
) -> Result<Vec<(usize, MetricReport)>> {
    if interval == 0 {
        return Ok(Vec::new());
    }
    snapshots
        .iter()
        .filter(|(e, _)| should_evaluate(*e, interval, total_epochs))
        .map(|(e, p)| evaluate(p, data, threshold).map(|r| (*e, r)))
        .collect()
}

fn should_evaluate(epoch: usize, interval: usize, total: usize) -> bool {
    interval > 0 && (epoch.is_multiple_of(interval) || epoch == total)
}

/// Builds the initial model for `data` from init stream 0 of the seed.
pub fn init_params(cfg: &TrainConfig, data: &Dataset) -> Result<ModelParams> {
    let (d_a, d_v) = data
        .feature_dims()
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ModelParams::new(cfg.model_config(d_a, d_v, data.classes()), &mut rng)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn append_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if fresh {
        buf.push_str(header);
        buf.push('\n');
    }
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

fn fmt_loss(l: &LossBreakdown) -> String {
    format!(
        "{:.9},{:.9},{:.9},{:.9}",
        l.l_wsl, l.l_g_audio, l.l_g_visual, l.total
    )
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    fn write_history(&self, history: &[EpochRecord]) -> Result<()> {
        let mut out = String::from(
            "epoch,lr,l_wsl,l_g_a,l_g_v,total,val_segment_type_av,val_event_type_av\n",
        );
        for h in history {
            let (s, e) = h
                .val_type_av
                .map(|(s, e)| (format!("{s:.6}"), format!("{e:.6}")))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{:e},{},{s},{e}\n",
                h.epoch,
                h.lr,
                fmt_loss(&h.loss)
            ));
        }
        write_atomic(&self.path.join(HISTORY_FILE), out.as_bytes())
    }

    fn append_steps(&self, steps: &[StepRecord]) -> Result<()> {
        let lines: Vec<String> = steps
            .iter()
            .map(|s| format!("{},{},{}", s.epoch, s.step, fmt_loss(&s.loss)))
            .collect();
        append_lines(
            &self.path.join(LOSSES_FILE),
            "epoch,step,l_wsl,l_g_a,l_g_v,total",
            &lines,
        )
    }
}

/// Trains on `train`, optionally validating on `val`, starting fresh or from
/// `resume`. With a run directory, per-step losses, epoch history and one
/// checkpoint per epoch are written as training proceeds; a divergence error
/// leaves the previous checkpoint in place.
pub fn train(
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    run_dir: Option<&RunDir>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train.validate_for_training()?;
    let val = val.filter(|_| cfg.eval_interval > 0);
    if let Some(v) = val {
        v.validate_for_evaluation()?;
    }
    let digest = cfg.digest();
    let (mut params, mut adam, start) = match resume {
        Some(ck) => {
            if ck.config_digest != digest {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was written under config {} but the current config is {digest}",
                    ck.config_digest
                )));
            }
            let expect = init_params(cfg, train)?.config;
            if ck.params.config != expect {
                return Err(Error::Checkpoint(
                    "checkpoint model shape does not match the dataset".into(),
                ));
            }
            (ck.params, ck.adam, ck.epoch)
        }
        None => (
            init_params(cfg, train)?,
            AdamState::new(AdamConfig::default()),
            0,
        ),
    };
    let settings = cfg.loss_settings();
    let labels: Vec<&[bool]> = train
        .samples
        .iter()
        .map(|s| s.weak.as_ref().expect("validated").classes.as_slice())
        .collect();

    let mut history = Vec::new();
    let mut all_steps = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for epoch in start..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let order = epoch_order(cfg.seed, epoch, train.len());
        let mut steps = Vec::new();
        let mut sum = LossBreakdown::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| Example {
                    bag: &train.samples[i].bag,
                    label: labels[i],
                })
                .collect();
            params.zero_grads();
            let loss = loss_and_grad(&mut params, &batch, &settings)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    path: format!("loss at epoch {} step {step}", epoch + 1),
                });
            }
            if let Some(max) = cfg.clip_grad_norm {
                clip_grad_norm(&mut params, max);
            }
            adam_step(&mut params, &mut adam, lr)?;
            sum.accumulate(&loss, 1.0);
            steps.push(StepRecord {
                epoch: epoch + 1,
                step,
                loss,
            });
        }
        let mut mean = LossBreakdown::default();
        mean.accumulate(&sum, 1.0 / steps.len() as f64);

        let done = epoch + 1;
        let val_type_av = match val {
            Some(v) if should_evaluate(done, cfg.eval_interval, cfg.epochs) => {
                let r = evaluate(&params, v, cfg.threshold)?;
                Some((r.type_av.segment_f, r.type_av.event_f))
            }
            _ => None,
        };
        history.push(EpochRecord {
            epoch: done,
            lr,
            loss: mean,
            val_type_av,
        });
        log::info!(
            "epoch {done}/{} lr {lr:e} loss {:.5}{}",
            cfg.epochs,
            mean.total,
            val_type_av
                .map(|(s, e)| format!(" val Type@AV {s:.4}/{e:.4}"))
                .unwrap_or_default()
        );

        if let Some(dir) = run_dir {
            let ck = Checkpoint {
                epoch: done,
                config_digest: digest.clone(),
                params: params.clone(),
                adam: adam.clone(),
            };
            ck.save(&dir.path.join(checkpoint_name(done)))?;
            if let Some((s, _)) = val_type_av {
                if best.is_none_or(|(_, b)| s > b) {
                    ck.save(&dir.path.join(BEST_CHECKPOINT))?;
                }
            }
            dir.append_steps(&steps)?;
            dir.write_history(&history)?;
        }
        if let Some((s, _)) = val_type_av {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((done, s));
            }
        }
        all_steps.extend(steps);
    }
    Ok(TrainOutcome {
        params,
        adam,
        history,
        steps: all_steps,
        best,
    })
}
