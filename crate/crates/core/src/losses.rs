//! Weak-supervision loss, guided per-modality loss and label smoothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmil::{PoolGrads, PoolOutput};
use crate::numeric::{
    binary_cross_entropy, binary_cross_entropy_grad, positive_cross_entropy,
    positive_cross_entropy_grad,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub eps_a: f64,
    pub eps_v: f64,
    /// Size of the uniform prior. `None` uses the number of classes (at least 2).
    pub k: Option<usize>,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            eps_a: 0.1,
            eps_v: 0.1,
            k: None,
        }
    }
}

impl SmoothingConfig {
    pub const OFF: SmoothingConfig = SmoothingConfig {
        eps_a: 0.0,
        eps_v: 0.0,
        k: None,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, eps) in [("eps_a", self.eps_a), ("eps_v", self.eps_v)] {
            if !(0.0..1.0).contains(&eps) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {eps}"
                )));
            }
        }
        if let Some(k) = self.k {
            if k <= 1 {
                return Err(Error::InvalidArgument(format!(
                    "smoothing K must exceed 1, got {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn resolved_k(&self, classes: usize) -> usize {
        self.k.unwrap_or(classes.max(2))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum LossMode {
    #[serde(rename = "wsl")]
    #[value(name = "wsl")]
    WslOnly,
    #[serde(rename = "g")]
    #[value(name = "g")]
    GuidedOnly,
    #[default]
    #[serde(rename = "both")]
    #[value(name = "both")]
    Both,
}

impl LossMode {
    pub fn uses_wsl(self) -> bool {
        self != LossMode::GuidedOnly
    }

    pub fn uses_guided(self) -> bool {
        self != LossMode::WslOnly
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_wsl: f64,
    pub l_g_audio: f64,
    pub l_g_visual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.l_wsl += weight * other.l_wsl;
        self.l_g_audio += weight * other.l_g_audio;
        self.l_g_visual += weight * other.l_g_visual;
        self.total += weight * other.total;
    }
}

/// `(1 - eps) * y + eps / K` for multi-hot `y`.
///
/// Positives are evaluated as `1 - eps * (1 - 1/K)`, which is the same
/// quantity with one rounding fewer.
pub fn smooth_labels(y: &[bool], eps: f64, k: usize) -> Result<Vec<f64>> {
    if k <= 1 {
        return Err(Error::InvalidArgument(format!(
            "smoothing K must exceed 1, got {k}"
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "smoothing eps must lie in [0, 1), got {eps}"
        )));
    }
    let floor = eps / k as f64;
    let top = 1.0 - eps * (1.0 - 1.0 / k as f64);
    Ok(y.iter().map(|&pos| if pos { top } else { floor }).collect())
}

fn targets(y: &[bool]) -> Vec<f64> {
    y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// BCE between the clamped video probability and the hard weak label.
/// `positive_only` drops the `(1 - y) log(1 - p)` term.
pub fn wsl_loss(video: &[f64], y: &[bool], positive_only: bool) -> Result<f64> {
    if positive_only {
        positive_cross_entropy(video, &targets(y))
    } else {
        binary_cross_entropy(video, &targets(y))
    }
}

/// `(l_g_audio, l_g_visual)` against the smoothed weak label.
pub fn guided_loss(
    audio: &[f64],
    visual: &[f64],
    y: &[bool],
    cfg: &SmoothingConfig,
) -> Result<(f64, f64)> {
    let k = cfg.resolved_k(y.len());
    let ya = smooth_labels(y, cfg.eps_a, k)?;
    let yv = smooth_labels(y, cfg.eps_v, k)?;
    Ok((
        binary_cross_entropy(audio, &ya)?,
        binary_cross_entropy(visual, &yv)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub mode: LossMode,
    pub smoothing: SmoothingConfig,
    pub positive_only_wsl: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            mode: LossMode::Both,
            smoothing: SmoothingConfig::default(),
            positive_only_wsl: false,
        }
    }
}

fn check_len(out: &PoolOutput, y: &[bool]) -> Result<()> {
    if out.video.len() != y.len() {
        return Err(Error::shape("loss targets", out.video.len(), y.len()));
    }
    Ok(())
}

/// Disabled terms are reported as zero.
pub fn total_loss(out: &PoolOutput, y: &[bool], settings: &LossSettings) -> Result<LossBreakdown> {
    check_len(out, y)?;
    let mut b = LossBreakdown::default();
    if settings.mode.uses_wsl() {
        b.l_wsl = wsl_loss(&out.video, y, settings.positive_only_wsl)?;
    }
    if settings.mode.uses_guided() {
        (b.l_g_audio, b.l_g_visual) = guided_loss(&out.audio, &out.visual, y, &settings.smoothing)?;
    }
    b.total = b.l_wsl + b.l_g_audio + b.l_g_visual;
    Ok(b)
}

/// Gradient of [`total_loss`] with respect to the pooled outputs, scaled by
/// `weight`.
pub fn total_loss_grad(
    out: &PoolOutput,
    y: &[bool],
    settings: &LossSettings,
    weight: f64,
) -> Result<PoolGrads> {
    check_len(out, y)?;
    let c = y.len();
    let mut grads = PoolGrads {
        video: vec![0.0; c],
        audio: vec![0.0; c],
        visual: vec![0.0; c],
    };
    if settings.mode.uses_wsl() {
        let t = targets(y);
        grads.video = if settings.positive_only_wsl {
            positive_cross_entropy_grad(&out.video_raw, &t)?
        } else {
            binary_cross_entropy_grad(&out.video_raw, &t)?
        };
    }
    if settings.mode.uses_guided() {
        let k = settings.smoothing.resolved_k(c);
        grads.audio =
            binary_cross_entropy_grad(&out.audio, &smooth_labels(y, settings.smoothing.eps_a, k)?)?;
        grads.visual = binary_cross_entropy_grad(
            &out.visual,
            &smooth_labels(y, settings.smoothing.eps_v, k)?,
        )?;
    }
    for g in [&mut grads.video, &mut grads.audio, &mut grads.visual] {
        g.iter_mut().for_each(|v| *v *= weight);
    }
    Ok(grads)
}
