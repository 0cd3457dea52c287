//! Synthetic planted-event data.
//!
//! Each (class, modality) pair owns a random unit-norm prototype. Videos get
//! 1 to 3 classes; every class is audio-only, visual-only or present in both
//! streams, each active stream receiving its own independently placed
//! interval. Active prototypes are summed into the snippet features, scaled
//! by a per-modality gain, plus isotropic Gaussian noise.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DenseAnnotation, LabelGrid, Sample, Taxonomy, VideoBag};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub snippets: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    /// Fraction of discriminative signal shifted toward audio, in `[0, 1]`.
    pub modality_bias: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 100,
            snippets: super::DEFAULT_SNIPPETS,
            d_a: super::DEFAULT_AUDIO_DIM,
            d_v: super::DEFAULT_VISUAL_DIM,
            classes: super::DEFAULT_CLASSES,
            noise_sigma: 0.1,
            modality_bias: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_videos", self.n_videos),
            ("snippets", self.snippets),
            ("d_a", self.d_a),
            ("d_v", self.d_v),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.modality_bias) {
            return Err(Error::InvalidArgument(format!(
                "modality_bias must lie in [0, 1], got {}",
                self.modality_bias
            )));
        }
        Ok(())
    }

    pub fn audio_gain(&self) -> f64 {
        1.0 + self.modality_bias
    }

    pub fn visual_gain(&self) -> f64 {
        1.0 - self.modality_bias
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    /// `C x d_a` unit-norm audio prototypes.
    pub audio_prototypes: Matrix,
    /// `C x d_v` unit-norm visual prototypes.
    pub visual_prototypes: Matrix,
    pub dataset: Dataset,
}

fn unit_prototypes(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(classes, dim);
    for c in 0..classes {
        let row = m.row_mut(c);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    m
}

fn random_interval(rng: &mut ChaCha8Rng, snippets: usize) -> (usize, usize) {
    let len = rng.random_range(1..=snippets);
    let onset = rng.random_range(0..=snippets - len);
    (onset, onset + len)
}

/// Features are rounded to `f32` precision so that they survive the on-disk
/// format unchanged.
fn render(
    rng: &mut ChaCha8Rng,
    grid: &LabelGrid,
    prototypes: &Matrix,
    gain: f64,
    noise: &Normal<f64>,
) -> Matrix {
    let (t_len, dim) = (grid.snippets(), prototypes.cols());
    let mut m = Matrix::zeros(t_len, dim);
    for t in 0..t_len {
        let row = m.row_mut(t);
        for c in 0..grid.classes() {
            if grid.get(t, c) {
                for (x, p) in row.iter_mut().zip(prototypes.row(c)) {
                    *x += gain * p;
                }
            }
        }
        for x in row.iter_mut() {
            *x = f64::from((*x + noise.sample(rng)) as f32);
        }
    }
    m
}

/// Deterministic given `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    if cfg.classes > cfg.d_a.min(cfg.d_v) {
        log::warn!(
            "{} classes exceed the number of distinguishable prototypes in {} dimensions",
            cfg.classes,
            cfg.d_a.min(cfg.d_v)
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let audio_prototypes = unit_prototypes(&mut rng, cfg.classes, cfg.d_a);
    let visual_prototypes = unit_prototypes(&mut rng, cfg.classes, cfg.d_v);
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
    let width = (cfg.n_videos - 1).to_string().len().max(4);

    let mut samples = Vec::with_capacity(cfg.n_videos);
    for i in 0..cfg.n_videos {
        let video_id = format!("vid{i:0width$}");
        let k = rng.random_range(1..=cfg.classes.min(3));
        let chosen = sample(&mut rng, cfg.classes, k).into_vec();
        let mut audio = LabelGrid::empty(cfg.snippets, cfg.classes);
        let mut visual = LabelGrid::empty(cfg.snippets, cfg.classes);
        for &c in &chosen {
            // 0: audio only, 1: visual only, 2-3: both streams
            let pattern = rng.random_range(0..4);
            if pattern != 1 {
                let (on, off) = random_interval(&mut rng, cfg.snippets);
                (on..off).for_each(|t| audio.set(t, c, true));
            }
            if pattern != 0 {
                let (on, off) = random_interval(&mut rng, cfg.snippets);
                (on..off).for_each(|t| visual.set(t, c, true));
            }
        }
        let xa = render(
            &mut rng,
            &audio,
            &audio_prototypes,
            cfg.audio_gain(),
            &noise,
        );
        let xv = render(
            &mut rng,
            &visual,
            &visual_prototypes,
            cfg.visual_gain(),
            &noise,
        );
        let dense = DenseAnnotation::from_grids(video_id.clone(), audio, visual)?;
        samples.push(Sample {
            bag: VideoBag::new(video_id, xa, xv)?,
            weak: Some(dense.weak_label()),
            dense: Some(dense),
        });
    }
    Ok(SynthDataset {
        audio_prototypes,
        visual_prototypes,
        dataset: Dataset {
            taxonomy: Taxonomy::synthetic(cfg.classes),
            samples,
        },
    })
}
