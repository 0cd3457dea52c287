//! Snippet classification and multimodal multiple-instance pooling.
//!
//! A shared classifier turns every audio and visual snippet into per-class
//! probabilities; the audio-visual probability is their product. Pooling
//! reduces the `T x 2 x C` probability tensor `P` to video-level
//! probabilities:
//!
//! ```text
//! p̄   = Σ_t Σ_m (W_tp ⊙ W_av ⊙ P)[t, m, :]
//! p̄_a = Σ_t (W_tp ⊙ P)[t, 0, :]
//! p̄_v = Σ_t (W_tp ⊙ P)[t, 1, :]
//! ```
//!
//! For attentive pooling `W_tp` is a softmax over time and `W_av` a softmax
//! over modalities, both computed from the snippet features. Max and mean
//! pooling substitute hard and uniform weights. `p̄` can exceed 1, so it is
//! clamped before any loss sees it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{EventSegment, LabelGrid, Modality};
use crate::error::{Error, Result};
use crate::numeric::{
    join_name, sigmoid, softmax_backward, softmax_in_place, LinearLayer, Matrix, ParamRef,
    Parameterized, Tensor3, PROB_MAX, PROB_MIN,
};

/// Index of the audio modality along the tensor's second axis.
pub const AUDIO: usize = 0;
/// Index of the visual modality along the tensor's second axis.
pub const VISUAL: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
    #[default]
    Attentive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmilParams {
    /// Shared between the audio and visual streams.
    pub classifier: LinearLayer,
    /// Bias-free: a bias would cancel in both softmaxes.
    pub temporal_head: LinearLayer,
    pub modality_head: LinearLayer,
}

impl MmilParams {
    pub fn new<R: Rng + ?Sized>(width: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            classifier: LinearLayer::new(width, classes, true, rng),
            temporal_head: LinearLayer::new(width, classes, false, rng),
            modality_head: LinearLayer::new(width, classes, false, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn width(&self) -> usize {
        self.classifier.in_dim()
    }
}

impl Parameterized for MmilParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        self.classifier
            .visit_params(&join_name(prefix, "classifier"), f);
        self.temporal_head
            .visit_params(&join_name(prefix, "temporal_head"), f);
        self.modality_head
            .visit_params(&join_name(prefix, "modality_head"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64], &[f64])) {
        self.classifier
            .visit_params_ref(&join_name(prefix, "classifier"), f);
        self.temporal_head
            .visit_params_ref(&join_name(prefix, "temporal_head"), f);
        self.modality_head
            .visit_params_ref(&join_name(prefix, "modality_head"), f);
    }
}

/// Per-snippet probabilities, each `T x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetProbs {
    pub audio: Matrix,
    pub visual: Matrix,
    pub audio_visual: Matrix,
}

impl SnippetProbs {
    /// Derives the audio-visual probabilities as the elementwise product.
    pub fn new(audio: Matrix, visual: Matrix) -> Result<Self> {
        if audio.shape() != visual.shape() {
            return Err(Error::shape(
                "SnippetProbs",
                format!("{:?}", audio.shape()),
                format!("{:?}", visual.shape()),
            ));
        }
        let mut audio_visual = audio.clone();
        for (av, v) in audio_visual.data_mut().iter_mut().zip(visual.data()) {
            *av *= v;
        }
        Ok(Self {
            audio,
            visual,
            audio_visual,
        })
    }

    pub fn snippets(&self) -> usize {
        self.audio.rows()
    }

    pub fn classes(&self) -> usize {
        self.audio.cols()
    }

    pub fn get(&self, modality: Modality) -> &Matrix {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
            Modality::AudioVisual => &self.audio_visual,
        }
    }

    /// `T x 2 x C` tensor with audio at index 0 and visual at index 1.
    pub fn tensor(&self) -> Tensor3 {
        Tensor3::stack_modalities(&[&self.audio, &self.visual])
            .expect("shapes checked on construction")
    }
}

/// Video-level pooling result.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolOutput {
    /// Clamped into `[PROB_MIN, PROB_MAX]`.
    pub video: Vec<f64>,
    /// Before clamping; may exceed 1 for attentive pooling.
    pub video_raw: Vec<f64>,
    pub clamped: Vec<bool>,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub temporal_weights: Tensor3,
    pub modality_weights: Tensor3,
}

fn check_tc(context: &'static str, m: &Matrix, t: usize, c: usize) -> Result<()> {
    if m.shape() != (t, c) {
        return Err(Error::shape(
            context,
            format!("{t}x{c}"),
            format!("{:?}", m.shape()),
        ));
    }
    Ok(())
}

fn check_features(ha: &Matrix, hv: &Matrix, width: usize) -> Result<()> {
    if ha.shape() != hv.shape() {
        return Err(Error::shape(
            "snippet features",
            format!("{:?}", ha.shape()),
            format!("{:?}", hv.shape()),
        ));
    }
    if ha.cols() != width {
        return Err(Error::shape("snippet feature width", width, ha.cols()));
    }
    Ok(())
}

/// `p = sigmoid(FC(ĥf))` for both streams with the same layer.
pub fn classify_snippets(ha: &Matrix, hv: &Matrix, params: &MmilParams) -> Result<SnippetProbs> {
    check_features(ha, hv, params.width())?;
    let pa = params.classifier.forward(ha)?.map(sigmoid);
    let pv = params.classifier.forward(hv)?.map(sigmoid);
    SnippetProbs::new(pa, pv)
}

/// Backward through the shared classifier; returns `(dha, dhv)`.
pub fn classify_backward(
    params: &mut MmilParams,
    ha: &Matrix,
    hv: &Matrix,
    probs: &SnippetProbs,
    dpa: &Matrix,
    dpv: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let through_sigmoid = |p: &Matrix, dp: &Matrix| -> Matrix {
        let mut out = dp.clone();
        for (o, &p) in out.data_mut().iter_mut().zip(p.data()) {
            *o *= p * (1.0 - p);
        }
        out
    };
    let dha = params
        .classifier
        .backward(ha, &through_sigmoid(&probs.audio, dpa))?;
    let dhv = params
        .classifier
        .backward(hv, &through_sigmoid(&probs.visual, dpv))?;
    Ok((dha, dhv))
}

/// Combines attention weights with probabilities. All three tensors must be
/// `T x 2 x C`.
pub fn pool_with_weights(
    temporal: Tensor3,
    modality: Tensor3,
    probs: &Tensor3,
) -> Result<PoolOutput> {
    let (t_len, m_len, c_len) = probs.dims();
    if m_len != 2 || temporal.dims() != probs.dims() || modality.dims() != probs.dims() {
        return Err(Error::shape(
            "pool_with_weights",
            format!("{t_len}x2x{c_len}"),
            format!(
                "{:?} / {:?} / {:?}",
                temporal.dims(),
                modality.dims(),
                probs.dims()
            ),
        ));
    }
    let mut video_raw = vec![0.0; c_len];
    let mut audio = vec![0.0; c_len];
    let mut visual = vec![0.0; c_len];
    for c in 0..c_len {
        for t in 0..t_len {
            for m in 0..2 {
                let wp = temporal.get(t, m, c) * probs.get(t, m, c);
                video_raw[c] += wp * modality.get(t, m, c);
                if m == AUDIO {
                    audio[c] += wp;
                } else {
                    visual[c] += wp;
                }
            }
        }
    }
    let video = video_raw
        .iter()
        .map(|&p| p.clamp(PROB_MIN, PROB_MAX))
        .collect();
    let clamped = video_raw
        .iter()
        .map(|&p| !(PROB_MIN..=PROB_MAX).contains(&p))
        .collect();
    Ok(PoolOutput {
        video,
        video_raw,
        clamped,
        audio,
        visual,
        temporal_weights: temporal,
        modality_weights: modality,
    })
}

/// Attention logits from the two heads: `(F_tp, F_av)`, each `T x 2 x C`.
fn attention_logits(ha: &Matrix, hv: &Matrix, params: &MmilParams) -> Result<(Tensor3, Tensor3)> {
    let ftp = Tensor3::stack_modalities(&[
        &params.temporal_head.forward(ha)?,
        &params.temporal_head.forward(hv)?,
    ])?;
    let fav = Tensor3::stack_modalities(&[
        &params.modality_head.forward(ha)?,
        &params.modality_head.forward(hv)?,
    ])?;
    Ok((ftp, fav))
}

fn softmax_time(logits: &Tensor3) -> Tensor3 {
    let (t_len, m_len, c_len) = logits.dims();
    let mut out = logits.clone();
    let mut buf = vec![0.0; t_len];
    for m in 0..m_len {
        for c in 0..c_len {
            for (t, b) in buf.iter_mut().enumerate() {
                *b = logits.get(t, m, c);
            }
            softmax_in_place(&mut buf);
            for (t, &b) in buf.iter().enumerate() {
                out.set(t, m, c, b);
            }
        }
    }
    out
}

fn softmax_modality(logits: &Tensor3) -> Tensor3 {
    let (t_len, m_len, c_len) = logits.dims();
    let mut out = logits.clone();
    let mut buf = vec![0.0; m_len];
    for t in 0..t_len {
        for c in 0..c_len {
            for (m, b) in buf.iter_mut().enumerate() {
                *b = logits.get(t, m, c);
            }
            softmax_in_place(&mut buf);
            for (m, &b) in buf.iter().enumerate() {
                out.set(t, m, c, b);
            }
        }
    }
    out
}

pub fn attentive_pool(
    ha: &Matrix,
    hv: &Matrix,
    probs: &SnippetProbs,
    params: &MmilParams,
) -> Result<PoolOutput> {
    check_features(ha, hv, params.width())?;
    let (t, c) = (ha.rows(), params.classes());
    check_tc("attentive_pool audio probs", &probs.audio, t, c)?;
    check_tc("attentive_pool visual probs", &probs.visual, t, c)?;
    let (ftp, fav) = attention_logits(ha, hv, params)?;
    pool_with_weights(softmax_time(&ftp), softmax_modality(&fav), &probs.tensor())
}

/// Hard weights: per modality the temporal weight sits on the most confident
/// snippet; the modality weight selects the modality holding the overall
/// maximum. Ties resolve to the earliest snippet and to audio.
pub fn max_pool(probs: &SnippetProbs) -> Result<PoolOutput> {
    let p = probs.tensor();
    let (t_len, _, c_len) = p.dims();
    let mut temporal = Tensor3::zeros(t_len, 2, c_len);
    let mut modality = Tensor3::zeros(t_len, 2, c_len);
    for c in 0..c_len {
        let mut best = [(0usize, f64::NEG_INFINITY); 2];
        for (m, b) in best.iter_mut().enumerate() {
            for t in 0..t_len {
                if p.get(t, m, c) > b.1 {
                    *b = (t, p.get(t, m, c));
                }
            }
            temporal.set(b.0, m, c, 1.0);
        }
        let winner = if best[VISUAL].1 > best[AUDIO].1 {
            VISUAL
        } else {
            AUDIO
        };
        for t in 0..t_len {
            modality.set(t, winner, c, 1.0);
        }
    }
    pool_with_weights(temporal, modality, &p)
}

/// Uniform weights `1/T` over time and `1/2` over modalities.
pub fn mean_pool(probs: &SnippetProbs) -> Result<PoolOutput> {
    let p = probs.tensor();
    let (t_len, _, c_len) = p.dims();
    let temporal = Tensor3::from_vec(t_len, 2, c_len, vec![1.0 / t_len as f64; t_len * 2 * c_len])?;
    let modality = Tensor3::from_vec(t_len, 2, c_len, vec![0.5; t_len * 2 * c_len])?;
    pool_with_weights(temporal, modality, &p)
}

pub fn pool(
    pooling: Pooling,
    ha: &Matrix,
    hv: &Matrix,
    probs: &SnippetProbs,
    params: &MmilParams,
) -> Result<PoolOutput> {
    match pooling {
        Pooling::Attentive => attentive_pool(ha, hv, probs, params),
        Pooling::Max => max_pool(probs),
        Pooling::Mean => mean_pool(probs),
    }
}

/// Upstream gradients with respect to the pooled outputs. `video` is taken
/// with respect to the unclamped `p̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolGrads {
    pub video: Vec<f64>,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
}

/// Backward through pooling. Returns `(dpa, dpv, dha, dhv)`; the feature
/// gradients are zero unless pooling is attentive.
pub fn pool_backward(
    pooling: Pooling,
    params: &mut MmilParams,
    ha: &Matrix,
    hv: &Matrix,
    probs: &SnippetProbs,
    out: &PoolOutput,
    grads: &PoolGrads,
) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
    let p = probs.tensor();
    let (t_len, _, c_len) = p.dims();
    let (wtp, wav) = (&out.temporal_weights, &out.modality_weights);
    let mut dp = [Matrix::zeros(t_len, c_len), Matrix::zeros(t_len, c_len)];
    let mut dwtp = Tensor3::zeros(t_len, 2, c_len);
    let mut dwav = Tensor3::zeros(t_len, 2, c_len);
    for c in 0..c_len {
        let g = grads.video[c];
        for t in 0..t_len {
            for m in 0..2 {
                let gm = if m == AUDIO {
                    grads.audio[c]
                } else {
                    grads.visual[c]
                };
                let (w1, w2, pr) = (wtp.get(t, m, c), wav.get(t, m, c), p.get(t, m, c));
                dp[m].set(t, c, g * w1 * w2 + gm * w1);
                dwtp.set(t, m, c, g * w2 * pr + gm * pr);
                dwav.set(t, m, c, g * w1 * pr);
            }
        }
    }
    let [dpa, dpv] = dp;
    if pooling != Pooling::Attentive {
        let z = Matrix::zeros(ha.rows(), ha.cols());
        return Ok((dpa, dpv, z.clone(), z));
    }

    // softmax backward over time for W_tp and over modality for W_av
    let mut dftp = [Matrix::zeros(t_len, c_len), Matrix::zeros(t_len, c_len)];
    for (m, dft) in dftp.iter_mut().enumerate() {
        for c in 0..c_len {
            let y: Vec<f64> = (0..t_len).map(|t| wtp.get(t, m, c)).collect();
            let dy: Vec<f64> = (0..t_len).map(|t| dwtp.get(t, m, c)).collect();
            for (t, g) in softmax_backward(&y, &dy).into_iter().enumerate() {
                dft.set(t, c, g);
            }
        }
    }
    let mut dfav = [Matrix::zeros(t_len, c_len), Matrix::zeros(t_len, c_len)];
    for t in 0..t_len {
        for c in 0..c_len {
            let y = [wav.get(t, AUDIO, c), wav.get(t, VISUAL, c)];
            let dy = [dwav.get(t, AUDIO, c), dwav.get(t, VISUAL, c)];
            let g = softmax_backward(&y, &dy);
            dfav[AUDIO].set(t, c, g[0]);
            dfav[VISUAL].set(t, c, g[1]);
        }
    }
    let mut dha = params.temporal_head.backward(ha, &dftp[AUDIO])?;
    let mut dhv = params.temporal_head.backward(hv, &dftp[VISUAL])?;
    dha.add_assign(&params.modality_head.backward(ha, &dfav[AUDIO])?)?;
    dhv.add_assign(&params.modality_head.backward(hv, &dfav[VISUAL])?)?;
    Ok((dpa, dpv, dha, dhv))
}

/// A predicted event with its mean probability over the covered snippets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParsedEvent {
    pub segment: EventSegment,
    pub confidence: f64,
}

/// Thresholds snippet probabilities (`p >= threshold`) and groups maximal
/// runs of positive snippets into events, for audio, visual and audio-visual.
pub fn parse_video(probs: &SnippetProbs, threshold: f64) -> Vec<ParsedEvent> {
    let mut out = Vec::new();
    for modality in Modality::ALL {
        let p = probs.get(modality);
        for segment in LabelGrid::from_probs(p, threshold).segments(modality) {
            let sum: f64 = (segment.onset..segment.offset)
                .map(|t| p.get(t, segment.class))
                .sum();
            out.push(ParsedEvent {
                segment,
                confidence: sum / segment.len() as f64,
            });
        }
    }
    out
}
