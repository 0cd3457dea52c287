//! Segment-level and event-level F-scores per event type, with the Type@AV
//! and Event@AV aggregates.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::datamodel::{write_atomic, DenseAnnotation, EventSegment, LabelGrid, Modality};
use crate::error::{Error, Result};
use crate::mmil::SnippetProbs;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const FINAL_METRICS_FILE: &str = "final_metrics.csv";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// `2tp / (2tp + fp + fn)`, or 1 when all counts are zero.
    pub fn f_score(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

pub fn segment_counts(pred: &LabelGrid, gt: &LabelGrid) -> Result<ConfusionCounts> {
    pred.check_same_shape(gt)?;
    let mut c = ConfusionCounts::default();
    for t in 0..gt.snippets() {
        for k in 0..gt.classes() {
            match (pred.get(t, k), gt.get(t, k)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

pub fn segment_f(pred: &LabelGrid, gt: &LabelGrid) -> Result<f64> {
    segment_counts(pred, gt).map(|c| c.f_score())
}

fn check_no_overlap(events: &[EventSegment]) -> Result<()> {
    let mut sorted: Vec<&EventSegment> = events.iter().collect();
    sorted.sort_by_key(|e| (e.modality as u8, e.class, e.onset, e.offset));
    for w in sorted.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.modality == b.modality && a.class == b.class && b.onset < a.offset {
            return Err(Error::OverlappingSegments {
                class: a.class,
                a_on: a.onset,
                a_off: a.offset,
                b_on: b.onset,
                b_off: b.offset,
            });
        }
    }
    Ok(())
}

/// One-to-one matching of predicted to ground-truth events within the same
/// modality and class. Candidate pairs with IoU at or above the threshold are
/// taken greedily in descending IoU order, ties broken by predicted onset,
/// then ground-truth onset, then class.
///
/// Greedy matching is already maximum for thresholds of at least 0.5. Below
/// that it can miss matches, so augmenting paths are searched afterwards.
pub fn event_counts(
    pred: &[EventSegment],
    gt: &[EventSegment],
    iou_threshold: f64,
) -> Result<ConfusionCounts> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    check_no_overlap(pred)?;
    check_no_overlap(gt)?;

    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if p.class == g.class && p.modality == g.modality {
                let iou = p.iou(g);
                if iou >= iou_threshold {
                    pairs.push((iou, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(pred[a.1].onset.cmp(&pred[b.1].onset))
            .then(gt[a.2].onset.cmp(&gt[b.2].onset))
            .then(pred[a.1].class.cmp(&pred[b.1].class))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut adj = vec![Vec::new(); pred.len()];
    let mut match_of_pred: Vec<Option<usize>> = vec![None; pred.len()];
    let mut match_of_gt: Vec<Option<usize>> = vec![None; gt.len()];
    for &(_, i, j) in &pairs {
        adj[i].push(j);
        if match_of_pred[i].is_none() && match_of_gt[j].is_none() {
            match_of_pred[i] = Some(j);
            match_of_gt[j] = Some(i);
        }
    }
    for i in 0..pred.len() {
        if match_of_pred[i].is_none() {
            augment(
                i,
                &adj,
                &mut match_of_pred,
                &mut match_of_gt,
                &mut vec![false; gt.len()],
            );
        }
    }
    let tp = match_of_pred.iter().flatten().count();
    Ok(ConfusionCounts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    })
}

fn augment(
    i: usize,
    adj: &[Vec<usize>],
    match_of_pred: &mut [Option<usize>],
    match_of_gt: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for &j in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        let free = match match_of_gt[j] {
            None => true,
            Some(other) => augment(other, adj, match_of_pred, match_of_gt, seen),
        };
        if free {
            match_of_pred[i] = Some(j);
            match_of_gt[j] = Some(i);
            return true;
        }
    }
    false
}

pub fn event_f(pred: &[EventSegment], gt: &[EventSegment], iou_threshold: f64) -> Result<f64> {
    event_counts(pred, gt, iou_threshold).map(|c| c.f_score())
}

/// Thresholded predictions for one video, one grid per event type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoParse {
    pub video_id: String,
    pub audio: LabelGrid,
    pub visual: LabelGrid,
    pub audio_visual: LabelGrid,
}

impl VideoParse {
    /// Audio-visual predictions come from thresholding `p_a * p_v`.
    pub fn from_probs(video_id: impl Into<String>, probs: &SnippetProbs, threshold: f64) -> Self {
        Self {
            video_id: video_id.into(),
            audio: LabelGrid::from_probs(&probs.audio, threshold),
            visual: LabelGrid::from_probs(&probs.visual, threshold),
            audio_visual: LabelGrid::from_probs(&probs.audio_visual, threshold),
        }
    }

    /// Audio-visual predictions are the intersection of audio and visual.
    pub fn from_annotation(ann: &DenseAnnotation) -> Self {
        Self {
            video_id: ann.video_id.clone(),
            audio: ann.grid(Modality::Audio).clone(),
            visual: ann.grid(Modality::Visual).clone(),
            audio_visual: ann.grid(Modality::AudioVisual).clone(),
        }
    }

    /// Builds from explicit segments of all three types.
    pub fn from_segments(
        video_id: impl Into<String>,
        snippets: usize,
        classes: usize,
        segments: &[EventSegment],
    ) -> Result<Self> {
        let grid = |m: Modality| {
            LabelGrid::from_segments(
                snippets,
                classes,
                segments.iter().filter(|s| s.modality == m),
            )
        };
        Ok(Self {
            video_id: video_id.into(),
            audio: grid(Modality::Audio)?,
            visual: grid(Modality::Visual)?,
            audio_visual: grid(Modality::AudioVisual)?,
        })
    }

    pub fn grid(&self, modality: Modality) -> &LabelGrid {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
            Modality::AudioVisual => &self.audio_visual,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TypeScore {
    pub segment_f: f64,
    pub event_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoScores {
    pub video_id: String,
    pub audio: TypeScore,
    pub visual: TypeScore,
    pub audio_visual: TypeScore,
    /// Audio and visual counts pooled into one F per level.
    pub event_av: TypeScore,
}

pub fn score_video(
    pred: &VideoParse,
    gt: &DenseAnnotation,
    iou_threshold: f64,
) -> Result<VideoScores> {
    let mut scores = [TypeScore::default(); 3];
    let mut seg_pool = ConfusionCounts::default();
    let mut evt_pool = ConfusionCounts::default();
    for (i, m) in Modality::ALL.into_iter().enumerate() {
        let seg = segment_counts(pred.grid(m), gt.grid(m))?;
        let evt = event_counts(&pred.grid(m).segments(m), &gt.segments(m), iou_threshold)?;
        scores[i] = TypeScore {
            segment_f: seg.f_score(),
            event_f: evt.f_score(),
        };
        if m != Modality::AudioVisual {
            seg_pool = seg_pool + seg;
            evt_pool = evt_pool + evt;
        }
    }
    Ok(VideoScores {
        video_id: pred.video_id.clone(),
        audio: scores[0],
        visual: scores[1],
        audio_visual: scores[2],
        event_av: TypeScore {
            segment_f: seg_pool.f_score(),
            event_f: evt_pool.f_score(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub audio: TypeScore,
    pub visual: TypeScore,
    pub audio_visual: TypeScore,
    pub type_av: TypeScore,
    pub event_av: TypeScore,
    pub per_video: Vec<VideoScores>,
}

fn mean_score<'a>(scores: impl Iterator<Item = &'a TypeScore>, n: usize) -> TypeScore {
    let (s, e) = scores.fold((0.0, 0.0), |(s, e), t| (s + t.segment_f, e + t.event_f));
    TypeScore {
        segment_f: s / n as f64,
        event_f: e / n as f64,
    }
}

/// Per-type scores are means of the per-video F; Type@AV averages the three
/// types and Event@AV averages the per-video pooled F.
pub fn aggregate(per_video: Vec<VideoScores>) -> Result<MetricReport> {
    let n = per_video.len();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty report list".into(),
        ));
    }
    let audio = mean_score(per_video.iter().map(|v| &v.audio), n);
    let visual = mean_score(per_video.iter().map(|v| &v.visual), n);
    let audio_visual = mean_score(per_video.iter().map(|v| &v.audio_visual), n);
    let type_av = mean_score([audio, visual, audio_visual].iter(), 3);
    let event_av = mean_score(per_video.iter().map(|v| &v.event_av), n);
    Ok(MetricReport {
        audio,
        visual,
        audio_visual,
        type_av,
        event_av,
        per_video,
    })
}

/// Scores every prediction against the annotation with the same video id.
/// Per-video work runs on the rayon pool; results keep the prediction order.
pub fn evaluate(
    preds: &[VideoParse],
    gts: &[&DenseAnnotation],
    iou_threshold: f64,
) -> Result<MetricReport> {
    let index: std::collections::HashMap<&str, &DenseAnnotation> =
        gts.iter().map(|g| (g.video_id.as_str(), *g)).collect();
    let missing: Vec<String> = preds
        .iter()
        .filter(|p| !index.contains_key(p.video_id.as_str()))
        .map(|p| p.video_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnnotations(missing));
    }
    let per_video = preds
        .par_iter()
        .map(|p| score_video(p, index[p.video_id.as_str()], iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    aggregate(per_video)
}

impl MetricReport {
    pub fn rows(&self) -> [(&'static str, TypeScore); 5] {
        [
            ("Audio", self.audio),
            ("Visual", self.visual),
            ("AudioVisual", self.audio_visual),
            ("TypeAV", self.type_av),
            ("EventAV", self.event_av),
        ]
    }

    /// `type,segment_f,event_f` with one row per event type and aggregate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("type,segment_f,event_f\n");
        for (name, s) in self.rows() {
            out.push_str(&format!("{name},{:.6},{:.6}\n", s.segment_f, s.event_f));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn per_video_csv(&self) -> String {
        let mut out = String::from(
            "video_id,audio_segment_f,audio_event_f,visual_segment_f,visual_event_f,\
             audio_visual_segment_f,audio_visual_event_f,event_av_segment_f,event_av_event_f\n",
        );
        for v in &self.per_video {
            out.push_str(&v.video_id);
            for s in [v.audio, v.visual, v.audio_visual, v.event_av] {
                out.push_str(&format!(",{:.6},{:.6}", s.segment_f, s.event_f));
            }
            out.push('\n');
        }
        out
    }
}
