//! Bags, labels, annotations, their on-disk formats and the synthetic
//! planted-event generator.

mod csvio;
mod dataset;
mod features;
mod synth;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub use csvio::{
    load_annotations, load_manifest, load_segments_csv, load_weak_labels, write_annotations,
    write_manifest, write_segments_csv, write_weak_labels, ManifestEntry, ScoredSegment,
};
pub use dataset::{
    Dataset, Sample, ANNOTATIONS_FILE, CLASSES_FILE, FEATURES_DIR, MANIFEST_FILE, WEAK_LABELS_FILE,
};
pub use features::{
    decode_features, encode_features, load_features, save_features, FeatureFile,
    FEATURE_HEADER_LEN, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synth::{synth_generate, SynthConfig, SynthDataset};

/// Default snippets per video (10 one-second snippets).
pub const DEFAULT_SNIPPETS: usize = 10;
/// Default number of event categories.
pub const DEFAULT_CLASSES: usize = 25;
/// Default visual feature width.
pub const DEFAULT_VISUAL_DIM: usize = 512;
/// Default audio feature width.
pub const DEFAULT_AUDIO_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Audio,
    Visual,
    AudioVisual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Visual, Modality::AudioVisual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
            Modality::AudioVisual => "audio-visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "visual" => Ok(Modality::Visual),
            "audio-visual" => Ok(Modality::AudioVisual),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality {other:?}"
            ))),
        }
    }
}

/// Ordered list of event category names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Taxonomy {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains([',', ';', '\t', '\n']) {
                return Err(Error::InvalidArgument(format!("invalid class name {n:?}")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate class name {n:?}"
                )));
            }
        }
        if names.is_empty() {
            return Err(Error::InvalidArgument("empty class taxonomy".into()));
        }
        Ok(Self { names, index })
    }

    /// `class_0 .. class_{C-1}`
    pub fn synthetic(classes: usize) -> Self {
        Self::new((0..classes).map(|i| format!("class_{i}")).collect())
            .expect("valid generated names")
    }

    /// One class name per line; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One video's audio and visual snippet features.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBag {
    pub video_id: String,
    pub audio: Matrix,
    pub visual: Matrix,
}

impl VideoBag {
    pub fn new(video_id: impl Into<String>, audio: Matrix, visual: Matrix) -> Result<Self> {
        if audio.rows() != visual.rows() {
            return Err(Error::shape(
                "VideoBag",
                format!("{} visual snippets", audio.rows()),
                visual.rows(),
            ));
        }
        if audio.rows() == 0 {
            return Err(Error::InvalidArgument(
                "a video needs at least one snippet".into(),
            ));
        }
        Ok(Self {
            video_id: video_id.into(),
            audio,
            visual,
        })
    }

    pub fn snippets(&self) -> usize {
        self.audio.rows()
    }
}

/// Video-level multi-hot label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakLabel {
    pub video_id: String,
    pub classes: Vec<bool>,
}

impl WeakLabel {
    pub fn new(video_id: impl Into<String>, classes: Vec<bool>) -> Self {
        Self {
            video_id: video_id.into(),
            classes,
        }
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }

    pub fn is_empty(&self) -> bool {
        !self.classes.iter().any(|&b| b)
    }

    pub fn targets(&self) -> Vec<f64> {
        self.classes
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// A maximal run of positive snippets `[onset, offset)` in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventSegment {
    pub class: usize,
    pub modality: Modality,
    pub onset: usize,
    pub offset: usize,
}

impl EventSegment {
    pub fn new(class: usize, modality: Modality, onset: usize, offset: usize) -> Result<Self> {
        if onset >= offset {
            return Err(Error::InvalidArgument(format!(
                "segment onset {onset} must be before offset {offset}"
            )));
        }
        Ok(Self {
            class,
            modality,
            onset,
            offset,
        })
    }

    pub fn len(&self) -> usize {
        self.offset - self.onset
    }

    pub fn is_empty(&self) -> bool {
        self.offset <= self.onset
    }

    /// Intersection over union of two intervals, ignoring class and modality.
    pub fn iou(&self, other: &EventSegment) -> f64 {
        let inter = self
            .offset
            .min(other.offset)
            .saturating_sub(self.onset.max(other.onset));
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

/// Per-snippet multi-hot labels, `T x C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    snippets: usize,
    classes: usize,
    cells: Vec<bool>,
}

impl LabelGrid {
    pub fn empty(snippets: usize, classes: usize) -> Self {
        Self {
            snippets,
            classes,
            cells: vec![false; snippets * classes],
        }
    }

    pub fn from_fn(snippets: usize, classes: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut g = Self::empty(snippets, classes);
        for t in 0..snippets {
            for c in 0..classes {
                g.cells[t * classes + c] = f(t, c);
            }
        }
        g
    }

    /// Rasterizes segments; segments must lie within `[0, snippets)`.
    pub fn from_segments<'a>(
        snippets: usize,
        classes: usize,
        segments: impl IntoIterator<Item = &'a EventSegment>,
    ) -> Result<Self> {
        let mut g = Self::empty(snippets, classes);
        for s in segments {
            if s.offset > snippets || s.class >= classes || s.onset >= s.offset {
                return Err(Error::InvalidArgument(format!(
                    "segment {s:?} outside a {snippets}-snippet, {classes}-class grid"
                )));
            }
            for t in s.onset..s.offset {
                g.set(t, s.class, true);
            }
        }
        Ok(g)
    }

    /// Thresholds a `T x C` probability matrix (`prob >= threshold` is positive).
    pub fn from_probs(probs: &Matrix, threshold: f64) -> Self {
        Self::from_fn(probs.rows(), probs.cols(), |t, c| {
            probs.get(t, c) >= threshold
        })
    }

    pub fn snippets(&self) -> usize {
        self.snippets
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize) -> bool {
        self.cells[t * self.classes + c]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, v: bool) {
        self.cells[t * self.classes + c] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Cell-wise product (logical AND).
    pub fn and(&self, other: &LabelGrid) -> Result<LabelGrid> {
        self.check_same_shape(other)?;
        Ok(LabelGrid {
            snippets: self.snippets,
            classes: self.classes,
            cells: self
                .cells
                .iter()
                .zip(&other.cells)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &LabelGrid) -> Result<()> {
        if (self.snippets, self.classes) != (other.snippets, other.classes) {
            return Err(Error::shape(
                "LabelGrid",
                format!("{}x{}", self.snippets, self.classes),
                format!("{}x{}", other.snippets, other.classes),
            ));
        }
        Ok(())
    }

    /// Classes positive in any snippet.
    pub fn any_over_time(&self) -> Vec<bool> {
        (0..self.classes)
            .map(|c| (0..self.snippets).any(|t| self.get(t, c)))
            .collect()
    }

    /// Maximal runs of positive snippets per class, ordered by class then onset.
    pub fn segments(&self, modality: Modality) -> Vec<EventSegment> {
        let mut out = Vec::new();
        for c in 0..self.classes {
            let mut start = None;
            for t in 0..=self.snippets {
                let on = t < self.snippets && self.get(t, c);
                match (on, start) {
                    (true, None) => start = Some(t),
                    (false, Some(s)) => {
                        out.push(EventSegment {
                            class: c,
                            modality,
                            onset: s,
                            offset: t,
                        });
                        start = None;
                    }
                    _ => {}
                }
            }
        }
        out
    }
}

/// Dense per-second ground truth. The audio-visual grid is always the
/// cell-wise product of the audio and visual grids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseAnnotation {
    pub video_id: String,
    audio: LabelGrid,
    visual: LabelGrid,
    audio_visual: LabelGrid,
}

impl DenseAnnotation {
    pub fn from_grids(
        video_id: impl Into<String>,
        audio: LabelGrid,
        visual: LabelGrid,
    ) -> Result<Self> {
        let audio_visual = audio.and(&visual)?;
        Ok(Self {
            video_id: video_id.into(),
            audio,
            visual,
            audio_visual,
        })
    }

    /// Builds from audio/visual segments; audio-visual segments are rejected.
    pub fn from_segments(
        video_id: impl Into<String>,
        snippets: usize,
        classes: usize,
        segments: &[EventSegment],
    ) -> Result<Self> {
        if let Some(s) = segments
            .iter()
            .find(|s| s.modality == Modality::AudioVisual)
        {
            return Err(Error::InvalidArgument(format!(
                "audio-visual ground truth is derived, got stored segment {s:?}"
            )));
        }
        let audio = LabelGrid::from_segments(
            snippets,
            classes,
            segments.iter().filter(|s| s.modality == Modality::Audio),
        )?;
        let visual = LabelGrid::from_segments(
            snippets,
            classes,
            segments.iter().filter(|s| s.modality == Modality::Visual),
        )?;
        Self::from_grids(video_id, audio, visual)
    }

    pub fn grid(&self, modality: Modality) -> &LabelGrid {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
            Modality::AudioVisual => &self.audio_visual,
        }
    }

    pub fn snippets(&self) -> usize {
        self.audio.snippets()
    }

    pub fn classes(&self) -> usize {
        self.audio.classes()
    }

    pub fn segments(&self, modality: Modality) -> Vec<EventSegment> {
        self.grid(modality).segments(modality)
    }

    /// Video-level label: OR over time and modality.
    pub fn weak_label(&self) -> WeakLabel {
        let a = self.audio.any_over_time();
        let v = self.visual.any_over_time();
        WeakLabel::new(
            self.video_id.clone(),
            a.iter().zip(&v).map(|(x, y)| *x || *y).collect(),
        )
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
