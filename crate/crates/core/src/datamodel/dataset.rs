use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    load_annotations, load_features, load_manifest, load_weak_labels, save_features,
    write_annotations, write_manifest, write_weak_labels, DenseAnnotation, ManifestEntry, Modality,
    Taxonomy, VideoBag, WeakLabel,
};
use crate::error::{Error, Result};

pub const CLASSES_FILE: &str = "classes.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const WEAK_LABELS_FILE: &str = "weak_labels.csv";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const FEATURES_DIR: &str = "features";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub bag: VideoBag,
    pub weak: Option<WeakLabel>,
    pub dense: Option<DenseAnnotation>,
}

/// Videos with their labels, sharing one class taxonomy.
///
/// On disk a dataset is a directory holding `classes.txt`, `manifest.tsv`,
/// `weak_labels.csv`, an optional `annotations.csv` and the feature files
/// referenced by the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.taxonomy.len()
    }

    /// Feature widths `(d_a, d_v)` of the first video.
    pub fn feature_dims(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.bag.audio.cols(), s.bag.visual.cols()))
    }

    /// Checks that the dataset is usable for weakly-supervised training.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let missing: Vec<String> = self
            .samples
            .iter()
            .filter(|s| s.weak.is_none())
            .map(|s| s.bag.video_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "missing weak labels for videos: {}",
                missing.join(", ")
            )));
        }
        let empty: Vec<String> = self
            .samples
            .iter()
            .filter(|s| s.weak.as_ref().is_some_and(WeakLabel::is_empty))
            .map(|s| s.bag.video_id.clone())
            .collect();
        if !empty.is_empty() {
            return Err(Error::EmptyWeakLabel(empty));
        }
        self.validate_dims()
    }

    /// Checks that every video carries dense annotations.
    pub fn validate_for_evaluation(&self) -> Result<()> {
        let missing: Vec<String> = self
            .samples
            .iter()
            .filter(|s| s.dense.is_none())
            .map(|s| s.bag.video_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingAnnotations(missing));
        }
        Ok(())
    }

    fn validate_dims(&self) -> Result<()> {
        let Some((da, dv)) = self.feature_dims() else {
            return Ok(());
        };
        for s in &self.samples {
            if (s.bag.audio.cols(), s.bag.visual.cols()) != (da, dv) {
                return Err(Error::shape(
                    "Dataset feature widths",
                    format!("({da}, {dv})"),
                    format!(
                        "({}, {}) for {}",
                        s.bag.audio.cols(),
                        s.bag.visual.cols(),
                        s.bag.video_id
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Splits off the samples from `at` onward into a second dataset.
    pub fn split_at(mut self, at: usize) -> (Dataset, Dataset) {
        let tail = self.samples.split_off(at.min(self.samples.len()));
        let taxonomy = self.taxonomy.clone();
        (
            self,
            Dataset {
                taxonomy,
                samples: tail,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let taxonomy = Taxonomy::load(&dir.join(CLASSES_FILE))?;
        let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;

        let bags = manifest
            .par_iter()
            .map(|e| {
                let a = load_features(&e.audio)?;
                let v = load_features(&e.visual)?;
                if a.modality != Modality::Audio || v.modality != Modality::Visual {
                    return Err(Error::InvalidArgument(format!(
                        "manifest entry {} lists files with modality tags {}/{}",
                        e.video_id, a.modality, v.modality
                    )));
                }
                VideoBag::new(e.video_id.clone(), a.features, v.features)
            })
            .collect::<Result<Vec<_>>>()?;

        let weak_path = dir.join(WEAK_LABELS_FILE);
        let mut weak: HashMap<String, WeakLabel> = if weak_path.exists() {
            load_weak_labels(&weak_path, &taxonomy)?
                .into_iter()
                .map(|w| (w.video_id.clone(), w))
                .collect()
        } else {
            HashMap::new()
        };
        let ann_path = dir.join(ANNOTATIONS_FILE);
        let mut dense_segments: HashMap<String, Vec<_>> = if ann_path.exists() {
            load_annotations(&ann_path, &taxonomy)?
                .into_iter()
                .collect()
        } else {
            HashMap::new()
        };
        let has_annotations = ann_path.exists();

        let mut samples = Vec::with_capacity(bags.len());
        for bag in bags {
            let dense = match dense_segments.remove(&bag.video_id) {
                Some(segs) => Some(DenseAnnotation::from_segments(
                    bag.video_id.clone(),
                    bag.snippets(),
                    taxonomy.len(),
                    &segs,
                )?),
                // listed in an annotation file but without events: nothing happens in it
                None if has_annotations => Some(DenseAnnotation::from_segments(
                    bag.video_id.clone(),
                    bag.snippets(),
                    taxonomy.len(),
                    &[],
                )?),
                None => None,
            };
            samples.push(Sample {
                weak: weak.remove(&bag.video_id),
                dense,
                bag,
            });
        }
        if !dense_segments.is_empty() {
            let mut ids: Vec<_> = dense_segments.into_keys().collect();
            ids.sort();
            log::warn!(
                "annotations for videos not in the manifest ignored: {}",
                ids.join(", ")
            );
        }
        Ok(Dataset { taxonomy, samples })
    }

    /// Writes the dataset directory. Feature files go to `features/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let feat_dir = dir.join(FEATURES_DIR);
        std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        self.taxonomy.save(&dir.join(CLASSES_FILE))?;

        let entries = self
            .samples
            .par_iter()
            .map(|s| {
                let id = &s.bag.video_id;
                let audio = PathBuf::from(FEATURES_DIR).join(format!("{id}_audio.feat"));
                let visual = PathBuf::from(FEATURES_DIR).join(format!("{id}_visual.feat"));
                save_features(&dir.join(&audio), &s.bag.audio, Modality::Audio)?;
                save_features(&dir.join(&visual), &s.bag.visual, Modality::Visual)?;
                Ok(ManifestEntry {
                    video_id: id.clone(),
                    audio,
                    visual,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_manifest(&dir.join(MANIFEST_FILE), &entries)?;

        let weak: Vec<WeakLabel> = self.samples.iter().filter_map(|s| s.weak.clone()).collect();
        write_weak_labels(&dir.join(WEAK_LABELS_FILE), &weak, &self.taxonomy)?;
        let dense: Vec<DenseAnnotation> = self
            .samples
            .iter()
            .filter_map(|s| s.dense.clone())
            .collect();
        if !dense.is_empty() {
            write_annotations(&dir.join(ANNOTATIONS_FILE), &dense, &self.taxonomy)?;
        }
        Ok(())
    }
}
