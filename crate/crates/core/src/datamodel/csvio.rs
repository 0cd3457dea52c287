use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use super::{write_atomic, DenseAnnotation, EventSegment, Modality, Taxonomy, WeakLabel};
use crate::error::{Error, Result};

const WEAK_HEADER: [&str; 2] = ["video_id", "labels"];
const DENSE_HEADER: [&str; 5] = ["video_id", "modality", "class", "onset", "offset"];
const SEGMENT_HEADER: [&str; 6] = [
    "video_id",
    "modality",
    "class",
    "onset",
    "offset",
    "confidence",
];

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        reason: reason.into(),
    }
}

/// Iterates records as `(line, record)`; the first record must equal one of
/// `headers` and its index is returned alongside.
fn records(path: &Path, headers: &[&[&str]]) -> Result<(usize, Vec<(usize, csv::StringRecord)>)> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    let mut which = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if which.is_none() {
            let fields: Vec<&str> = rec.iter().collect();
            match headers.iter().position(|h| *h == fields.as_slice()) {
                Some(i) => which = Some(i),
                None => {
                    return Err(parse_err(
                        path,
                        line,
                        format!(
                            "expected header {:?}, found {fields:?}",
                            headers[0].join(",")
                        ),
                    ))
                }
            }
            continue;
        }
        out.push((line, rec));
    }
    match which {
        Some(i) => Ok((i, out)),
        None => Err(parse_err(path, 1, "missing header")),
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let io = |e: csv::Error| Error::Config(format!("csv serialization failed: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv serialization failed: {e}")))
}

/// Reads `video_id,labels` where labels are `;`-separated class names.
/// Duplicate video ids are merged by union.
pub fn load_weak_labels(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<WeakLabel>> {
    let (_, rows) = records(path, &[&WEAK_HEADER])?;
    let mut out: Vec<WeakLabel> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut unknown = BTreeSet::new();
    for (line, rec) in rows {
        if rec.len() != 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected 2 fields, found {}", rec.len()),
            ));
        }
        let vid = &rec[0];
        if vid.is_empty() {
            return Err(parse_err(path, line, "empty video_id"));
        }
        let slot = *index.entry(vid.to_string()).or_insert_with(|| {
            out.push(WeakLabel::new(vid, vec![false; taxonomy.len()]));
            out.len() - 1
        });
        for name in rec[1].split(';').map(str::trim).filter(|s| !s.is_empty()) {
            match taxonomy.index_of(name) {
                Some(c) => out[slot].classes[c] = true,
                None => {
                    unknown.insert(name.to_string());
                }
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownClasses(unknown.into_iter().collect()));
    }
    Ok(out)
}

pub fn write_weak_labels(path: &Path, labels: &[WeakLabel], taxonomy: &Taxonomy) -> Result<()> {
    let rows = labels.iter().map(|l| {
        vec![
            l.video_id.clone(),
            l.positives()
                .map(|c| taxonomy.name(c))
                .collect::<Vec<_>>()
                .join(";"),
        ]
    });
    write_atomic(path, &csv_bytes(&WEAK_HEADER, rows)?)
}

fn parse_segment_fields(
    path: &Path,
    line: usize,
    rec: &csv::StringRecord,
    taxonomy: &Taxonomy,
    allow_av: bool,
    unknown: &mut BTreeSet<String>,
) -> Result<Option<EventSegment>> {
    let modality: Modality = rec[1]
        .parse()
        .map_err(|_| parse_err(path, line, format!("unknown modality {:?}", &rec[1])))?;
    if modality == Modality::AudioVisual && !allow_av {
        return Err(parse_err(
            path,
            line,
            "audio-visual ground truth is derived and may not be stored",
        ));
    }
    let num = |i: usize, what: &str| -> Result<usize> {
        rec[i]
            .parse::<usize>()
            .map_err(|_| parse_err(path, line, format!("invalid {what} {:?}", &rec[i])))
    };
    let onset = num(3, "onset")?;
    let offset = num(4, "offset")?;
    if onset >= offset {
        return Err(parse_err(
            path,
            line,
            format!("onset {onset} must be before offset {offset}"),
        ));
    }
    match taxonomy.index_of(&rec[2]) {
        Some(class) => Ok(Some(EventSegment {
            class,
            modality,
            onset,
            offset,
        })),
        None => {
            unknown.insert(rec[2].to_string());
            Ok(None)
        }
    }
}

/// Reads dense annotations `video_id,modality,class,onset,offset`, grouped by
/// video in first-appearance order.
pub fn load_annotations(
    path: &Path,
    taxonomy: &Taxonomy,
) -> Result<Vec<(String, Vec<EventSegment>)>> {
    let (_, rows) = records(path, &[&DENSE_HEADER])?;
    let mut out: Vec<(String, Vec<EventSegment>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut unknown = BTreeSet::new();
    for (line, rec) in rows {
        if rec.len() != 5 {
            return Err(parse_err(
                path,
                line,
                format!("expected 5 fields, found {}", rec.len()),
            ));
        }
        let seg = parse_segment_fields(path, line, &rec, taxonomy, false, &mut unknown)?;
        let slot = *index.entry(rec[0].to_string()).or_insert_with(|| {
            out.push((rec[0].to_string(), Vec::new()));
            out.len() - 1
        });
        if let Some(s) = seg {
            out[slot].1.push(s);
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownClasses(unknown.into_iter().collect()));
    }
    Ok(out)
}

/// Writes the audio and visual events of each annotation (audio-visual is derived).
pub fn write_annotations(
    path: &Path,
    annotations: &[DenseAnnotation],
    taxonomy: &Taxonomy,
) -> Result<()> {
    let mut rows = Vec::new();
    for ann in annotations {
        for m in [Modality::Audio, Modality::Visual] {
            for s in ann.segments(m) {
                rows.push(vec![
                    ann.video_id.clone(),
                    m.as_str().to_string(),
                    taxonomy.name(s.class).to_string(),
                    s.onset.to_string(),
                    s.offset.to_string(),
                ]);
            }
        }
    }
    write_atomic(path, &csv_bytes(&DENSE_HEADER, rows)?)
}

/// A parsed event with an optional confidence (mean probability over the segment).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSegment {
    pub video_id: String,
    pub segment: EventSegment,
    pub confidence: Option<f64>,
}

pub fn write_segments_csv(
    path: &Path,
    segments: &[ScoredSegment],
    taxonomy: &Taxonomy,
) -> Result<()> {
    let rows = segments.iter().map(|s| {
        vec![
            s.video_id.clone(),
            s.segment.modality.as_str().to_string(),
            taxonomy.name(s.segment.class).to_string(),
            s.segment.onset.to_string(),
            s.segment.offset.to_string(),
            s.confidence.map_or(String::new(), |c| format!("{c:.6}")),
        ]
    });
    write_atomic(path, &csv_bytes(&SEGMENT_HEADER, rows)?)
}

/// Reads either the parse-output format (with confidence, audio-visual rows
/// allowed) or the dense-annotation format. The second element is `true` when
/// the file carried explicit audio-visual rows.
pub fn load_segments_csv(path: &Path, taxonomy: &Taxonomy) -> Result<(Vec<ScoredSegment>, bool)> {
    let (which, rows) = records(path, &[&SEGMENT_HEADER, &DENSE_HEADER])?;
    let scored = which == 0;
    let width = if scored { 6 } else { 5 };
    let mut out = Vec::new();
    let mut unknown = BTreeSet::new();
    for (line, rec) in rows {
        if rec.len() != width {
            return Err(parse_err(
                path,
                line,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        let Some(segment) = parse_segment_fields(path, line, &rec, taxonomy, scored, &mut unknown)?
        else {
            continue;
        };
        let confidence =
            if scored && !rec[5].is_empty() {
                Some(rec[5].parse::<f64>().map_err(|_| {
                    parse_err(path, line, format!("invalid confidence {:?}", &rec[5]))
                })?)
            } else {
                None
            };
        out.push(ScoredSegment {
            video_id: rec[0].to_string(),
            segment,
            confidence,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownClasses(unknown.into_iter().collect()));
    }
    Ok((out, scored))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub audio: PathBuf,
    pub visual: PathBuf,
}

/// Reads `video_id<TAB>audio_path<TAB>visual_path` lines. Relative paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(parse_err(
                path,
                i + 1,
                format!(
                    "expected 3 non-empty tab-separated fields, found {}",
                    fields.len()
                ),
            ));
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        out.push(ManifestEntry {
            video_id: fields[0].to_string(),
            audio: resolve(fields[1]),
            visual: resolve(fields[2]),
        });
    }
    Ok(out)
}

/// Writes manifest lines with paths exactly as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            e.video_id,
            e.audio.display(),
            e.visual.display()
        ));
    }
    write_atomic(path, text.as_bytes())
}
