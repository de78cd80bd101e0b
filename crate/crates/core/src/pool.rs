//! Candidate frame pool construction.
//!
//! Before the policy ever sees a video, the pipeline narrows it to a pool of
//! question-relevant frames: the oracle names the visual elements the
//! question is about ([`extract_target_elements`]), a [`Detector`] scores how
//! confidently each frame shows any of them, and [`build_pool`] keeps the
//! frames clearing a confidence threshold (top-M by confidence when
//! oversubscribed, evenly spaced fallback when nothing qualifies).
//!
//! Detection is an interface: synthetic episodes answer from their embedded
//! element tags ([`TagDetector`]); real videos supply a detections file
//! ([`FileDetector`]) and precomputed frame features ([`load_feature_file`]).

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{ElementTag, FrameRecord, QuestionInstance};
use crate::error::{Error, Result};
use crate::oracle::{elements_parse, FrameRef, Oracle, OracleRequest, OracleRequestKind};

/// Number of uniformly spaced frames fed to element extraction.
pub const ELEMENT_EXTRACTION_FRAMES: usize = 8;

/// The question-relevant frames the policy selects from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    /// Pooled frames, strictly increasing temporal order, 1..=M of them.
    pub frames: Vec<FrameRecord>,
    /// Max detection confidence per pooled frame (aligned with `frames`).
    pub detection_scores: Vec<f64>,
    /// Text of the question this pool was built for.
    pub source_question: String,
}

impl CandidatePool {
    /// Number of pooled frames.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    /// True when the pool holds no frames (never produced by `build_pool`).
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Original video frame index of pool position `pos`.
    pub fn frame_index(&self, pos: usize) -> usize {
        self.frames[pos].index
    }

    /// Original frame indices for a list of pool positions.
    pub fn frame_indices(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.frame_index(p)).collect()
    }

    /// Borrowed feature slices in pool order, as the policy consumes them.
    pub fn features(&self) -> Vec<&[f64]> {
        self.frames.iter().map(|f| f.feature.as_slice()).collect()
    }
}

/// Scores how confidently a frame shows any of the queried elements.
pub trait Detector {
    /// Max detection confidence of any element of `elements` in `frame`;
    /// 0.0 when none is present.
    fn max_confidence(&self, frame: &FrameRecord, elements: &[String]) -> f64;
}

/// Answers from the element tags embedded in each frame record.
#[derive(Debug, Clone, Copy, Default)]
pub struct TagDetector;

impl Detector for TagDetector {
    fn max_confidence(&self, frame: &FrameRecord, elements: &[String]) -> f64 {
        frame
            .element_tags
            .iter()
            .filter(|t| elements.contains(&t.element))
            .map(|t| t.confidence)
            .fold(0.0, f64::max)
    }
}

/// One detection record from an external detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    /// Frame the element was seen in.
    pub frame_index: usize,
    /// Normalized element name.
    pub element: String,
    /// Confidence in [0, 1].
    pub confidence: f64,
}

/// Answers from a preloaded detections file keyed by frame index.
#[derive(Debug, Clone, Default)]
pub struct FileDetector {
    by_frame: HashMap<usize, Vec<ElementTag>>,
}

impl FileDetector {
    /// Builds a detector from parsed detection records.
    pub fn new(detections: Vec<Detection>) -> Result<Self> {
        let mut by_frame: HashMap<usize, Vec<ElementTag>> = HashMap::new();
        for d in detections {
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::Input(format!(
                    "detection confidence {} for frame {} outside [0, 1]",
                    d.confidence, d.frame_index
                )));
            }
            by_frame.entry(d.frame_index).or_default().push(ElementTag {
                element: normalize_element(&d.element),
                confidence: d.confidence,
            });
        }
        Ok(FileDetector { by_frame })
    }
}

impl Detector for FileDetector {
    fn max_confidence(&self, frame: &FrameRecord, elements: &[String]) -> f64 {
        self.by_frame
            .get(&frame.index)
            .map(|tags| {
                tags.iter()
                    .filter(|t| elements.contains(&t.element))
                    .map(|t| t.confidence)
                    .fold(0.0, f64::max)
            })
            .unwrap_or(0.0)
    }
}

/// Canonical element-name form: trimmed and lowercased. Every element
/// comparison in the crate goes through this.
pub fn normalize_element(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// `m` evenly spaced indices over `0..total` (all of them when total <= m),
/// using stride = total / m. Shared by the pool fallback, element
/// extraction, and the uniform evaluation baseline.
pub fn uniform_indices(total: usize, m: usize) -> Vec<usize> {
    if total <= m {
        return (0..total).collect();
    }
    let stride = total / m;
    (0..m).map(|i| i * stride).collect()
}

/// Asks the oracle which visual elements the question targets, over
/// uniformly sampled frames, and normalizes the reply into an element set.
pub fn extract_target_elements(
    oracle: &dyn Oracle,
    frames: &[FrameRecord],
    question: &QuestionInstance,
) -> Result<Vec<String>> {
    if frames.is_empty() {
        return Err(Error::Input("cannot extract elements from an empty video".into()));
    }
    let picks = uniform_indices(frames.len(), ELEMENT_EXTRACTION_FRAMES.min(frames.len()));
    let refs: Vec<FrameRef> = picks
        .into_iter()
        .map(|p| FrameRef {
            index: frames[p].index,
            image_base64: None,
        })
        .collect();
    let reply = oracle.call(&OracleRequest {
        kind: OracleRequestKind::ElementsFromQuestion,
        question: question.clone(),
        frames: refs,
        answer_text: None,
        temperature: 0.0,
    })?;
    Ok(elements_parse(reply.text.as_deref().unwrap_or("")))
}

/// Builds the candidate pool: frames whose max detection confidence over
/// `elements` is at least `threshold`; top-M by confidence (ties prefer the
/// earlier frame) when more qualify; `m` evenly spaced frames when none do.
pub fn build_pool(
    frames: &[FrameRecord],
    elements: &[String],
    detector: &dyn Detector,
    threshold: f64,
    m: usize,
    question: &QuestionInstance,
) -> Result<CandidatePool> {
    if frames.is_empty() {
        return Err(Error::Input("cannot build a pool from an empty video".into()));
    }
    if m == 0 {
        return Err(Error::Config("pool size M must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "detection threshold {threshold} outside [0, 1]"
        )));
    }

    let scores: Vec<f64> = frames
        .iter()
        .map(|f| detector.max_confidence(f, elements))
        .collect();

    // Scores are >= 0, so a zero threshold keeps every frame, including ones
    // with no matching detection at all.
    let qualifying: Vec<usize> = (0..frames.len())
        .filter(|&i| scores[i] >= threshold)
        .collect();

    let chosen: Vec<usize> = if qualifying.is_empty() {
        uniform_indices(frames.len(), m)
    } else if qualifying.len() > m {
        // Top-M by confidence; stable sort keeps earlier frames on ties.
        let mut by_conf = qualifying.clone();
        by_conf.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite confidence"));
        let mut top: Vec<usize> = by_conf[..m].to_vec();
        top.sort_unstable();
        top
    } else {
        qualifying
    };

    Ok(CandidatePool {
        detection_scores: chosen.iter().map(|&i| scores[i]).collect(),
        frames: chosen.into_iter().map(|i| frames[i].clone()).collect(),
        source_question: question.text.clone(),
    })
}

/// JSON sidecar describing a flat binary feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSidecar {
    /// Number of frames (matrix rows).
    pub rows: usize,
    /// Feature dimension (matrix columns).
    pub dim: usize,
    /// Source sampling rate, frames per second.
    pub fps: f64,
}

/// Loads precomputed frame features: a row-major little-endian f32 matrix
/// plus its JSON sidecar. Frame `i` is row `i`; element tags start empty.
pub fn load_feature_file(features_path: &Path, sidecar_path: &Path) -> Result<Vec<FrameRecord>> {
    let sidecar: FeatureSidecar = serde_json::from_reader(std::fs::File::open(sidecar_path)?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(features_path)?.read_to_end(&mut bytes)?;
    let expected = sidecar
        .rows
        .checked_mul(sidecar.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Input("feature matrix dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Input(format!(
            "feature file holds {} bytes but sidecar promises {} ({} rows x {} dims x 4)",
            bytes.len(),
            expected,
            sidecar.rows,
            sidecar.dim
        )));
    }
    let mut frames = Vec::with_capacity(sidecar.rows);
    for row in 0..sidecar.rows {
        let mut feature = Vec::with_capacity(sidecar.dim);
        for col in 0..sidecar.dim {
            let off = (row * sidecar.dim + col) * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::Input(format!(
                    "non-finite feature at row {row}, column {col}"
                )));
            }
            feature.push(v as f64);
        }
        frames.push(FrameRecord {
            index: row,
            feature,
            element_tags: Vec::new(),
        });
    }
    Ok(frames)
}

/// Writes features in the format [`load_feature_file`] reads.
pub fn write_feature_file(
    features_path: &Path,
    sidecar_path: &Path,
    features: &[Vec<f64>],
    fps: f64,
) -> Result<()> {
    let dim = features.first().map(|f| f.len()).unwrap_or(0);
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Input("feature rows have inconsistent dimensions".into()));
    }
    let mut file = std::fs::File::create(features_path)?;
    for row in features {
        for &v in row {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    let sidecar = FeatureSidecar {
        rows: features.len(),
        dim,
        fps,
    };
    serde_json::to_writer(std::fs::File::create(sidecar_path)?, &sidecar)?;
    Ok(())
}

/// Loads a line-delimited JSON detections file into a [`FileDetector`].
pub fn load_detections(path: &Path) -> Result<FileDetector> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut detections = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line).map_err(|e| {
            Error::Input(format!("detections line {}: {e}", lineno + 1))
        })?;
        detections.push(d);
    }
    FileDetector::new(detections)
}
