//! Question-answering oracles: the interface, request/reply types, and
//! reply parsing shared by every backend.
//!
//! An oracle answers multiple-choice questions about a set of video frames.
//! Four request kinds cover the training loop's needs:
//!
//! * [`OracleRequestKind::Answer`] — free-text answer given frames;
//! * [`OracleRequestKind::Logits`] — per-option log-scores given frames;
//! * [`OracleRequestKind::ElementsFromQuestion`] — the visual elements a
//!   question is about, judged from a uniform sample of frames;
//! * [`OracleRequestKind::ElementsFromAnswer`] — the visual elements an
//!   already-produced answer relies on, judged from text alone (no frames),
//!   which closes the question → answer → elements consistency cycle.
//!
//! Backends: [`SyntheticOracle`] answers from a generated episode's planted
//! structure (deterministic, offline); [`HttpOracle`] speaks the
//! chat-completions protocol to a hosted vision-language model.

pub mod http;
pub mod prompts;
pub mod stub;
mod synthetic;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::env::QuestionInstance;
use crate::pool::normalize_element;

pub use http::{HttpOracle, HttpOracleConfig};
pub use synthetic::SyntheticOracle;

/// What the caller wants from the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleRequestKind {
    /// Answer the question from the attached frames (free text).
    Answer,
    /// Score every option from the attached frames (log-scores).
    Logits,
    /// List the visual elements the question asks about.
    ElementsFromQuestion,
    /// List the visual elements a given answer relies on; text-only.
    ElementsFromAnswer,
}

/// A reference to one frame sent to the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    /// Original frame index in the source video.
    pub index: usize,
    /// Base64-encoded image payload for hosted backends; `None` for
    /// backends that answer from the frame index alone.
    pub image_base64: Option<String>,
}

/// One oracle request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    /// What to do.
    pub kind: OracleRequestKind,
    /// The question (text, options, embedding).
    pub question: QuestionInstance,
    /// Frames supporting the request, temporal order. Must be empty for
    /// [`OracleRequestKind::ElementsFromAnswer`], non-empty otherwise.
    pub frames: Vec<FrameRef>,
    /// The answer to dissect, for [`OracleRequestKind::ElementsFromAnswer`].
    pub answer_text: Option<String>,
    /// Sampling temperature for hosted backends (the trainer uses 0).
    pub temperature: f64,
}

impl OracleRequest {
    /// A request carrying frames, for every kind except answer dissection.
    pub fn with_frames(
        kind: OracleRequestKind,
        question: QuestionInstance,
        frames: Vec<FrameRef>,
    ) -> OracleRequest {
        OracleRequest {
            kind,
            question,
            frames,
            answer_text: None,
            temperature: 0.0,
        }
    }

    /// A text-only answer-dissection request.
    pub fn elements_from_answer(question: QuestionInstance, answer: String) -> OracleRequest {
        OracleRequest {
            kind: OracleRequestKind::ElementsFromAnswer,
            question,
            frames: Vec::new(),
            answer_text: Some(answer),
            temperature: 0.0,
        }
    }
}

/// One oracle reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReply {
    /// Free-text content (answers, element lists).
    pub text: Option<String>,
    /// Per-option log-scores, aligned with the question's options.
    pub logits: Option<Vec<f64>>,
    /// True when `logits` were reconstructed from a bare answer rather
    /// than read from the backend's token log-probabilities.
    pub approximate_logits: bool,
    /// Wall-clock time the backend took.
    pub latency_ms: u64,
    /// Which backend produced this reply.
    pub backend: String,
}

/// Errors an oracle backend can raise.
#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    /// Connection-level failure (refused, reset, DNS, ...). Retryable.
    #[error("transport failure contacting {endpoint}: {message}")]
    Transport {
        /// Endpoint the request was sent to.
        endpoint: String,
        /// Underlying error description.
        message: String,
    },
    /// The backend answered with a non-success HTTP status. Not retried.
    #[error("oracle returned HTTP {status}: {body}")]
    Status {
        /// HTTP status code.
        status: u16,
        /// Response body (possibly truncated).
        body: String,
    },
    /// The backend exceeded the configured deadline. Not retried.
    #[error("oracle timed out after {after_ms} ms")]
    Timeout {
        /// The deadline that was exceeded.
        after_ms: u64,
    },
    /// The backend replied but the reply was uninterpretable.
    #[error("cannot parse oracle reply: {0}")]
    Parse(String),
    /// The request itself was malformed for this backend.
    #[error("invalid oracle request: {0}")]
    Precondition(String),
}

/// A question-answering backend. Implementations must be deterministic at
/// temperature 0 wherever the underlying service allows it.
pub trait Oracle {
    /// Executes one request.
    fn call(&self, request: &OracleRequest) -> Result<OracleReply, OracleError>;
}

impl<T: Oracle + ?Sized> Oracle for &T {
    fn call(&self, request: &OracleRequest) -> Result<OracleReply, OracleError> {
        (**self).call(request)
    }
}

/// Parses a free-text element list into a normalized, deduplicated,
/// sorted set of element names.
///
/// Accepts comma-, semicolon-, or newline-separated lists, with optional
/// bullet markers ("-", "*", "•") or numbering ("1.", "2)", "3:") per item.
/// Items are trimmed and lowercased; empty items are dropped. An
/// unparseable (empty) reply yields an empty set with a warning, not an
/// error — a cycle-consistency reward of zero is the correct consequence.
pub fn elements_parse(reply: &str) -> Vec<String> {
    let mut set = BTreeSet::new();
    for piece in reply.split([',', ';', '\n']) {
        let item = normalize_element(strip_list_marker(piece));
        if !item.is_empty() {
            set.insert(item);
        }
    }
    if set.is_empty() && !reply.trim().is_empty() {
        log::warn!("element list parsed to nothing: {reply:?}");
    }
    set.into_iter().collect()
}

/// Strips one leading bullet or numbering marker from a list item.
fn strip_list_marker(piece: &str) -> &str {
    let t = piece.trim_start();
    // Bullets: "-", "*", "•" (possibly repeated).
    let no_bullets = t.trim_start_matches(['-', '*', '•']);
    if no_bullets.len() < t.len() {
        return no_bullets.trim_start();
    }
    // Numbering: digits followed by '.', ')', or ':'. Bare digits are kept —
    // "2 dogs" is an element, not a marker.
    let digits_end = t
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(t.len());
    if digits_end > 0 && digits_end < t.len() {
        let rest = &t[digits_end..];
        if matches!(rest.chars().next(), Some('.') | Some(')') | Some(':')) {
            return rest[1..].trim_start();
        }
    }
    t
}
