//! Deterministic oracle over a generated synthetic episode.
//!
//! Answers come straight from the episode's planted structure: answer and
//! logit requests evaluate the synthetic coverage-logit model on the frames
//! actually attached to the request, question-element requests return the
//! planted target set, and answer-dissection requests read the elements off
//! the named option's text. No randomness, no I/O — the reference backend
//! every training-loop property is verified against.

use crate::env::{synthetic_option_logits, Episode, GroundTruth, SyntheticSpec};
use crate::oracle::{Oracle, OracleError, OracleReply, OracleRequest, OracleRequestKind};
use crate::rewards::{option_letter, parse_option_index};
use crate::vecmath::argmax;

/// Oracle backed by one synthetic episode's generative model.
#[derive(Debug, Clone)]
pub struct SyntheticOracle<'a> {
    spec: &'a SyntheticSpec,
    episode: &'a Episode,
}

impl<'a> SyntheticOracle<'a> {
    /// Wraps an episode. The episode must carry its ground truth.
    pub fn new(spec: &'a SyntheticSpec, episode: &'a Episode) -> Result<Self, OracleError> {
        if episode.ground_truth.is_none() {
            return Err(OracleError::Precondition(
                "synthetic oracle needs an episode with ground truth".into(),
            ));
        }
        Ok(SyntheticOracle { spec, episode })
    }

    fn ground_truth(&self) -> &GroundTruth {
        self.episode
            .ground_truth
            .as_ref()
            .expect("checked in constructor")
    }

    fn selected_indices(&self, request: &OracleRequest) -> Vec<usize> {
        request.frames.iter().map(|f| f.index).collect()
    }

    fn logits_for(&self, request: &OracleRequest) -> Result<Vec<f64>, OracleError> {
        let selection = self.selected_indices(request);
        synthetic_option_logits(&selection, self.ground_truth(), &request.question, self.spec)
            .map_err(|e| OracleError::Precondition(e.to_string()))
    }
}

fn reply(text: Option<String>, logits: Option<Vec<f64>>) -> OracleReply {
    OracleReply {
        text,
        logits,
        approximate_logits: false,
        latency_ms: 0,
        backend: "synthetic".into(),
    }
}

impl Oracle for SyntheticOracle<'_> {
    fn call(&self, request: &OracleRequest) -> Result<OracleReply, OracleError> {
        match request.kind {
            OracleRequestKind::Answer => {
                if request.frames.is_empty() {
                    return Err(OracleError::Precondition(
                        "answer request carries no frames".into(),
                    ));
                }
                let logits = self.logits_for(request)?;
                let letter = option_letter(argmax(&logits));
                Ok(reply(Some(format!("The answer is ({letter}).")), Some(logits)))
            }
            OracleRequestKind::Logits => {
                if request.frames.is_empty() {
                    return Err(OracleError::Precondition(
                        "logits request carries no frames".into(),
                    ));
                }
                Ok(reply(None, Some(self.logits_for(request)?)))
            }
            OracleRequestKind::ElementsFromQuestion => {
                if request.frames.is_empty() {
                    return Err(OracleError::Precondition(
                        "question-elements request carries no frames".into(),
                    ));
                }
                Ok(reply(Some(self.ground_truth().target_elements.join(", ")), None))
            }
            OracleRequestKind::ElementsFromAnswer => {
                if !request.frames.is_empty() {
                    return Err(OracleError::Precondition(
                        "answer dissection is text-only; frames must not be attached".into(),
                    ));
                }
                let answer = request.answer_text.as_deref().ok_or_else(|| {
                    OracleError::Precondition("answer dissection needs answer_text".into())
                })?;
                // Option texts are already comma-joined element lists.
                let text = match parse_option_index(answer, &request.question.options) {
                    Some(idx) => request.question.options[idx].clone(),
                    None => {
                        log::warn!("could not map answer to an option: {answer:?}");
                        String::new()
                    }
                };
                Ok(reply(Some(text), None))
            }
        }
    }
}
