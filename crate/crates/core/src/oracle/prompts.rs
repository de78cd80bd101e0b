//! Prompt templates for hosted oracle backends.
//!
//! One editable template per request kind, with `{question}`, `{options}`,
//! and `{answer}` placeholders. Compiled-in defaults ship with the crate;
//! a directory of same-named `.txt` files overrides them per file, so a
//! deployment can tune wording without rebuilding.

use std::fs;
use std::path::Path;

use crate::env::QuestionInstance;
use crate::error::{Error, Result};
use crate::oracle::OracleRequestKind;
use crate::rewards::option_letter;

const DEFAULT_ANSWER: &str = include_str!("../../assets/prompts/answer.txt");
const DEFAULT_LOGITS: &str = include_str!("../../assets/prompts/logits.txt");
const DEFAULT_ELEMENTS_FROM_QUESTION: &str =
    include_str!("../../assets/prompts/elements_from_question.txt");
const DEFAULT_ELEMENTS_FROM_ANSWER: &str =
    include_str!("../../assets/prompts/elements_from_answer.txt");

/// The four templates, one per request kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// Template for answer requests.
    pub answer: String,
    /// Template for logit requests (asks for a bare option letter).
    pub logits: String,
    /// Template for question-element extraction.
    pub elements_from_question: String,
    /// Template for answer-element extraction (text-only).
    pub elements_from_answer: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            answer: DEFAULT_ANSWER.to_string(),
            logits: DEFAULT_LOGITS.to_string(),
            elements_from_question: DEFAULT_ELEMENTS_FROM_QUESTION.to_string(),
            elements_from_answer: DEFAULT_ELEMENTS_FROM_ANSWER.to_string(),
        }
    }
}

impl PromptSet {
    /// Loads templates from a directory, falling back to the compiled-in
    /// default for any missing file. Expected names: `answer.txt`,
    /// `logits.txt`, `elements_from_question.txt`, `elements_from_answer.txt`.
    pub fn from_dir(dir: &Path) -> Result<PromptSet> {
        if !dir.is_dir() {
            return Err(Error::Input(format!(
                "prompt directory {} does not exist",
                dir.display()
            )));
        }
        let load = |name: &str, fallback: &str| -> Result<String> {
            let path = dir.join(name);
            if path.is_file() {
                Ok(fs::read_to_string(&path)?)
            } else {
                Ok(fallback.to_string())
            }
        };
        Ok(PromptSet {
            answer: load("answer.txt", DEFAULT_ANSWER)?,
            logits: load("logits.txt", DEFAULT_LOGITS)?,
            elements_from_question: load("elements_from_question.txt", DEFAULT_ELEMENTS_FROM_QUESTION)?,
            elements_from_answer: load("elements_from_answer.txt", DEFAULT_ELEMENTS_FROM_ANSWER)?,
        })
    }

    /// The template for a request kind.
    pub fn template(&self, kind: OracleRequestKind) -> &str {
        match kind {
            OracleRequestKind::Answer => &self.answer,
            OracleRequestKind::Logits => &self.logits,
            OracleRequestKind::ElementsFromQuestion => &self.elements_from_question,
            OracleRequestKind::ElementsFromAnswer => &self.elements_from_answer,
        }
    }

    /// Renders the template for a request: `{question}` → question text,
    /// `{options}` → lettered option lines, `{answer}` → the given answer
    /// (empty when absent).
    pub fn render(
        &self,
        kind: OracleRequestKind,
        question: &QuestionInstance,
        answer_text: Option<&str>,
    ) -> String {
        let options = question
            .options
            .iter()
            .enumerate()
            .map(|(i, o)| format!("({}) {o}", option_letter(i)))
            .collect::<Vec<_>>()
            .join("\n");
        self.template(kind)
            .replace("{question}", &question.text)
            .replace("{options}", &options)
            .replace("{answer}", answer_text.unwrap_or(""))
    }
}
