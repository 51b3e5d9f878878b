use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::vocab::{article_for, ClassEntry};

/// Judge input layout. `{response}` is inserted verbatim.
pub const PROMPT_FORMAT: &str = "Text: {response} Read the text about an image and answer the question. Question: Please answer yes or no. {question}";

const ARTICLE: &str = "{article}";
const CLASS_NAME: &str = "{class_name}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {id:?} must contain {placeholder} exactly once")]
    Placeholder {
        id: String,
        placeholder: &'static str,
    },
}

/// An existence question with `{article}` and `{class_name}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct QuestionTemplate {
    question_id: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct RawTemplate {
    question_id: String,
    text: String,
}

impl TryFrom<RawTemplate> for QuestionTemplate {
    type Error = TemplateError;

    fn try_from(raw: RawTemplate) -> Result<Self, Self::Error> {
        QuestionTemplate::new(raw.question_id, raw.text)
    }
}

impl From<QuestionTemplate> for RawTemplate {
    fn from(t: QuestionTemplate) -> Self {
        RawTemplate {
            question_id: t.question_id,
            text: t.text,
        }
    }
}

impl QuestionTemplate {
    pub fn new(
        question_id: impl Into<String>,
        text: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let question_id = question_id.into();
        let text = text.into();
        for placeholder in [ARTICLE, CLASS_NAME] {
            if text.matches(placeholder).count() != 1 {
                return Err(TemplateError::Placeholder {
                    id: question_id,
                    placeholder,
                });
            }
        }
        Ok(Self { question_id, text })
    }

    pub fn question_id(&self) -> &str {
        &self.question_id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn question_for(&self, class: &ClassEntry) -> String {
        self.text
            .replace(ARTICLE, article_for(class).as_str())
            .replace(CLASS_NAME, &class.name)
    }
}

/// The three semantically equivalent existence questions.
pub fn default_templates() -> Vec<QuestionTemplate> {
    [
        ("is_there", "Is there {article} {class_name} in this image?"),
        (
            "implies",
            "Does the text imply {article} {class_name} is in the image?",
        ),
        (
            "mentions",
            "Does the text explicitly mention {article} {class_name} is in the image?",
        ),
    ]
    .into_iter()
    .map(|(id, text)| QuestionTemplate::new(id, text).expect("built-in templates are valid"))
    .collect()
}

pub fn render_prompt(
    response_text: &str,
    template: &QuestionTemplate,
    class: &ClassEntry,
) -> String {
    let question = template.question_for(class);
    let mut out = String::with_capacity(PROMPT_FORMAT.len() + response_text.len() + question.len());
    out.push_str("Text: ");
    out.push_str(response_text);
    out.push_str(" Read the text about an image and answer the question. Question: Please answer yes or no. ");
    out.push_str(&question);
    out
}

/// Digest of the prompt layout and templates, for run provenance.
pub fn prompt_format_digest(templates: &[QuestionTemplate]) -> String {
    let mut h = Sha256::new();
    h.update(PROMPT_FORMAT.as_bytes());
    for t in templates {
        h.update([0]);
        h.update(t.question_id.as_bytes());
        h.update([0]);
        h.update(t.text.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Unparseable,
}

/// Strict yes/no reading of a judge generation.
pub fn normalize_answer(raw: &str) -> Answer {
    let lower = raw.trim().to_lowercase();
    let core = lower.trim_end_matches(['.', '!']).trim_end();
    match core {
        "yes" => Answer::Yes,
        "no" => Answer::No,
        _ => Answer::Unparseable,
    }
}
