//! Abstractive question answering against external judge language models.
//!
//! Every (response, class) pair is rendered into one prompt per question
//! template and sent to every judge endpoint. Raw generations are normalized
//! to yes/no, cached on disk and assembled into a [`JudgementTensor`].

mod cache;
mod client;
mod prompt;
mod run;
mod tensor;

pub use cache::{cache_key, CacheError, CacheRecord, JudgeCache};
pub use client::{query_judge, Backoff, HttpJudge, Judge, JudgeEndpoint, JudgeError};
pub use prompt::{
    default_templates, normalize_answer, prompt_format_digest, render_prompt, Answer,
    QuestionTemplate, TemplateError, PROMPT_FORMAT,
};
pub use run::{run_aqa, AqaError, AqaOptions, AqaProgress, AqaRun, AqaStats};
pub use tensor::{JudgeInfo, Judgement, JudgementTensor, Provenance, TensorError};
