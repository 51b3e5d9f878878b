use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use thiserror::Error;

use super::cache::{cache_key, CacheError, CacheRecord, JudgeCache};
use super::client::{Judge, JudgeError};
use super::prompt::{
    normalize_answer, prompt_format_digest, render_prompt, Answer, QuestionTemplate,
};
use super::tensor::{JudgeInfo, Judgement, JudgementTensor, Provenance};
use crate::responses::ResponseSet;
use crate::vocab::ClassVocabulary;

#[derive(Debug, Error)]
pub enum AqaError {
    #[error("at least one judge endpoint is required")]
    NoJudges,
    #[error("at least one question template is required")]
    NoTemplates,
    #[error("duplicate judge id {0:?}")]
    DuplicateJudge(String),
    #[error("duplicate question id {0:?}")]
    DuplicateQuestion(String),
    #[error("concurrency limit must be at least 1")]
    ZeroConcurrency,
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("{source} ({completed} of {total} cells cached; rerun to resume)")]
    Endpoint {
        #[source]
        source: JudgeError,
        completed: usize,
        total: usize,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AqaProgress {
    pub done: usize,
    pub total: usize,
    pub generate_calls: usize,
    pub invalid: usize,
}

type ProgressFn = dyn Fn(&AqaProgress) + Send + Sync;

#[derive(Clone)]
pub struct AqaOptions {
    pub concurrency_limit: usize,
    pub progress: Option<Arc<ProgressFn>>,
}

impl Default for AqaOptions {
    fn default() -> Self {
        Self {
            concurrency_limit: 16,
            progress: None,
        }
    }
}

impl AqaOptions {
    pub fn with_concurrency(concurrency_limit: usize) -> Self {
        Self {
            concurrency_limit,
            progress: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AqaStats {
    pub cells: usize,
    /// Cells answered from the cache without any call.
    pub cached_cells: usize,
    /// Distinct prompts sent to judges in this run.
    pub unique_prompts: usize,
    /// `Judge::generate` invocations, re-queries included (HTTP retries are not).
    pub generate_calls: usize,
    pub requeries: usize,
    pub invalid_cells: usize,
}

#[derive(Debug, Clone)]
pub struct AqaRun {
    pub tensor: JudgementTensor,
    pub stats: AqaStats,
}

struct Pending {
    key: String,
    judge: usize,
    question: usize,
    prompt: String,
    cells: Vec<usize>,
    image: crate::dataset::ImageId,
    class: crate::vocab::ClassId,
}

enum Outcome {
    Done {
        raw: String,
        judgement: Judgement,
        calls: usize,
    },
    Failed(JudgeError, usize),
    Skipped,
}

/// Judge every (response, class) pair with every (judge, question) pair.
///
/// Completed prompts are appended to the cache at `cache_path` as they
/// arrive; cells already cached are never re-sent. On an endpoint failure no
/// new prompts are started, in-flight ones are drained into the cache, and the
/// error is returned so a rerun can resume.
pub async fn run_aqa<J: Judge>(
    responses: &ResponseSet,
    vocab: &ClassVocabulary,
    judges: &[J],
    templates: &[QuestionTemplate],
    cache_path: impl AsRef<Path>,
    options: &AqaOptions,
) -> Result<AqaRun, AqaError> {
    if judges.is_empty() {
        return Err(AqaError::NoJudges);
    }
    if templates.is_empty() {
        return Err(AqaError::NoTemplates);
    }
    if options.concurrency_limit == 0 {
        return Err(AqaError::ZeroConcurrency);
    }
    let mut seen = HashSet::new();
    for j in judges {
        if !seen.insert(j.judge_id()) {
            return Err(AqaError::DuplicateJudge(j.judge_id().to_string()));
        }
    }
    let mut seen = HashSet::new();
    for t in templates {
        if !seen.insert(t.question_id()) {
            return Err(AqaError::DuplicateQuestion(t.question_id().to_string()));
        }
    }

    let mut cache = JudgeCache::open(cache_path)?;
    let decoding: Vec<String> = judges.iter().map(|j| j.decoding_key()).collect();
    let (m, nm) = (templates.len(), judges.len() * templates.len());
    let n_classes = vocab.len();
    let total = responses.len() * n_classes * nm;
    let mut cells: Vec<Option<Judgement>> = vec![None; total];
    let mut pending: Vec<Pending> = Vec::new();
    let mut by_key: HashMap<String, usize> = HashMap::new();

    for (row, record) in responses.records.values().enumerate() {
        for (col, class) in vocab.classes().iter().enumerate() {
            for (q, template) in templates.iter().enumerate() {
                let prompt = render_prompt(&record.response_text, template, class);
                for (j, judge) in judges.iter().enumerate() {
                    let idx = (row * n_classes + col) * nm + j * m + q;
                    let key = cache_key(&prompt, judge.judge_id(), &decoding[j]);
                    if let Some(hit) = cache.get(&key) {
                        cells[idx] = Some(hit.normalized);
                        continue;
                    }
                    match by_key.get(&key) {
                        Some(&p) => pending[p].cells.push(idx),
                        None => {
                            by_key.insert(key.clone(), pending.len());
                            pending.push(Pending {
                                key,
                                judge: j,
                                question: q,
                                prompt: prompt.clone(),
                                cells: vec![idx],
                                image: record.image_id,
                                class: class.id,
                            });
                        }
                    }
                }
            }
        }
    }

    let mut stats = AqaStats {
        cells: total,
        unique_prompts: pending.len(),
        ..Default::default()
    };
    let mut done = cells.iter().filter(|c| c.is_some()).count();
    stats.cached_cells = done;
    let report = |done: usize, stats: &AqaStats| {
        if let Some(progress) = &options.progress {
            progress(&AqaProgress {
                done,
                total,
                generate_calls: stats.generate_calls,
                invalid: stats.invalid_cells,
            });
        }
    };
    report(done, &stats);

    let abort = AtomicBool::new(false);
    let abort = &abort;
    let mut results = stream::iter(pending.iter().enumerate())
        .map(|(i, p)| async move {
            if abort.load(Ordering::SeqCst) {
                return (i, Outcome::Skipped);
            }
            (i, judge_once_or_twice(&judges[p.judge], &p.prompt).await)
        })
        .buffer_unordered(options.concurrency_limit);

    let mut failure = None;
    while let Some((i, outcome)) = results.next().await {
        let p = &pending[i];
        match outcome {
            Outcome::Done {
                raw,
                judgement,
                calls,
            } => {
                stats.generate_calls += calls;
                if calls > 1 {
                    stats.requeries += 1;
                }
                cache.append(CacheRecord {
                    cache_key: p.key.clone(),
                    image_id: p.image,
                    class_id: p.class,
                    judge_id: judges[p.judge].judge_id().to_string(),
                    question_id: templates[p.question].question_id().to_string(),
                    raw,
                    normalized: judgement,
                })?;
                for &idx in &p.cells {
                    cells[idx] = Some(judgement);
                }
                if judgement == Judgement::Invalid {
                    stats.invalid_cells += p.cells.len();
                }
                done += p.cells.len();
                report(done, &stats);
            }
            Outcome::Failed(err, calls) => {
                stats.generate_calls += calls;
                abort.store(true, Ordering::SeqCst);
                failure.get_or_insert(err);
            }
            Outcome::Skipped => {}
        }
    }
    if let Some(source) = failure {
        return Err(AqaError::Endpoint {
            source,
            completed: done,
            total,
        });
    }

    let provenance = Provenance {
        judges: judges
            .iter()
            .zip(&decoding)
            .map(|(j, d)| JudgeInfo {
                judge_id: j.judge_id().to_string(),
                location: j.location(),
                decoding: d.clone(),
            })
            .collect(),
        templates: templates.to_vec(),
        prompt_digest: prompt_format_digest(templates),
    };
    let cells: Vec<Judgement> = cells
        .into_iter()
        .map(|c| c.expect("every cell is filled once all prompts completed"))
        .collect();
    stats.invalid_cells = cells.iter().filter(|&&c| c == Judgement::Invalid).count();
    let tensor = JudgementTensor::new(
        responses.image_ids(),
        vocab.ids(),
        judges.len(),
        templates.len(),
        cells,
        provenance,
    )
    .expect("shape follows from construction");
    Ok(AqaRun { tensor, stats })
}

/// Ask once; if the answer is unreadable ask exactly once more.
async fn judge_once_or_twice<J: Judge>(judge: &J, prompt: &str) -> Outcome {
    let mut calls = 0;
    let mut raw = String::new();
    for _ in 0..2 {
        calls += 1;
        match judge.generate(prompt).await {
            Ok(text) => raw = text,
            Err(e) => return Outcome::Failed(e, calls),
        }
        match normalize_answer(&raw) {
            Answer::Yes => {
                return Outcome::Done {
                    raw,
                    judgement: Judgement::Yes,
                    calls,
                }
            }
            Answer::No => {
                return Outcome::Done {
                    raw,
                    judgement: Judgement::No,
                    calls,
                }
            }
            Answer::Unparseable => {}
        }
    }
    Outcome::Done {
        raw,
        judgement: Judgement::Invalid,
        calls,
    }
}
