//! Closed yes/no existence questions: the balanced original protocol and the
//! exhaustive variant over every (image, class) pair.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GroundTruthMatrix, ImageId};
use crate::judge::Answer;
use crate::metrics::f_beta;
use crate::vocab::{article_for, ClassEntry, ClassId, ClassVocabulary};

#[derive(Debug, Error)]
pub enum PopeError {
    #[error("asked for {requested} images but only {available} are available")]
    TooManyImages { requested: usize, available: usize },
    #[error("ground-truth class {0} is not in the vocabulary")]
    UnknownClass(ClassId),
    #[error("{0} questions have no answer")]
    Unanswered(usize),
    #[error("answer for image {0}, class {1} does not match any generated question")]
    UnknownQuestion(ImageId, ClassId),
    #[error("question for image {0}, class {1} was answered twice")]
    DuplicateAnswer(ImageId, ClassId),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeLabel {
    Yes,
    No,
}

impl From<bool> for PopeLabel {
    fn from(present: bool) -> Self {
        if present {
            PopeLabel::Yes
        } else {
            PopeLabel::No
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub question: String,
    pub gt_label: PopeLabel,
}

pub fn question_text(class: &ClassEntry) -> String {
    format!(
        "Is there {} {} in the image?",
        article_for(class),
        class.name
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeConfig {
    pub num_images: usize,
    pub pos_per_image: usize,
    pub neg_per_image: usize,
    pub seed: u64,
}

impl Default for PopeConfig {
    fn default() -> Self {
        Self {
            num_images: 500,
            pos_per_image: 3,
            neg_per_image: 3,
            seed: 0,
        }
    }
}

/// Picks negative classes for one image.
pub trait NegativeSampler {
    /// Choose up to `n` distinct entries of `absent` (class column indices).
    fn sample(&self, absent: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize>;
}

/// Uniform sampling without replacement.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformNegatives;

impl NegativeSampler for UniformNegatives {
    fn sample(&self, absent: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        sample_sorted(absent, n, rng)
    }
}

fn sample_sorted(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = n.min(pool.len());
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn columns<'a>(
    gt: &GroundTruthMatrix,
    vocab: &'a ClassVocabulary,
) -> Result<Vec<&'a ClassEntry>, PopeError> {
    gt.classes()
        .iter()
        .map(|&id| vocab.get(id).ok_or(PopeError::UnknownClass(id)))
        .collect()
}

pub fn generate_pope(
    gt: &GroundTruthMatrix,
    vocab: &ClassVocabulary,
    config: &PopeConfig,
) -> Result<Vec<PopeQuestion>, PopeError> {
    generate_pope_with(gt, vocab, config, &UniformNegatives)
}

/// Seeded image subset; per image, sampled positives then sampled negatives,
/// each in class-column order. Images are emitted in ground-truth row order.
pub fn generate_pope_with(
    gt: &GroundTruthMatrix,
    vocab: &ClassVocabulary,
    config: &PopeConfig,
    negatives: &dyn NegativeSampler,
) -> Result<Vec<PopeQuestion>, PopeError> {
    if config.num_images > gt.n_images() {
        return Err(PopeError::TooManyImages {
            requested: config.num_images,
            available: gt.n_images(),
        });
    }
    let classes = columns(gt, vocab)?;
    let texts: Vec<String> = classes.iter().map(|c| question_text(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = index::sample(&mut rng, gt.n_images(), config.num_images).into_vec();
    rows.sort_unstable();

    let mut out = Vec::with_capacity(rows.len() * (config.pos_per_image + config.neg_per_image));
    for row in rows {
        let present = gt.present(row);
        let absent: Vec<usize> = (0..gt.n_classes()).filter(|&c| !gt.get(row, c)).collect();
        let pos = sample_sorted(&present, config.pos_per_image, &mut rng);
        let neg = negatives.sample(&absent, config.neg_per_image, &mut rng);
        for (cols, label) in [(pos, PopeLabel::Yes), (neg, PopeLabel::No)] {
            for c in cols {
                out.push(PopeQuestion {
                    image_id: gt.images()[row],
                    class_id: classes[c].id,
                    question: texts[c].clone(),
                    gt_label: label,
                });
            }
        }
    }
    Ok(out)
}

/// One question per (image, class) cell, labels read straight from `gt`.
pub fn generate_popec(
    gt: &GroundTruthMatrix,
    vocab: &ClassVocabulary,
) -> Result<Vec<PopeQuestion>, PopeError> {
    let classes = columns(gt, vocab)?;
    let texts: Vec<String> = classes.iter().map(|c| question_text(c)).collect();
    let mut out = Vec::with_capacity(gt.n_images() * gt.n_classes());
    for (row, &image_id) in gt.images().iter().enumerate() {
        for (c, class) in classes.iter().enumerate() {
            out.push(PopeQuestion {
                image_id,
                class_id: class.id,
                question: texts[c].clone(),
                gt_label: gt.get(row, c).into(),
            });
        }
    }
    Ok(out)
}

const NEGATIVE_PHRASES: [&str; 4] = ["there is no", "is not", "does not", "no,"];
const POSITIVE_PHRASES: [&str; 3] = ["there is a", "there is an", "yes,"];

fn contains_phrase(text: &str, phrase: &str) -> bool {
    let bytes = text.as_bytes();
    let word_char = |b: u8| b.is_ascii_alphanumeric();
    text.match_indices(phrase).any(|(i, _)| {
        let end = i + phrase.len();
        let start_ok = i == 0 || !word_char(bytes[i - 1]);
        let last = phrase.as_bytes()[phrase.len() - 1];
        let end_ok = end == bytes.len() || !word_char(last) || !word_char(bytes[end]);
        start_ok && end_ok
    })
}

/// Rule-based reading of a free-form yes/no answer.
pub fn parse_yes_no(raw: &str) -> Answer {
    let lower = raw.to_lowercase();
    match lower
        .split(|c: char| !c.is_alphabetic())
        .find(|t| !t.is_empty())
    {
        Some("yes") => return Answer::Yes,
        Some("no") => return Answer::No,
        _ => {}
    }
    let text = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    let neg = NEGATIVE_PHRASES.iter().any(|p| contains_phrase(&text, p));
    let pos = POSITIVE_PHRASES.iter().any(|p| contains_phrase(&text, p));
    match (neg, pos) {
        (true, false) => Answer::No,
        (false, true) => Answer::Yes,
        _ => Answer::Unparseable,
    }
}

/// Answer file line: the question fields plus the model response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeAnswer {
    pub image_id: ImageId,
    pub class_id: ClassId,
    #[serde(default)]
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_label: Option<PopeLabel>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeAnswerRecord {
    pub question: PopeQuestion,
    pub raw_response: String,
    pub parsed: Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub unparseable_rate: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub unparseable: u64,
    pub questions: u64,
}

/// Pair every question with its answer and parse the response.
pub fn match_answers(
    questions: &[PopeQuestion],
    answers: &[PopeAnswer],
) -> Result<Vec<PopeAnswerRecord>, PopeError> {
    let mut by_key: BTreeMap<(ImageId, ClassId), &PopeAnswer> = BTreeMap::new();
    let asked: BTreeSet<(ImageId, ClassId)> =
        questions.iter().map(|q| (q.image_id, q.class_id)).collect();
    for a in answers {
        let key = (a.image_id, a.class_id);
        if !asked.contains(&key) {
            return Err(PopeError::UnknownQuestion(a.image_id, a.class_id));
        }
        if by_key.insert(key, a).is_some() {
            return Err(PopeError::DuplicateAnswer(a.image_id, a.class_id));
        }
    }
    let unanswered = questions
        .iter()
        .filter(|q| !by_key.contains_key(&(q.image_id, q.class_id)))
        .count();
    if unanswered > 0 {
        return Err(PopeError::Unanswered(unanswered));
    }
    Ok(questions
        .iter()
        .map(|q| {
            let a = by_key[&(q.image_id, q.class_id)];
            PopeAnswerRecord {
                question: q.clone(),
                raw_response: a.response.clone(),
                parsed: parse_yes_no(&a.response),
            }
        })
        .collect())
}

/// Yes is the positive class. An unparseable answer is scored as the
/// opposite of the true label.
pub fn score_pope(records: &[PopeAnswerRecord]) -> PopeScores {
    let (mut tp, mut fp, mut fn_, mut tn, mut unparseable) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for r in records {
        let gt_yes = r.question.gt_label == PopeLabel::Yes;
        let said_yes = match r.parsed {
            Answer::Yes => true,
            Answer::No => false,
            Answer::Unparseable => {
                unparseable += 1;
                !gt_yes
            }
        };
        match (said_yes, gt_yes) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let pct = |n: u64, d: u64| {
        if d == 0 {
            0.0
        } else {
            100.0 * n as f64 / d as f64
        }
    };
    let total = records.len() as u64;
    let (precision, recall) = (pct(tp, tp + fp), pct(tp, tp + fn_));
    PopeScores {
        precision,
        recall,
        f1: f_beta(precision, recall, 1.0),
        accuracy: pct(tp + tn, total),
        unparseable_rate: pct(unparseable, total),
        tp,
        fp,
        fn_,
        tn,
        unparseable,
        questions: total,
    }
}

pub fn write_questions<W: Write>(questions: &[PopeQuestion], mut out: W) -> Result<(), PopeError> {
    for q in questions {
        serde_json::to_writer(&mut out, q).map_err(|source| PopeError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_questions<R: BufRead>(input: R) -> Result<Vec<PopeQuestion>, PopeError> {
    read_jsonl(input)
}

pub fn read_answers<R: BufRead>(input: R) -> Result<Vec<PopeAnswer>, PopeError> {
    read_jsonl(input)
}

fn read_jsonl<R: BufRead, T: serde::de::DeserializeOwned>(input: R) -> Result<Vec<T>, PopeError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| PopeError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}
