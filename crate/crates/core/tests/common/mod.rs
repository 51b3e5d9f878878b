//! Fixtures and stub judge rules shared by the integration tests.
//!
//! Nothing here calls into the crate's own prompt or matching logic beyond
//! what is needed to build inputs, so the expected values derived from these
//! fixtures stay independent of the code under test.
#![allow(dead_code)]

use std::time::Duration;

use hallu_core::dataset::ImageId;
use hallu_core::judge::{default_templates, Backoff, HttpJudge, JudgeEndpoint, QuestionTemplate};
use hallu_core::responses::{ingest_lines, IngestOptions, ResponseSet, CANONICAL_PROMPT};
use hallu_core::vocab::ClassVocabulary;
use hallu_core::GroundTruthMatrix;
use hallu_mock_judge::MockJudge;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TEST5: &str = include_str!("../../fixtures/test5.vocab");
pub const COCO80: &str = include_str!("../../fixtures/coco80.vocab");

/// Texts containing this word make the second stub judge answer garbage on
/// the "implies" question.
pub const BLURRY: &str = "blurry";

/// Class names (and synonyms) of the five-class fixture vocabulary.
pub const NAMES: [(&str, &[&str]); 5] = [
    ("dog", &["puppy"]),
    ("cat", &[]),
    ("apple", &[]),
    ("chair", &["seat"]),
    ("traffic light", &[]),
];

pub fn test5() -> ClassVocabulary {
    ClassVocabulary::from_toml_str(TEST5).unwrap()
}

pub fn coco80() -> ClassVocabulary {
    ClassVocabulary::from_toml_str(COCO80).unwrap()
}

/// The response text embedded in a judge prompt.
pub fn prompt_text(prompt: &str) -> &str {
    let body = prompt.strip_prefix("Text: ").expect("prompt prefix");
    let end = body
        .rfind(" Read the text about an image and answer the question.")
        .expect("prompt middle");
    &body[..end]
}

/// The question at the end of a judge prompt.
pub fn prompt_question(prompt: &str) -> &str {
    prompt
        .rsplit_once("Please answer yes or no. ")
        .expect("question marker")
        .1
}

/// Index into [`NAMES`] of the class a question asks about.
pub fn asked_class(question: &str) -> usize {
    NAMES
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| question.contains(&format!(" {name} ")))
        .max_by_key(|(_, (name, _))| name.len())
        .map(|(i, _)| i)
        .expect("question names a fixture class")
}

/// First stub judge: literal class-name substring.
pub fn alpha_answer(text: &str, class: usize) -> Option<bool> {
    Some(text.contains(NAMES[class].0))
}

/// Second stub judge: name or synonym substring; unreadable on "implies"
/// questions about blurry texts.
pub fn beta_answer(text: &str, class: usize, implies: bool) -> Option<bool> {
    if implies && text.contains(BLURRY) {
        return None;
    }
    let (name, synonyms) = NAMES[class];
    Some(text.contains(name) || synonyms.iter().any(|s| text.contains(s)))
}

pub fn alpha_rule(prompt: &str) -> String {
    let answer = alpha_answer(prompt_text(prompt), asked_class(prompt_question(prompt)));
    if answer.unwrap() { "yes" } else { "no" }.to_string()
}

pub fn beta_rule(prompt: &str) -> String {
    let question = prompt_question(prompt);
    let implies = question.starts_with("Does the text imply");
    match beta_answer(prompt_text(prompt), asked_class(question), implies) {
        Some(true) => "Yes.".into(),
        Some(false) => " No".into(),
        None => "unclear".into(),
    }
}

/// "is_there" and "implies".
pub fn two_templates() -> Vec<QuestionTemplate> {
    default_templates().into_iter().take(2).collect()
}

pub fn endpoint(judge_id: &str, server: &MockJudge) -> JudgeEndpoint {
    let mut e = JudgeEndpoint::new(judge_id, server.url());
    e.retry_budget = 1;
    e.backoff = Backoff {
        initial: Duration::from_millis(1),
        max: Duration::from_millis(4),
    };
    e.timeout = Duration::from_secs(10);
    e
}

pub fn http_judges(servers: &[(&str, &MockJudge)]) -> Vec<HttpJudge> {
    servers
        .iter()
        .map(|(id, s)| HttpJudge::new(endpoint(id, s)).unwrap())
        .collect()
}

pub struct E2eFixture {
    pub vocab: ClassVocabulary,
    pub gt: GroundTruthMatrix,
    pub responses: ResponseSet,
    /// (image id, text) in image order.
    pub texts: Vec<(ImageId, String)>,
}

/// Ten images over the five-class vocabulary with seeded presence and
/// seeded, partly hallucinated descriptions.
pub fn e2e_fixture(seed: u64, with_blurry: bool) -> E2eFixture {
    let vocab = test5();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ImageId> = (0..10).map(|i| ImageId(101 + i)).collect();
    let mut rows = Vec::new();
    let mut texts = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        let row: Vec<bool> = (0..5).map(|_| rng.random_bool(0.4)).collect();
        let mut mentions = Vec::new();
        for (c, &present) in row.iter().enumerate() {
            let say = if present {
                rng.random_bool(0.8)
            } else {
                rng.random_bool(0.25)
            };
            if say {
                let (name, syn) = NAMES[c];
                let phrase = if !syn.is_empty() && rng.random_bool(0.5) {
                    syn[0]
                } else {
                    name
                };
                mentions.push(phrase);
            }
        }
        let mut text = String::from("A photo");
        if with_blurry && i % 4 == 1 {
            text.push_str(", somewhat blurry,");
        }
        if mentions.is_empty() {
            text.push_str(" of an empty room.");
        } else {
            text.push_str(" showing ");
            text.push_str(&mentions.join(" and "));
            text.push('.');
        }
        rows.push(row);
        texts.push((id, text));
    }
    let gt = GroundTruthMatrix::from_rows(ids.clone(), vocab.ids(), &rows);
    let lines: Vec<String> = texts
        .iter()
        .map(|(id, t)| {
            serde_json::json!({"model_id": "fixture-model", "image_id": id.0, "prompt": CANONICAL_PROMPT, "response": t})
                .to_string()
        })
        .collect();
    let responses = ingest_lines(
        lines.iter().map(String::as_str),
        &ids,
        &IngestOptions::default(),
    )
    .unwrap();
    E2eFixture {
        vocab,
        gt,
        responses,
        texts,
    }
}
