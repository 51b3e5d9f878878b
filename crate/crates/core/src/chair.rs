//! Caption hallucination ratios by exact phrase matching against the
//! vocabulary names and synonyms.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CaptionIndex, ImageId, InstanceAnnotation};
use crate::vocab::{ClassId, ClassVocabulary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChairError {
    #[error("no ground-truth object set for image {0}")]
    MissingGt(ImageId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    /// Matched text as it appears in the lowercased input.
    pub phrase: String,
    pub class_id: ClassId,
    /// Byte range into the lowercased input.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub caption: String,
    pub mentions: Vec<Mention>,
}

impl ExtractionResult {
    /// Distinct classes mentioned.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.mentions.iter().map(|m| m.class_id).collect()
    }
}

/// Phrase matcher built once per vocabulary.
#[derive(Debug, Clone)]
pub struct PhraseMatcher {
    phrases: HashMap<String, ClassId>,
    max_tokens: usize,
}

fn tokens(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

impl PhraseMatcher {
    pub fn new(vocab: &ClassVocabulary) -> Self {
        let mut phrases = HashMap::new();
        let mut max_tokens = 1;
        for class in vocab.classes() {
            for phrase in class.phrases() {
                let lower = phrase.to_lowercase();
                let words: Vec<&str> = tokens(&lower).iter().map(|&(s, e)| &lower[s..e]).collect();
                if words.is_empty() {
                    continue;
                }
                max_tokens = max_tokens.max(words.len());
                phrases.insert(words.join(" "), class.id);
            }
        }
        Self {
            phrases,
            max_tokens,
        }
    }

    /// Class for `words`, letting the last word carry a plural "s"/"es".
    fn lookup(&self, words: &[&str]) -> Option<ClassId> {
        let (last, head) = words.split_last()?;
        let mut key = head.join(" ");
        if !key.is_empty() {
            key.push(' ');
        }
        let base = key.len();
        let forms = [Some(*last), last.strip_suffix('s'), last.strip_suffix("es")];
        for form in forms.into_iter().flatten().filter(|f| !f.is_empty()) {
            key.truncate(base);
            key.push_str(form);
            if let Some(&id) = self.phrases.get(&key) {
                return Some(id);
            }
        }
        None
    }

    /// Leftmost-longest whole-word matching over the lowercased text.
    pub fn extract(&self, text: &str) -> ExtractionResult {
        let lower = text.to_lowercase();
        let spans = tokens(&lower);
        let words: Vec<&str> = spans.iter().map(|&(s, e)| &lower[s..e]).collect();
        let mut mentions = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let longest = self.max_tokens.min(words.len() - i);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| self.lookup(&words[i..i + len]).map(|id| (len, id)));
            match hit {
                Some((len, class_id)) => {
                    let span = (spans[i].0, spans[i + len - 1].1);
                    mentions.push(Mention {
                        phrase: lower[span.0..span.1].to_string(),
                        class_id,
                        span,
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        ExtractionResult {
            caption: text.to_string(),
            mentions,
        }
    }
}

pub fn extract_objects(text: &str, vocab: &ClassVocabulary) -> ExtractionResult {
    PhraseMatcher::new(vocab).extract(text)
}

pub type ChairGroundTruth = BTreeMap<ImageId, BTreeSet<ClassId>>;

/// Per image, annotated classes united with classes found in its reference captions.
pub fn build_chair_gt(
    images: &[ImageId],
    annotations: &[InstanceAnnotation],
    captions: &CaptionIndex,
    vocab: &ClassVocabulary,
) -> ChairGroundTruth {
    let matcher = PhraseMatcher::new(vocab);
    let mut gt: ChairGroundTruth = images.iter().map(|&id| (id, BTreeSet::new())).collect();
    for a in annotations {
        if let Some(set) = gt.get_mut(&a.image_id) {
            set.insert(a.class_id);
        }
    }
    for (id, set) in gt.iter_mut() {
        for caption in captions.get(*id) {
            set.extend(matcher.extract(caption).classes());
        }
    }
    gt
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_i: f64,
    pub chair_s: f64,
    pub predicted_objects: u64,
    pub hallucinated_objects: u64,
    pub sentences: u64,
    pub sentences_with_hallucination: u64,
    /// No objects were extracted at all; chair_i was set to 0.
    pub degenerate: bool,
}

/// Each text is one unit; each distinct class counts once per text.
pub fn chair_scores(
    predicted: &BTreeMap<ImageId, String>,
    gt: &ChairGroundTruth,
    vocab: &ClassVocabulary,
) -> Result<ChairScores, ChairError> {
    let matcher = PhraseMatcher::new(vocab);
    let (mut objects, mut hallucinated, mut bad_texts) = (0u64, 0u64, 0u64);
    for (id, text) in predicted {
        let truth = gt.get(id).ok_or(ChairError::MissingGt(*id))?;
        let classes = matcher.extract(text).classes();
        let wrong = classes.iter().filter(|c| !truth.contains(c)).count() as u64;
        objects += classes.len() as u64;
        hallucinated += wrong;
        bad_texts += u64::from(wrong > 0);
    }
    let sentences = predicted.len() as u64;
    let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(ChairScores {
        chair_i: ratio(hallucinated, objects),
        chair_s: ratio(bad_texts, sentences),
        predicted_objects: objects,
        hallucinated_objects: hallucinated,
        sentences,
        sentences_with_hallucination: bad_texts,
        degenerate: objects == 0,
    })
}
