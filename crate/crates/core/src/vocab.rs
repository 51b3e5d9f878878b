//! Class vocabulary: names, grammatical articles and synonym lists.
//!
//! Vocabularies are TOML files with one `[[class]]` table per entry:
//!
//! ```toml
//! [[class]]
//! id = 1
//! name = "person"
//! synonyms = ["people", "man", "men"]
//!
//! [[class]]
//! id = 53
//! name = "apple"
//! article = "an"
//! ```
//!
//! `article` and `synonyms` are optional. File order is the column order used
//! by every matrix built against the vocabulary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The 80 COCO detection classes with a best-effort synonym dictionary.
pub const COCO80_TOML: &str = include_str!("../fixtures/coco80.vocab");

/// Stable integer key of a class, as written in the vocabulary file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Article {
    A,
    An,
}

impl Article {
    pub fn as_str(self) -> &'static str {
        match self {
            Article::A => "a",
            Article::An => "an",
        }
    }
}

impl fmt::Display for Article {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub article: Option<Article>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synonyms: Vec<String>,
}

impl ClassEntry {
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        Self {
            id: ClassId(id),
            name: name.into(),
            article: None,
            synonyms: Vec::new(),
        }
    }

    pub fn with_synonyms<I, S>(mut self, synonyms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.synonyms = synonyms.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_article(mut self, article: Article) -> Self {
        self.article = Some(article);
        self
    }

    /// Name followed by all synonyms.
    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.name.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }
}

/// The stored article, or the vowel-letter default when the file has none.
pub fn article_for(entry: &ClassEntry) -> Article {
    entry
        .article
        .unwrap_or_else(|| default_article(&entry.name))
}

fn default_article(name: &str) -> Article {
    match name.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => Article::An,
        _ => Article::A,
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("failed to read vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse vocabulary: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("vocabulary has no classes")]
    Empty,
    #[error("invalid class name {0:?}: names must be non-empty, lowercase and trimmed")]
    InvalidName(String),
    #[error("invalid synonym {synonym:?} for class {class:?}")]
    InvalidSynonym { class: String, synonym: String },
    #[error("duplicate class id {0}")]
    DuplicateId(ClassId),
    #[error("duplicate class name {0:?}")]
    DuplicateName(String),
    #[error("synonym {synonym:?} of class {class:?} repeats or equals the class name")]
    RedundantSynonym { class: String, synonym: String },
    #[error("phrase {phrase:?} maps to both class {first} and class {second}")]
    AmbiguousPhrase {
        phrase: String,
        first: ClassId,
        second: ClassId,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    #[serde(rename = "class", default)]
    classes: Vec<ClassEntry>,
}

/// Ordered, validated class set with a phrase index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    classes: Vec<ClassEntry>,
    index: HashMap<String, ClassId>,
    positions: HashMap<ClassId, usize>,
}

impl ClassVocabulary {
    pub fn new(classes: Vec<ClassEntry>) -> Result<Self, VocabError> {
        if classes.is_empty() {
            return Err(VocabError::Empty);
        }
        let mut index = HashMap::new();
        let mut positions = HashMap::new();
        let mut names = HashSet::new();
        for (pos, entry) in classes.iter().enumerate() {
            if !is_clean_phrase(&entry.name) {
                return Err(VocabError::InvalidName(entry.name.clone()));
            }
            if positions.insert(entry.id, pos).is_some() {
                return Err(VocabError::DuplicateId(entry.id));
            }
            if !names.insert(entry.name.as_str()) {
                return Err(VocabError::DuplicateName(entry.name.clone()));
            }
            let mut seen = HashSet::from([entry.name.as_str()]);
            for syn in &entry.synonyms {
                if !is_clean_phrase(syn) {
                    return Err(VocabError::InvalidSynonym {
                        class: entry.name.clone(),
                        synonym: syn.clone(),
                    });
                }
                if !seen.insert(syn.as_str()) {
                    return Err(VocabError::RedundantSynonym {
                        class: entry.name.clone(),
                        synonym: syn.clone(),
                    });
                }
            }
        }
        for entry in &classes {
            for phrase in entry.phrases() {
                if let Some(&other) = index.get(phrase) {
                    if other != entry.id {
                        return Err(VocabError::AmbiguousPhrase {
                            phrase: phrase.to_string(),
                            first: other,
                            second: entry.id,
                        });
                    }
                }
                index.insert(phrase.to_string(), entry.id);
            }
        }
        Ok(Self {
            classes,
            index,
            positions,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, VocabError> {
        let file: VocabFile = toml::from_str(text)?;
        Self::new(file.classes)
    }

    /// The built-in COCO vocabulary.
    pub fn coco80() -> Self {
        Self::from_toml_str(COCO80_TOML).expect("built-in vocabulary is valid")
    }

    pub fn to_toml_string(&self) -> String {
        let file = VocabFile {
            classes: self.classes.clone(),
        };
        toml::to_string(&file).expect("vocabulary entries always serialize")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    /// Column position of a class id.
    pub fn position(&self, id: ClassId) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassEntry> {
        self.position(id).map(|p| &self.classes[p])
    }

    /// Class whose name (not synonym) equals `name`.
    pub fn by_name(&self, name: &str) -> Option<&ClassEntry> {
        self.lookup(name)
            .and_then(|id| self.get(id))
            .filter(|entry| entry.name == name)
    }

    /// Class for any name or synonym.
    pub fn lookup(&self, phrase: &str) -> Option<ClassId> {
        self.index.get(phrase).copied()
    }

    /// Every indexed phrase, sorted, with its class.
    pub fn phrase_index(&self) -> BTreeMap<&str, ClassId> {
        self.index.iter().map(|(p, &id)| (p.as_str(), id)).collect()
    }
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<ClassVocabulary, VocabError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ClassVocabulary::from_toml_str(&text)
}

fn is_clean_phrase(s: &str) -> bool {
    !s.is_empty() && s.trim() == s && s.to_lowercase() == s
}
