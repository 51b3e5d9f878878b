//! Free-form model responses: ingestion, validation and length statistics.
//!
//! Response files hold one JSON object per line:
//! `{"model_id": ..., "image_id": ..., "prompt": ..., "response": ...}` with an
//! optional `generation_meta` object carried through untouched.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageId;

/// The single instruction every model is asked for its description.
pub const CANONICAL_PROMPT: &str = "Describe this image in detail.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub model_id: String,
    pub image_id: ImageId,
    pub prompt: String,
    #[serde(rename = "response")]
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_meta: Option<serde_json::Map<String, serde_json::Value>>,
}

#[derive(Debug, Error)]
pub enum ResponseError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate response for image {0}")]
    Duplicate(ImageId),
    #[error("response for image {0} which is not in the dataset")]
    UnknownImage(ImageId),
    #[error("line {line}: empty response for image {image} (set allow_empty to accept)")]
    EmptyResponse { line: usize, image: ImageId },
    #[error("response file mixes models {0:?} and {1:?}")]
    MixedModels(String, String),
    #[error("no responses to summarize")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub canonical_prompt: String,
    pub allow_empty: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            canonical_prompt: CANONICAL_PROMPT.to_string(),
            allow_empty: false,
        }
    }
}

/// All responses of one model, keyed by image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResponseSet {
    pub model_id: Option<String>,
    pub records: BTreeMap<ImageId, ResponseRecord>,
    /// Fraction of dataset images that have a response.
    pub coverage: f64,
    /// Records whose prompt differs from the canonical one.
    pub prompt_mismatches: usize,
}

impl ResponseSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_ids(&self) -> Vec<ImageId> {
        self.records.keys().copied().collect()
    }

    pub fn texts(&self) -> BTreeMap<ImageId, String> {
        self.records
            .iter()
            .map(|(&id, r)| (id, r.response_text.clone()))
            .collect()
    }
}

pub fn ingest_responses(
    path: impl AsRef<Path>,
    dataset_images: &[ImageId],
    options: &IngestOptions,
) -> Result<ResponseSet, ResponseError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| ResponseError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        lines.push(line.map_err(|source| ResponseError::Io {
            path: path.display().to_string(),
            source,
        })?);
    }
    ingest_lines(lines.iter().map(String::as_str), dataset_images, options)
}

/// Ingest from in-memory lines; blank lines are skipped.
pub fn ingest_lines<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    dataset_images: &[ImageId],
    options: &IngestOptions,
) -> Result<ResponseSet, ResponseError> {
    let known: HashSet<ImageId> = dataset_images.iter().copied().collect();
    let mut set = ResponseSet::default();
    for (i, line) in lines.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ResponseRecord =
            serde_json::from_str(line).map_err(|source| ResponseError::Parse {
                line: i + 1,
                source,
            })?;
        if !known.contains(&record.image_id) {
            return Err(ResponseError::UnknownImage(record.image_id));
        }
        if record.response_text.is_empty() && !options.allow_empty {
            return Err(ResponseError::EmptyResponse {
                line: i + 1,
                image: record.image_id,
            });
        }
        match &set.model_id {
            None => set.model_id = Some(record.model_id.clone()),
            Some(m) if *m != record.model_id => {
                let (a, b) = if *m < record.model_id {
                    (m.clone(), record.model_id.clone())
                } else {
                    (record.model_id.clone(), m.clone())
                };
                return Err(ResponseError::MixedModels(a, b));
            }
            Some(_) => {}
        }
        if record.prompt != options.canonical_prompt {
            set.prompt_mismatches += 1;
        }
        if set
            .records
            .insert(record.image_id, record.clone())
            .is_some()
        {
            return Err(ResponseError::Duplicate(record.image_id));
        }
    }
    if set.prompt_mismatches > 0 {
        log::warn!(
            "{} responses were generated with a non-canonical prompt",
            set.prompt_mismatches
        );
    }
    set.coverage = if known.is_empty() {
        0.0
    } else {
        set.records.len() as f64 / known.len() as f64
    };
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    /// Lower median for even counts.
    pub median_chars: usize,
    pub mean_chars: f64,
    pub min_chars: usize,
    pub max_chars: usize,
}

/// Character-count statistics (Unicode scalar values).
pub fn length_stats(set: &ResponseSet) -> Result<LengthStats, ResponseError> {
    lengths_stats(
        set.records
            .values()
            .map(|r| r.response_text.chars().count()),
    )
}

fn lengths_stats(lengths: impl Iterator<Item = usize>) -> Result<LengthStats, ResponseError> {
    let mut lengths: Vec<usize> = lengths.collect();
    if lengths.is_empty() {
        return Err(ResponseError::Empty);
    }
    lengths.sort_unstable();
    let n = lengths.len();
    Ok(LengthStats {
        count: n,
        median_chars: lengths[(n - 1) / 2],
        mean_chars: lengths.iter().sum::<usize>() as f64 / n as f64,
        min_chars: lengths[0],
        max_chars: lengths[n - 1],
    })
}
