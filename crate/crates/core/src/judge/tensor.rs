use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::QuestionTemplate;
use crate::dataset::ImageId;
use crate::vocab::ClassId;

/// One (judge, question) vote on one (image, class) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgement {
    No,
    Yes,
    /// The judge answer could not be read as yes/no, even after a re-query.
    Invalid,
}

impl Judgement {
    fn code(self) -> char {
        match self {
            Judgement::No => 'n',
            Judgement::Yes => 'y',
            Judgement::Invalid => 'x',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        match c {
            'n' => Some(Judgement::No),
            'y' => Some(Judgement::Yes),
            'x' => Some(Judgement::Invalid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeInfo {
    pub judge_id: String,
    pub location: String,
    pub decoding: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub judges: Vec<JudgeInfo>,
    pub templates: Vec<QuestionTemplate>,
    pub prompt_digest: String,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor shape does not match its cells")]
    Shape,
    #[error("unknown cell code {0:?}")]
    Code(char),
    #[error("tensor file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Votes indexed by (image, class, voter) where voter = judge * M + question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TensorFile", into = "TensorFile")]
pub struct JudgementTensor {
    image_ids: Vec<ImageId>,
    class_ids: Vec<ClassId>,
    n_judges: usize,
    n_questions: usize,
    cells: Vec<Judgement>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    image_ids: Vec<ImageId>,
    class_ids: Vec<ClassId>,
    n_judges: usize,
    n_questions: usize,
    provenance: Provenance,
    /// One row of `nm` codes per (image, class) cell.
    cells: Vec<String>,
}

impl TryFrom<TensorFile> for JudgementTensor {
    type Error = TensorError;

    fn try_from(f: TensorFile) -> Result<Self, TensorError> {
        let nm = f.n_judges * f.n_questions;
        if f.cells.len() != f.image_ids.len() * f.class_ids.len() {
            return Err(TensorError::Shape);
        }
        let mut cells = Vec::with_capacity(f.cells.len() * nm);
        for row in &f.cells {
            if row.chars().count() != nm {
                return Err(TensorError::Shape);
            }
            for c in row.chars() {
                cells.push(Judgement::from_code(c).ok_or(TensorError::Code(c))?);
            }
        }
        JudgementTensor::new(
            f.image_ids,
            f.class_ids,
            f.n_judges,
            f.n_questions,
            cells,
            f.provenance,
        )
    }
}

impl From<JudgementTensor> for TensorFile {
    fn from(t: JudgementTensor) -> Self {
        let nm = t.nm();
        let cells = t
            .cells
            .chunks(nm.max(1))
            .map(|votes| votes.iter().map(|v| v.code()).collect())
            .collect();
        TensorFile {
            image_ids: t.image_ids,
            class_ids: t.class_ids,
            n_judges: t.n_judges,
            n_questions: t.n_questions,
            provenance: t.provenance,
            cells,
        }
    }
}

impl JudgementTensor {
    pub fn new(
        image_ids: Vec<ImageId>,
        class_ids: Vec<ClassId>,
        n_judges: usize,
        n_questions: usize,
        cells: Vec<Judgement>,
        provenance: Provenance,
    ) -> Result<Self, TensorError> {
        if n_judges == 0
            || n_questions == 0
            || cells.len() != image_ids.len() * class_ids.len() * n_judges * n_questions
        {
            return Err(TensorError::Shape);
        }
        Ok(Self {
            image_ids,
            class_ids,
            n_judges,
            n_questions,
            cells,
            provenance,
        })
    }

    pub fn image_ids(&self) -> &[ImageId] {
        &self.image_ids
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn n_judges(&self) -> usize {
        self.n_judges
    }

    pub fn n_questions(&self) -> usize {
        self.n_questions
    }

    /// Voters per cell.
    pub fn nm(&self) -> usize {
        self.n_judges * self.n_questions
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// All votes for (image row, class column).
    pub fn votes(&self, row: usize, col: usize) -> &[Judgement] {
        let nm = self.nm();
        let start = (row * self.class_ids.len() + col) * nm;
        &self.cells[start..start + nm]
    }

    pub fn get(&self, row: usize, col: usize, judge: usize, question: usize) -> Judgement {
        self.votes(row, col)[judge * self.n_questions + question]
    }

    pub fn cells(&self) -> &[Judgement] {
        &self.cells
    }

    pub fn invalid_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|&&j| j == Judgement::Invalid)
            .count()
    }

    /// Canonical serialization; equal tensors give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("tensor serialization cannot fail")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        Ok(serde_json::from_slice(bytes)?)
    }
}
