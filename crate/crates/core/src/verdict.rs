//! k-threshold voting over the judgement tensor.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageId;
use crate::judge::{Judgement, JudgementTensor};
use crate::vocab::ClassId;

/// Cell value meaning "no confident prediction".
pub const IGNORE: i8 = -1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerdictError {
    #[error("voting threshold k={k} is outside 1..={nm}")]
    KOutOfRange { k: usize, nm: usize },
    #[error("voting threshold k={k} allows both outcomes for nm={nm} (need 2k > nm)")]
    NotExclusive { k: usize, nm: usize },
    #[error("vote label {label} implies k={expected} for nm={nm}, got k={k}")]
    LabelMismatch {
        label: VoteLabel,
        k: usize,
        expected: usize,
        nm: usize,
    },
    #[error("prediction matrix shape does not match its cells")]
    Shape,
    #[error("prediction cell value {0} is not -1, 0 or 1")]
    BadCell(i8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteLabel {
    Unanimous,
    AllButOne,
    SimpleMajority,
    Custom,
}

impl VoteLabel {
    /// Threshold implied by the label, `None` for custom.
    pub fn k_for(self, nm: usize) -> Option<usize> {
        match self {
            VoteLabel::Unanimous => Some(nm),
            VoteLabel::AllButOne => nm.checked_sub(1),
            VoteLabel::SimpleMajority => Some((nm + 2) / 2),
            VoteLabel::Custom => None,
        }
    }
}

impl fmt::Display for VoteLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoteLabel::Unanimous => "unanimous",
            VoteLabel::AllButOne => "all_but_one",
            VoteLabel::SimpleMajority => "simple_majority",
            VoteLabel::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteConfig {
    pub k: usize,
    pub label: VoteLabel,
}

impl VoteConfig {
    pub fn unanimous(nm: usize) -> Self {
        Self::labelled(VoteLabel::Unanimous, nm)
    }

    pub fn all_but_one(nm: usize) -> Self {
        Self::labelled(VoteLabel::AllButOne, nm)
    }

    pub fn simple_majority(nm: usize) -> Self {
        Self::labelled(VoteLabel::SimpleMajority, nm)
    }

    fn labelled(label: VoteLabel, nm: usize) -> Self {
        Self {
            k: label.k_for(nm).unwrap_or(0),
            label,
        }
    }

    /// Threshold `k` with the first matching named label, else custom.
    pub fn from_k(k: usize, nm: usize) -> Self {
        let label = [
            VoteLabel::Unanimous,
            VoteLabel::AllButOne,
            VoteLabel::SimpleMajority,
        ]
        .into_iter()
        .find(|l| l.k_for(nm) == Some(k))
        .unwrap_or(VoteLabel::Custom);
        Self { k, label }
    }

    pub fn validate(&self, nm: usize) -> Result<(), VerdictError> {
        let k = self.k;
        if k < 1 || k > nm {
            return Err(VerdictError::KOutOfRange { k, nm });
        }
        if 2 * k <= nm {
            return Err(VerdictError::NotExclusive { k, nm });
        }
        match self.label.k_for(nm) {
            Some(expected) if expected != k => Err(VerdictError::LabelMismatch {
                label: self.label,
                k,
                expected,
                nm,
            }),
            _ => Ok(()),
        }
    }
}

/// Vote one cell: 1 when at least `k` voters say yes, 0 when at least `k` say
/// no, otherwise ignore. Invalid votes count toward neither side.
pub fn vote_cell(votes: &[Judgement], k: usize) -> i8 {
    let yes = votes.iter().filter(|&&v| v == Judgement::Yes).count();
    let no = votes.iter().filter(|&&v| v == Judgement::No).count();
    if yes >= k {
        1
    } else if no >= k {
        0
    } else {
        IGNORE
    }
}

/// Voted predictions, rows per image and columns per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    images: Vec<ImageId>,
    classes: Vec<ClassId>,
    cells: Vec<i8>,
    k: usize,
    nm: usize,
    /// Whether any vote behind this matrix was unparseable.
    any_invalid: bool,
}

impl PredictionMatrix {
    /// Build from explicit row-major cells, e.g. for fixtures.
    pub fn from_cells(
        images: Vec<ImageId>,
        classes: Vec<ClassId>,
        cells: Vec<i8>,
        config: VoteConfig,
        nm: usize,
    ) -> Result<Self, VerdictError> {
        config.validate(nm)?;
        if cells.len() != images.len() * classes.len() {
            return Err(VerdictError::Shape);
        }
        if let Some(&bad) = cells.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(VerdictError::BadCell(bad));
        }
        Ok(Self {
            images,
            classes,
            cells,
            k: config.k,
            nm,
            any_invalid: false,
        })
    }

    pub fn images(&self) -> &[ImageId] {
        &self.images
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn nm(&self) -> usize {
        self.nm
    }

    pub fn any_invalid(&self) -> bool {
        self.any_invalid
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.cells[row * self.classes.len() + col]
    }

    pub fn cells(&self) -> &[i8] {
        &self.cells
    }

    pub fn ignored(&self) -> usize {
        self.cells.iter().filter(|&&c| c == IGNORE).count()
    }

    /// Audit export: header then one `image_id,class_id,value` line per cell.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "image_id,class_id,value")?;
        for (r, image) in self.images.iter().enumerate() {
            for (c, class) in self.classes.iter().enumerate() {
                writeln!(out, "{image},{class},{}", self.get(r, c))?;
            }
        }
        Ok(())
    }
}

pub fn apply_voting(
    tensor: &JudgementTensor,
    config: VoteConfig,
) -> Result<PredictionMatrix, VerdictError> {
    let nm = tensor.nm();
    config.validate(nm)?;
    let (rows, cols) = (tensor.image_ids().len(), tensor.class_ids().len());
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            cells.push(vote_cell(tensor.votes(r, c), config.k));
        }
    }
    Ok(PredictionMatrix {
        images: tensor.image_ids().to_vec(),
        classes: tensor.class_ids().to_vec(),
        cells,
        k: config.k,
        nm,
        any_invalid: tensor.invalid_count() > 0,
    })
}
