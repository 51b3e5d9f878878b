//! Object-enumeration training records: present classes with a coarse 3x3
//! location, followed by sampled absent classes.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    BBox, CooccurrenceMatrix, ImageId, ImageRecord, InstanceAnnotation, InstanceSet,
};
use crate::vocab::ClassVocabulary;

pub const INSTRUCTION: &str = "<image> Give a list of objects and locations in the image.";
pub const ABSENT: &str = "absent";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("image {0} has degenerate dimensions")]
    BadDimensions(ImageId),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("co-occurrence matrix has {matrix} classes, vocabulary has {vocab}")]
    CooccurrenceSize { matrix: usize, vocab: usize },
    #[error("annotation for image {0} uses a class outside the vocabulary")]
    UnknownClass(ImageId),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("line {0} is not of the form \"name [label]\"")]
    Shape(usize),
    #[error("line {0} has unknown label {1:?}")]
    Label(usize, String),
}

/// One of the nine cells of a 3x3 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCell {
    /// 0 = top, 2 = bottom.
    pub row: u8,
    /// 0 = left, 2 = right.
    pub col: u8,
}

impl GridCell {
    pub fn label(self) -> &'static str {
        const NAMES: [[&str; 3]; 3] = [
            ["top left", "top center", "top right"],
            ["middle left", "center", "middle right"],
            ["bottom left", "bottom center", "bottom right"],
        ];
        NAMES[self.row as usize][self.col as usize]
    }

    pub fn all() -> impl Iterator<Item = GridCell> {
        (0..3).flat_map(|row| (0..3).map(move |col| GridCell { row, col }))
    }
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    At(GridCell),
    Absent,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::At(cell) => cell.fmt(f),
            Label::Absent => f.write_str(ABSENT),
        }
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        if s == ABSENT {
            return Ok(Label::Absent);
        }
        GridCell::all()
            .find(|c| c.label() == s)
            .map(Label::At)
            .ok_or(())
    }
}

/// Thirds index for a coordinate; boundaries go to the higher cell and
/// anything at or past the far edge lands in the last cell.
fn third(center: f64, extent: f64) -> u8 {
    if 3.0 * center < extent {
        0
    } else if 3.0 * center < 2.0 * extent {
        1
    } else {
        2
    }
}

/// Grid cell of the box center, y growing downward.
pub fn grid_location(bbox: &BBox, width: f64, height: f64) -> Option<GridCell> {
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return None;
    }
    let (cx, cy) = bbox.center();
    Some(GridCell {
        row: third(cy, height),
        col: third(cx, width),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub negatives_per_image: usize,
    /// 1 samples by co-occurrence only, 0 uniformly.
    pub cooccurrence_bias_weight: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            negatives_per_image: 3,
            cooccurrence_bias_weight: 1.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.cooccurrence_bias_weight) {
            return Err(AugmentError::Config(format!(
                "cooccurrence_bias_weight must be in [0, 1], got {}",
                self.cooccurrence_bias_weight
            )));
        }
        Ok(())
    }
}

/// Independent random stream for one image.
pub fn image_rng(seed: u64, image: ImageId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image.0);
    rng
}

/// Draw up to `config.negatives_per_image` distinct class columns not in
/// `present`, one at a time without replacement. Returned in column order.
///
/// Each draw weighs absent class `c` by
/// `bias * m_c / sum(m) + (1 - bias) / n_absent` with
/// `m_c = max over present p of cooc[c][p]`, falling back to uniform when
/// every remaining weight is zero.
pub fn sample_negatives(
    present: &[usize],
    cooc: &CooccurrenceMatrix,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = cooc.size();
    let mut pool: Vec<(usize, f64)> = (0..n)
        .filter(|c| !present.contains(c))
        .map(|c| {
            let m = present.iter().map(|&p| cooc.get(c, p)).max().unwrap_or(0);
            (c, m as f64)
        })
        .collect();
    let bias = config.cooccurrence_bias_weight;
    let mut picked = Vec::new();
    while picked.len() < config.negatives_per_image && !pool.is_empty() {
        let mass: f64 = pool.iter().map(|&(_, m)| m).sum();
        let uniform = 1.0 / pool.len() as f64;
        let weights: Vec<f64> = pool
            .iter()
            .map(|&(_, m)| {
                let co = if mass > 0.0 { m / mass } else { 0.0 };
                bias * co + (1.0 - bias) * uniform
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = pool.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            // never land on a zero-weight entry through rounding
            if weights[chosen] == 0.0 {
                chosen = weights.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..pool.len())
        };
        picked.push(pool.remove(pick).0);
    }
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationRecord {
    pub image_id: ImageId,
    #[serde(skip)]
    pub lines: Vec<(String, Label)>,
    pub instruction: String,
    pub response: String,
}

pub fn render_response(lines: &[(String, Label)]) -> String {
    lines
        .iter()
        .map(|(name, label)| format!("{name} [{label}]"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parse a rendered response back into (class name, label) lines.
pub fn parse_response(response: &str) -> Result<Vec<(String, Label)>, GrammarError> {
    if response.is_empty() {
        return Ok(Vec::new());
    }
    response
        .split('\n')
        .enumerate()
        .map(|(i, line)| {
            let (name, rest) = line.rsplit_once(" [").ok_or(GrammarError::Shape(i + 1))?;
            let label = rest.strip_suffix(']').ok_or(GrammarError::Shape(i + 1))?;
            if name.is_empty() || name.trim() != name {
                return Err(GrammarError::Shape(i + 1));
            }
            let label = label
                .parse::<Label>()
                .map_err(|_| GrammarError::Label(i + 1, label.to_string()))?;
            Ok((name.to_string(), label))
        })
        .collect()
}

/// Representative box of a class: largest area, ties broken by position.
fn representative<'a>(boxes: &[&'a BBox]) -> &'a BBox {
    boxes
        .iter()
        .copied()
        .max_by(|a, b| {
            a.area()
                .total_cmp(&b.area())
                .then_with(|| b.y.total_cmp(&a.y))
                .then_with(|| b.x.total_cmp(&a.x))
                .then_with(|| b.w.total_cmp(&a.w))
        })
        .expect("at least one box")
}

pub fn build_enumeration_record(
    image: &ImageRecord,
    annotations: &[&InstanceAnnotation],
    vocab: &ClassVocabulary,
    cooc: &CooccurrenceMatrix,
    config: &AugmentConfig,
) -> Result<EnumerationRecord, AugmentError> {
    config.validate()?;
    if cooc.size() != vocab.len() {
        return Err(AugmentError::CooccurrenceSize {
            matrix: cooc.size(),
            vocab: vocab.len(),
        });
    }
    let (w, h) = (image.width as f64, image.height as f64);
    let mut boxes: Vec<Vec<&BBox>> = vec![Vec::new(); vocab.len()];
    for a in annotations {
        let col = vocab
            .position(a.class_id)
            .ok_or(AugmentError::UnknownClass(image.id))?;
        boxes[col].push(&a.bbox);
    }
    let present: Vec<usize> = (0..vocab.len()).filter(|&c| !boxes[c].is_empty()).collect();
    let mut lines = Vec::with_capacity(present.len() + config.negatives_per_image);
    for &c in &present {
        let cell = grid_location(representative(&boxes[c]), w, h)
            .ok_or(AugmentError::BadDimensions(image.id))?;
        lines.push((vocab.classes()[c].name.clone(), Label::At(cell)));
    }
    let mut rng = image_rng(config.seed, image.id);
    for c in sample_negatives(&present, cooc, config, &mut rng) {
        lines.push((vocab.classes()[c].name.clone(), Label::Absent));
    }
    Ok(EnumerationRecord {
        image_id: image.id,
        instruction: INSTRUCTION.to_string(),
        response: render_response(&lines),
        lines,
    })
}

/// Write one JSON line per image in image-id order; returns the record count.
pub fn augment_dataset(
    dataset: &InstanceSet,
    vocab: &ClassVocabulary,
    cooc: &CooccurrenceMatrix,
    config: &AugmentConfig,
    out_path: impl AsRef<Path>,
) -> Result<usize, AugmentError> {
    let path = out_path.as_ref();
    let io = |source| AugmentError::Io {
        path: path.display().to_string(),
        source,
    };
    config.validate()?;
    let by_image = dataset.annotations_by_image();
    let mut images: Vec<&ImageRecord> = dataset.images.iter().collect();
    images.sort_by_key(|i| i.id);
    let mut records = Vec::with_capacity(images.len());
    for image in images {
        let anns = by_image.get(&image.id).map(Vec::as_slice).unwrap_or(&[]);
        records.push(build_enumeration_record(image, anns, vocab, cooc, config)?);
    }
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for r in &records {
        serde_json::to_writer(&mut out, r).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_cooccurrence;
    use crate::vocab::{ClassEntry, ClassId};
    use crate::GroundTruthMatrix;
    use proptest::prelude::*;

    fn at(cx: f64, cy: f64, w: f64, h: f64) -> &'static str {
        grid_location(&BBox::new(cx * w - 1.0, cy * h - 1.0, 2.0, 2.0), w, h)
            .unwrap()
            .label()
    }

    #[test]
    fn documented_cells() {
        assert_eq!(at(0.5, 0.5, 600.0, 300.0), "center");
        assert_eq!(at(0.1, 0.9, 600.0, 300.0), "bottom left");
        assert_eq!(at(0.95, 0.05, 600.0, 300.0), "top right");
        assert_eq!(at(0.5, 0.1, 600.0, 300.0), "top center");
        assert_eq!(at(0.9, 0.5, 600.0, 300.0), "middle right");
        assert!(grid_location(&BBox::new(0.0, 0.0, 1.0, 1.0), 0.0, 10.0).is_none());
    }

    #[test]
    fn boundaries_go_up() {
        // centers exactly at W/3 and 2W/3, and on the far edge
        let cell = |cx: f64| {
            grid_location(&BBox::new(cx, 0.0, 0.0, 0.0), 300.0, 300.0)
                .unwrap()
                .col
        };
        assert_eq!(cell(99.999), 0);
        assert_eq!(cell(100.0), 1);
        assert_eq!(cell(200.0), 2);
        assert_eq!(cell(300.0), 2);
    }

    #[test]
    fn grammar_round_trip_and_errors() {
        let lines = vec![
            (
                "traffic light".to_string(),
                Label::At(GridCell { row: 0, col: 2 }),
            ),
            ("dog".to_string(), Label::Absent),
        ];
        let text = render_response(&lines);
        assert_eq!(text, "traffic light [top right]\ndog [absent]");
        assert_eq!(parse_response(&text).unwrap(), lines);
        assert_eq!(parse_response("").unwrap(), vec![]);
        assert_eq!(parse_response("dog"), Err(GrammarError::Shape(1)));
        assert_eq!(
            parse_response("dog [left]"),
            Err(GrammarError::Label(1, "left".into()))
        );
        for cell in GridCell::all() {
            assert_eq!(cell.label().parse::<Label>(), Ok(Label::At(cell)));
        }
    }

    fn cooc_fixture() -> CooccurrenceMatrix {
        // classes: 0 person, 1 chair, 2 cat, 3 kite
        let mut counts = vec![0u64; 16];
        let mut set = |a: usize, b: usize, v: u64| {
            counts[a * 4 + b] = v;
            counts[b * 4 + a] = v;
        };
        set(0, 0, 100);
        set(1, 1, 60);
        set(2, 2, 20);
        set(3, 3, 10);
        set(0, 1, 50);
        set(0, 2, 2);
        CooccurrenceMatrix::from_counts(4, counts)
    }

    #[test]
    fn negatives_basics() {
        let cooc = cooc_fixture();
        let mut rng = image_rng(1, ImageId(1));
        let none = AugmentConfig {
            negatives_per_image: 0,
            ..Default::default()
        };
        assert!(sample_negatives(&[0], &cooc, &none, &mut rng).is_empty());
        let many = AugmentConfig {
            negatives_per_image: 10,
            ..Default::default()
        };
        // zero-weight classes are still reachable through the uniform fallback
        assert_eq!(
            sample_negatives(&[0], &cooc, &many, &mut rng),
            vec![1, 2, 3]
        );
        let one = AugmentConfig {
            negatives_per_image: 1,
            ..Default::default()
        };
        let a = sample_negatives(&[0], &cooc, &one, &mut image_rng(5, ImageId(3)));
        let b = sample_negatives(&[0], &cooc, &one, &mut image_rng(5, ImageId(3)));
        assert_eq!(a, b);
        // kite never co-occurs with person, so pure co-occurrence never picks it first
        for seed in 0..200 {
            assert_ne!(
                sample_negatives(&[0], &cooc, &one, &mut image_rng(seed, ImageId(0))),
                vec![3]
            );
        }
    }

    #[test]
    fn unbiased_sampling_is_uniform() {
        let cooc = cooc_fixture();
        let cfg = AugmentConfig {
            negatives_per_image: 1,
            cooccurrence_bias_weight: 0.0,
            seed: 0,
        };
        let draws = 9000;
        let mut counts = [0f64; 4];
        for i in 0..draws {
            let pick = sample_negatives(&[0], &cooc, &cfg, &mut image_rng(11, ImageId(i)));
            counts[pick[0]] += 1.0;
        }
        assert_eq!(counts[0], 0.0);
        let expected = draws as f64 / 3.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|o| (o - expected).powi(2) / expected)
            .sum();
        // 2 degrees of freedom, 99.9th percentile
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts = {counts:?}");
    }

    fn vocab4() -> ClassVocabulary {
        ClassVocabulary::new(vec![
            ClassEntry::new(1, "person"),
            ClassEntry::new(2, "chair"),
            ClassEntry::new(3, "cat"),
            ClassEntry::new(4, "kite"),
        ])
        .unwrap()
    }

    fn ann(class: u32, x: f64, y: f64, w: f64, h: f64) -> InstanceAnnotation {
        InstanceAnnotation {
            image_id: ImageId(7),
            class_id: ClassId(class),
            bbox: BBox::new(x, y, w, h),
            iscrowd: false,
        }
    }

    fn image() -> ImageRecord {
        ImageRecord {
            id: ImageId(7),
            width: 300,
            height: 300,
            file_name: "x.jpg".into(),
        }
    }

    #[test]
    fn record_layout() {
        let v = vocab4();
        let cooc = cooc_fixture();
        let zero = AugmentConfig {
            negatives_per_image: 0,
            ..Default::default()
        };
        let a = ann(1, 140.0, 140.0, 20.0, 20.0);
        let r = build_enumeration_record(&image(), &[&a], &v, &cooc, &zero).unwrap();
        assert_eq!(r.response, "person [center]");
        assert_eq!(r.instruction, INSTRUCTION);

        // larger box wins regardless of input order
        let small = ann(1, 0.0, 0.0, 10.0, 10.0);
        let big = ann(1, 250.0, 250.0, 40.0, 40.0);
        for anns in [[&small, &big], [&big, &small]] {
            let r = build_enumeration_record(&image(), &anns, &v, &cooc, &zero).unwrap();
            assert_eq!(r.response, "person [bottom right]");
        }

        let cat = ann(3, 0.0, 0.0, 30.0, 30.0);
        let two = AugmentConfig {
            negatives_per_image: 2,
            ..Default::default()
        };
        let r = build_enumeration_record(&image(), &[&cat, &big], &v, &cooc, &two).unwrap();
        let lines = parse_response(&r.response).unwrap();
        assert_eq!(
            lines[0],
            ("person".into(), Label::At(GridCell { row: 2, col: 2 }))
        );
        assert_eq!(
            lines[1],
            ("cat".into(), Label::At(GridCell { row: 0, col: 0 }))
        );
        assert_eq!(
            &lines[2..],
            &[
                ("chair".into(), Label::Absent),
                ("kite".into(), Label::Absent)
            ]
        );
    }

    #[test]
    fn record_errors() {
        let v = vocab4();
        let bad = AugmentConfig {
            cooccurrence_bias_weight: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            build_enumeration_record(&image(), &[], &v, &cooc_fixture(), &bad),
            Err(AugmentError::Config(_))
        ));
        let tiny = CooccurrenceMatrix::from_counts(1, vec![0]);
        assert!(matches!(
            build_enumeration_record(&image(), &[], &v, &tiny, &AugmentConfig::default()),
            Err(AugmentError::CooccurrenceSize { .. })
        ));
        let stray = ann(99, 0.0, 0.0, 1.0, 1.0);
        assert!(matches!(
            build_enumeration_record(
                &image(),
                &[&stray],
                &v,
                &cooc_fixture(),
                &AugmentConfig::default()
            ),
            Err(AugmentError::UnknownClass(_))
        ));
    }

    #[test]
    fn cooccurrence_from_presence_feeds_sampling() {
        let gt = GroundTruthMatrix::from_rows(
            vec![ImageId(1), ImageId(2)],
            vocab4().ids(),
            &[
                vec![true, true, false, false],
                vec![true, false, true, false],
            ],
        );
        let cooc = build_cooccurrence(&gt);
        let cfg = AugmentConfig {
            negatives_per_image: 2,
            ..Default::default()
        };
        let picked = sample_negatives(&[0], &cooc, &cfg, &mut image_rng(0, ImageId(0)));
        assert_eq!(picked, vec![1, 2]);
    }

    proptest! {
        #[test]
        fn grid_is_scale_invariant(x in 0.0..1.0f64, y in 0.0..1.0f64, bw in 0.0..0.5f64, bh in 0.0..0.5f64, e in -6i32..10) {
            let (w, h) = (640.0, 480.0);
            let b = BBox::new(x * w * 0.5, y * h * 0.5, bw * w, bh * h);
            // powers of two keep every product exact
            let s = 2f64.powi(e);
            let scaled = BBox::new(b.x * s, b.y * s, b.w * s, b.h * s);
            prop_assert_eq!(grid_location(&b, w, h), grid_location(&scaled, w * s, h * s));
        }
    }
}
