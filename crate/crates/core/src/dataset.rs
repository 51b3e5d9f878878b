//! COCO-format annotation ingestion, the ground-truth presence matrix, class
//! co-occurrence counts and greedy class-coverage subsampling.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::vocab::{ClassId, ClassVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u64);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("categories not present in the vocabulary: {}", .0.join(", "))]
    UnknownCategories(Vec<String>),
    #[error("annotation references undeclared category id {0}")]
    UnknownCategoryId(u64),
    #[error("duplicate image id {0}")]
    DuplicateImage(ImageId),
    #[error("annotation references unknown image id {0}")]
    UnknownImage(ImageId),
    #[error("image {0} has non-positive dimensions")]
    BadDimensions(ImageId),
    #[error("ground-truth cache is corrupt or was built from different inputs")]
    StaleCache,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

/// Pixel box with top-left origin and y growing downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Clamp into `[0, width] x [0, height]`; returns whether anything changed.
    fn clamp_to(&mut self, width: f64, height: f64) -> bool {
        let before = *self;
        let x1 = (self.x + self.w.max(0.0)).clamp(0.0, width);
        let y1 = (self.y + self.h.max(0.0)).clamp(0.0, height);
        self.x = self.x.clamp(0.0, width);
        self.y = self.y.clamp(0.0, height);
        self.w = (x1 - self.x).max(0.0);
        self.h = (y1 - self.y).max(0.0);
        *self != before
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub iscrowd: bool,
}

// Raw COCO schema: only the fields the harness reads.

#[derive(Deserialize)]
struct CocoInstances {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default, deserialize_with = "deserialize_iscrowd")]
    iscrowd: bool,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct CocoCaptions {
    #[serde(default)]
    annotations: Vec<CocoCaption>,
}

#[derive(Deserialize)]
struct CocoCaption {
    image_id: u64,
    caption: String,
}

fn deserialize_iscrowd<'de, D>(deserializer: D) -> Result<bool, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum IsCrowd {
        Bool(bool),
        Int(u8),
    }
    Ok(match Option::<IsCrowd>::deserialize(deserializer)? {
        Some(IsCrowd::Bool(b)) => b,
        Some(IsCrowd::Int(i)) => i != 0,
        None => false,
    })
}

/// Image-level class presence, rows in image order and columns in vocabulary order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMatrix {
    images: Vec<ImageId>,
    classes: Vec<ClassId>,
    bits: Vec<bool>,
    rows: HashMap<ImageId, usize>,
}

impl GroundTruthMatrix {
    /// Build from explicit rows. Panics if any row length differs from `classes`.
    pub fn from_rows(images: Vec<ImageId>, classes: Vec<ClassId>, rows: &[Vec<bool>]) -> Self {
        assert_eq!(images.len(), rows.len(), "one row per image");
        let mut bits = Vec::with_capacity(images.len() * classes.len());
        for row in rows {
            assert_eq!(row.len(), classes.len(), "row width must equal class count");
            bits.extend_from_slice(row);
        }
        Self::from_bits(images, classes, bits)
    }

    fn from_bits(images: Vec<ImageId>, classes: Vec<ClassId>, bits: Vec<bool>) -> Self {
        let rows = images.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Self {
            images,
            classes,
            bits,
            rows,
        }
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

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.classes.len() + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let n = self.classes.len();
        &self.bits[row * n..(row + 1) * n]
    }

    pub fn row_of(&self, image: ImageId) -> Option<usize> {
        self.rows.get(&image).copied()
    }

    /// Column positions present in `row`.
    pub fn present(&self, row: usize) -> Vec<usize> {
        self.row(row)
            .iter()
            .enumerate()
            .filter_map(|(c, &b)| b.then_some(c))
            .collect()
    }

    /// Fraction of set cells.
    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    /// Matrix restricted to `images`, in the given order.
    pub fn select(&self, images: &[ImageId]) -> Result<Self, DatasetError> {
        let mut bits = Vec::with_capacity(images.len() * self.classes.len());
        for &id in images {
            let row = self.row_of(id).ok_or(DatasetError::UnknownImage(id))?;
            bits.extend_from_slice(self.row(row));
        }
        Ok(Self::from_bits(images.to_vec(), self.classes.clone(), bits))
    }

    const MAGIC: &'static [u8; 8] = b"HGTMAT01";

    /// Compact binary form keyed by an input digest.
    pub fn write_binary<W: Write>(&self, mut out: W, digest: &[u8; 32]) -> std::io::Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(digest)?;
        out.write_all(&(self.images.len() as u64).to_le_bytes())?;
        out.write_all(&(self.classes.len() as u64).to_le_bytes())?;
        for id in &self.images {
            out.write_all(&id.0.to_le_bytes())?;
        }
        for id in &self.classes {
            out.write_all(&id.0.to_le_bytes())?;
        }
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.write_all(&packed)
    }

    /// Inverse of [`write_binary`](Self::write_binary); fails unless the stored digest matches.
    pub fn read_binary<R: Read>(mut input: R, digest: &[u8; 32]) -> Result<Self, DatasetError> {
        let mut buf = Vec::new();
        input
            .read_to_end(&mut buf)
            .map_err(|source| DatasetError::Io {
                path: "<gt cache>".into(),
                source,
            })?;
        let mut cur = ByteCursor(&buf);
        if cur.take(8)? != Self::MAGIC || cur.take(32)? != digest {
            return Err(DatasetError::StaleCache);
        }
        let n_images = cur.u64()? as usize;
        let n_classes = cur.u64()? as usize;
        let images = (0..n_images)
            .map(|_| cur.u64().map(ImageId))
            .collect::<Result<Vec<_>, _>>()?;
        let classes = (0..n_classes)
            .map(|_| cur.u32().map(ClassId))
            .collect::<Result<Vec<_>, _>>()?;
        let n = n_images * n_classes;
        let packed = cur.take(n.div_ceil(8))?;
        if !cur.0.is_empty() {
            return Err(DatasetError::StaleCache);
        }
        let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self::from_bits(images, classes, bits))
    }
}

struct ByteCursor<'a>(&'a [u8]);

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.0.len() < n {
            return Err(DatasetError::StaleCache);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parsed instances file.
#[derive(Debug, Clone)]
pub struct InstanceSet {
    /// Sorted by image id.
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<InstanceAnnotation>,
    pub gt: GroundTruthMatrix,
    /// SHA-256 of the raw file bytes.
    pub digest: [u8; 32],
    /// Boxes that had to be clamped into their image.
    pub clamped_boxes: usize,
}

impl InstanceSet {
    pub fn image_ids(&self) -> Vec<ImageId> {
        self.images.iter().map(|i| i.id).collect()
    }

    /// Number of annotations per gt row.
    pub fn instance_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.gt.n_images()];
        for ann in &self.annotations {
            if let Some(r) = self.gt.row_of(ann.image_id) {
                counts[r] += 1;
            }
        }
        counts
    }

    /// Annotations grouped by image id.
    pub fn annotations_by_image(&self) -> BTreeMap<ImageId, Vec<&InstanceAnnotation>> {
        let mut map: BTreeMap<ImageId, Vec<&InstanceAnnotation>> = BTreeMap::new();
        for ann in &self.annotations {
            map.entry(ann.image_id).or_default().push(ann);
        }
        map
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }
}

pub fn load_instances(
    path: impl AsRef<Path>,
    vocab: &ClassVocabulary,
) -> Result<InstanceSet, DatasetError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_instances(&bytes, vocab)
}

pub fn parse_instances(bytes: &[u8], vocab: &ClassVocabulary) -> Result<InstanceSet, DatasetError> {
    let raw: CocoInstances = serde_json::from_slice(bytes)?;

    let mut unknown = Vec::new();
    let mut category_map = HashMap::new();
    for cat in &raw.categories {
        match vocab.by_name(&cat.name) {
            Some(entry) => {
                category_map.insert(cat.id, entry.id);
            }
            None => unknown.push(cat.name.clone()),
        }
    }
    if !unknown.is_empty() {
        return Err(DatasetError::UnknownCategories(unknown));
    }

    let mut images = Vec::with_capacity(raw.images.len());
    let mut seen = HashSet::new();
    for img in raw.images {
        let id = ImageId(img.id);
        if !seen.insert(id) {
            return Err(DatasetError::DuplicateImage(id));
        }
        if img.width == 0 || img.height == 0 {
            return Err(DatasetError::BadDimensions(id));
        }
        images.push(ImageRecord {
            id,
            width: img.width,
            height: img.height,
            file_name: img.file_name,
        });
    }
    images.sort_by_key(|i| i.id);
    let dims: HashMap<ImageId, (f64, f64)> = images
        .iter()
        .map(|i| (i.id, (i.width as f64, i.height as f64)))
        .collect();

    let image_ids: Vec<ImageId> = images.iter().map(|i| i.id).collect();
    let class_ids = vocab.ids();
    let n_classes = class_ids.len();
    let mut bits = vec![false; image_ids.len() * n_classes];
    let rows: HashMap<ImageId, usize> = image_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();

    let mut annotations = Vec::with_capacity(raw.annotations.len());
    let mut clamped_boxes = 0;
    for ann in raw.annotations {
        let image_id = ImageId(ann.image_id);
        let &(w, h) = dims
            .get(&image_id)
            .ok_or(DatasetError::UnknownImage(image_id))?;
        let class_id = *category_map
            .get(&ann.category_id)
            .ok_or(DatasetError::UnknownCategoryId(ann.category_id))?;
        let [x, y, bw, bh] = ann.bbox.unwrap_or([0.0, 0.0, 0.0, 0.0]);
        let mut bbox = BBox::new(x, y, bw, bh);
        if bbox.clamp_to(w, h) {
            clamped_boxes += 1;
        }
        let col = vocab
            .position(class_id)
            .expect("mapped ids come from the vocabulary");
        bits[rows[&image_id] * n_classes + col] = true;
        annotations.push(InstanceAnnotation {
            image_id,
            class_id,
            bbox,
            iscrowd: ann.iscrowd,
        });
    }
    if clamped_boxes > 0 {
        log::warn!("clamped {clamped_boxes} bounding boxes to their image bounds");
    }

    Ok(InstanceSet {
        images,
        annotations,
        gt: GroundTruthMatrix::from_bits(image_ids, class_ids, bits),
        digest: Sha256::digest(bytes).into(),
        clamped_boxes,
    })
}

/// Load the ground-truth matrix through a binary cache keyed by the digest of
/// the instances file and the vocabulary.
pub fn load_gt_cached(
    instances: impl AsRef<Path>,
    vocab: &ClassVocabulary,
    cache: impl AsRef<Path>,
) -> Result<GroundTruthMatrix, DatasetError> {
    let instances = instances.as_ref();
    let cache = cache.as_ref();
    let bytes = std::fs::read(instances).map_err(io_err(instances))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hasher.update(vocab.to_toml_string().as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    if let Ok(file) = std::fs::File::open(cache) {
        match GroundTruthMatrix::read_binary(std::io::BufReader::new(file), &key) {
            Ok(gt) => return Ok(gt),
            Err(DatasetError::StaleCache) => log::info!("rebuilding stale ground-truth cache"),
            Err(e) => return Err(e),
        }
    }
    let set = parse_instances(&bytes, vocab)?;
    let file = std::fs::File::create(cache).map_err(io_err(cache))?;
    let mut out = std::io::BufWriter::new(file);
    set.gt.write_binary(&mut out, &key).map_err(io_err(cache))?;
    out.flush().map_err(io_err(cache))?;
    Ok(set.gt)
}

/// Reference captions keyed by image, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptionIndex {
    pub by_image: BTreeMap<ImageId, Vec<String>>,
}

/// Captions aligned to an image list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignedCaptions {
    pub by_image: BTreeMap<ImageId, Vec<String>>,
    /// Images that had no caption at all.
    pub missing: usize,
}

impl CaptionIndex {
    pub fn len(&self) -> usize {
        self.by_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }

    pub fn get(&self, image: ImageId) -> &[String] {
        self.by_image.get(&image).map_or(&[], Vec::as_slice)
    }

    pub fn align(&self, images: &[ImageId]) -> AlignedCaptions {
        let mut out = AlignedCaptions::default();
        for &id in images {
            let caps = self.get(id).to_vec();
            if caps.is_empty() {
                out.missing += 1;
            }
            out.by_image.insert(id, caps);
        }
        if out.missing > 0 {
            log::warn!("{} images have no reference captions", out.missing);
        }
        out
    }
}

pub fn load_captions(path: impl AsRef<Path>) -> Result<CaptionIndex, DatasetError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_captions(&bytes)
}

pub fn parse_captions(bytes: &[u8]) -> Result<CaptionIndex, DatasetError> {
    let raw: CocoCaptions = serde_json::from_slice(bytes)?;
    let mut index = CaptionIndex::default();
    for cap in raw.annotations {
        index
            .by_image
            .entry(ImageId(cap.image_id))
            .or_default()
            .push(cap.caption);
    }
    Ok(index)
}

/// Symmetric class-pair image counts; the diagonal holds per-class image counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl CooccurrenceMatrix {
    pub fn from_counts(n: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), n * n);
        Self { n, counts }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> u64 {
        self.counts[a * self.n + b]
    }
}

pub fn build_cooccurrence(gt: &GroundTruthMatrix) -> CooccurrenceMatrix {
    let n = gt.n_classes();
    let mut counts = vec![0u64; n * n];
    for r in 0..gt.n_images() {
        let present = gt.present(r);
        for &a in &present {
            for &b in &present {
                counts[a * n + b] += 1;
            }
        }
    }
    CooccurrenceMatrix { n, counts }
}

/// Greedy class-coverage subsample.
///
/// Images are picked one at a time by the number of still-uncovered classes
/// they add, breaking ties by fewer annotated instances and then by lower
/// image id. Once every class present in the pool is covered the remainder is
/// filled by seeded uniform sampling without replacement. `instance_counts` is
/// indexed by gt row.
pub fn natural_subsample(
    gt: &GroundTruthMatrix,
    instance_counts: &[u32],
    target_count: usize,
    seed: u64,
) -> Vec<ImageId> {
    assert_eq!(instance_counts.len(), gt.n_images());
    if target_count >= gt.n_images() {
        return gt.images().to_vec();
    }
    let present: Vec<Vec<usize>> = (0..gt.n_images()).map(|r| gt.present(r)).collect();
    let mut covered = vec![false; gt.n_classes()];
    let mut taken = vec![false; gt.n_images()];
    let mut picked = Vec::with_capacity(target_count);

    // Lazy greedy: marginal gains only shrink, so a popped entry whose
    // recomputed gain still equals its key is the true arg-max.
    #[derive(PartialEq, Eq)]
    struct Candidate {
        gain: usize,
        instances: Reverse<u32>,
        image: Reverse<ImageId>,
        row: usize,
    }
    impl Ord for Candidate {
        fn cmp(&self, other: &Self) -> Ordering {
            (self.gain, self.instances, self.image).cmp(&(other.gain, other.instances, other.image))
        }
    }
    impl PartialOrd for Candidate {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    let mut heap: BinaryHeap<Candidate> = (0..gt.n_images())
        .filter(|&r| !present[r].is_empty())
        .map(|r| Candidate {
            gain: present[r].len(),
            instances: Reverse(instance_counts[r]),
            image: Reverse(gt.images()[r]),
            row: r,
        })
        .collect();
    while picked.len() < target_count {
        let Some(mut top) = heap.pop() else { break };
        let gain = present[top.row].iter().filter(|&&c| !covered[c]).count();
        if gain == 0 {
            continue;
        }
        if gain < top.gain {
            top.gain = gain;
            heap.push(top);
            continue;
        }
        for &c in &present[top.row] {
            covered[c] = true;
        }
        taken[top.row] = true;
        picked.push(gt.images()[top.row]);
    }

    let mut rest: Vec<ImageId> = (0..gt.n_images())
        .filter(|&r| !taken[r])
        .map(|r| gt.images()[r])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let need = target_count - picked.len();
    picked.extend(rest.into_iter().take(need));
    picked
}

/// Classes covered by a set of images.
pub fn coverage(gt: &GroundTruthMatrix, images: &[ImageId]) -> BTreeSet<ClassId> {
    images
        .iter()
        .filter_map(|&id| gt.row_of(id))
        .flat_map(|r| gt.present(r))
        .map(|c| gt.classes()[c])
        .collect()
}
