//! Object hallucination evaluation for free-form vision-language model
//! responses.
//!
//! The pipeline: load a [`vocab::ClassVocabulary`] and COCO-style
//! annotations ([`dataset`]), ingest model descriptions ([`responses`]), ask
//! an ensemble of external judge language models whether each class is
//! mentioned ([`judge`]), collapse the votes with an agreement threshold
//! ([`verdict`]) and score precision/recall/F-beta ([`metrics`]). The
//! closed-question protocol ([`pope`]), the caption metric ([`chair`]) and
//! the object-enumeration data generator ([`augment`]) share the same inputs.

pub mod augment;
pub mod chair;
pub mod dataset;
pub mod judge;
pub mod metrics;
pub mod pope;
pub mod responses;
pub mod verdict;
pub mod vocab;

pub use dataset::{GroundTruthMatrix, ImageId};
pub use vocab::{ClassId, ClassVocabulary};
