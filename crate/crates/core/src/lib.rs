//! Semi-supervised segmentation with rank-statistics pseudo-label weighting.
//!
//! A teacher/student pair of small per-pixel segmenters is trained on a
//! synthetic corpus. Unlabeled pixels are pseudo-labeled by the teacher,
//! filtered by confidence, cross-checked against a crop-level region
//! classifier, and weighted by the top-k overlap between their features and a
//! prototype of the pseudo-label class.

pub mod detector;
pub mod error;
pub mod gradcore;
pub mod maskgeom;
pub mod metrics;
pub mod protobank;
pub mod ranksim;
pub mod reliability;
pub mod segmodel;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use gradcore::{FeatureVector, Tensor2, Tensor3};
pub use maskgeom::{LabelMap, LabeledBox, Rect};
