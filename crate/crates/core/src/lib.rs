//! Skin-lesion classification pipeline built around externally computed CNN
//! outputs.
//!
//! The crate covers everything that surrounds the backbones:
//!
//! * [`preprocess`]: field-of-view cropping, Shades-of-Gray color constancy
//!   and aspect-preserving downscaling of dermoscopy images.
//! * [`meta`]: patient meta-data encoding and meta-data dropout.
//! * [`dataset`]: manifests, lesion-grouped cross-validation folds and
//!   class-balancing loss weights.
//! * [`head`]: the meta-data fusion head (dense + batch norm + dropout),
//!   trained on frozen CNN feature vectors with weighted cross-entropy and Adam.
//! * [`tta`] and [`ensemble`]: test-time augmentation schedules, softmax
//!   averaging and exhaustive ensemble-subset search.
//! * [`metrics`]: mean sensitivity, one-vs-rest sensitivity/specificity,
//!   ROC AUC and the high-sensitivity partial AUC.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod classes;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod fsutil;
pub mod head;
pub mod image;
pub mod meta;
pub mod metrics;
pub mod par;
pub mod predictions;
pub mod preprocess;
pub mod synth;
pub mod tta;

pub use classes::{Label, KNOWN_CLASSES, NUM_CLASSES};
pub use error::{Error, Result};
