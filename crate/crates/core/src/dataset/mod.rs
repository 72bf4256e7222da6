//! Manifests, lesion-grouped cross-validation folds and loss-balancing
//! weights.

mod folds;
mod manifest;
mod weights;

pub use folds::{
    assemble_training_set, split_folds, FoldAssignment, FoldSplit, FoldWarning, SplitRng,
};
pub use manifest::{read_meta_csv, Manifest, ManifestRow, Source, MANIFEST_COLUMNS};
pub use weights::{class_counts, class_weights, ClassWeights};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("{file}:{line}: bad `{column}` value `{value}`: {reason}")]
    BadField {
        file: String,
        line: u64,
        column: String,
        value: String,
        reason: String,
    },
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
    #[error("image `{0}` is labelled UNK but comes from the main source")]
    UnkInMain(String),
    #[error("need at least 2 folds, got {0}")]
    InvalidFoldCount(usize),
    #[error("fold {fold} out of range for {m} folds")]
    FoldOutOfRange { fold: usize, m: usize },
    #[error("main image `{0}` has no fold assignment")]
    Unassigned(String),
    #[error("class at position {class} has no training examples")]
    EmptyClass { class: usize },
    #[error("invalid balancing exponent {0}")]
    InvalidExponent(f64),
}
