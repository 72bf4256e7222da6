//! Meta-data fusion head trained on frozen CNN features.
//!
//! ```text
//! meta (11) -> dense(H) -> BN -> ReLU -> dropout
//!           -> dense(H) -> BN -> ReLU -> dropout --+
//! CNN features (F) --------------------------------+-> concat (F + H)
//!           -> dense(D) -> BN -> ReLU -> dropout -> dense(9) -> logits
//! ```
//!
//! Everything is computed in `f64`; checkpoints and feature files store
//! `f32`.

mod adam;
mod checkpoint;
mod features;
mod loss;
mod network;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use features::{FeatureStore, FEATURE_MAGIC};
pub use loss::{softmax, weighted_cross_entropy, weighted_cross_entropy_batch};
pub use network::{
    forward_batch, head_forward, BatchNorm, BnGrad, BnMode, Dense, ForwardCache, ForwardOptions,
    HeadDims, HeadGrads, HeadParams, Mode, BN_EPS, BN_MOMENTUM,
};
pub use train::{
    loss_and_gradients, predict_views, train_head, train_step, Batch, EpochRecord, TrainConfig, TrainOutcome,
    HISTORY_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum HeadError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("no features for {} image(s): {}", .0.len(), preview(.0))]
    MissingFeatures(Vec<String>),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn preview(ids: &[String]) -> String {
    let mut s = ids.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > 5 {
        s.push_str(", ...");
    }
    s
}
