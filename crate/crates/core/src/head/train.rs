use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::features::FeatureStore;
use super::loss::{softmax, weighted_cross_entropy_batch};
use super::network::{
    backward, forward_batch, ForwardCache, ForwardOptions, HeadDims, HeadGrads, HeadParams,
    BN_MOMENTUM, META_PATH,
    TRAINABLE,
};
use super::HeadError;
use crate::classes::{Label, NUM_CLASSES};
use crate::dataset::{ClassWeights, ManifestRow};
use crate::meta::{encode_meta_with, meta_dropout, AgeEncoding, MetaVector, META_DIM};
use crate::metrics::{self, ConfusionMatrix};
use crate::predictions::Probs;
use crate::tta::aggregate_predictions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub meta_dropout_p: f64,
    /// Validation cadence in epochs; the final epoch is always evaluated.
    pub eval_every: usize,
    pub seed: u64,
    /// Keep the meta-data path fixed (ablation).
    pub freeze_meta: bool,
    pub age_encoding: AgeEncoding,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-5,
            batch_size: 20,
            dropout_p: 0.4,
            meta_dropout_p: 0.1,
            eval_every: 5,
            seed: 0,
            freeze_meta: false,
            age_encoding: AgeEncoding::Raw,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |m: String| Err(HeadError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        if !(0.0..=1.0).contains(&self.meta_dropout_p) {
            return bad(format!("meta_dropout_p {} not in [0, 1]", self.meta_dropout_p));
        }
        Ok(())
    }

    fn frozen(&self) -> [bool; TRAINABLE] {
        let mut f = [false; TRAINABLE];
        if self.freeze_meta {
            for i in META_PATH {
                f[i] = true;
            }
        }
        f
    }
}

/// One minibatch: features `n x F`, encoded meta data `n x 11`, class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub feats: Array2<f64>,
    pub metas: Array2<f64>,
    pub labels: Vec<usize>,
}

fn check_batch(batch: &Batch) -> Result<(), HeadError> {
    if batch.labels.is_empty() {
        return Err(HeadError::ShapeMismatch("empty batch".into()));
    }
    if batch.labels.len() != batch.feats.nrows() {
        return Err(HeadError::ShapeMismatch("label count != batch rows".into()));
    }
    if let Some(&l) = batch.labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(HeadError::ShapeMismatch(format!("label index {l} out of range")));
    }
    Ok(())
}

fn loss_grads_cache(
    params: &HeadParams,
    batch: &Batch,
    weights: &[f64; NUM_CLASSES],
    opts: ForwardOptions,
    rng: &mut dyn RngCore,
) -> Result<(f64, HeadGrads, ForwardCache), HeadError> {
    check_batch(batch)?;
    let (logits, cache) = forward_batch(params, batch.feats.view(), batch.metas.view(), opts, rng)?;
    let (loss, dlogits) = weighted_cross_entropy_batch(&logits, &batch.labels, weights);
    let grads = backward(params, &cache, &dlogits);
    Ok((loss, grads, cache))
}

/// Mean weighted cross-entropy of `batch` and its analytic gradient with
/// respect to every trainable tensor.
pub fn loss_and_gradients(
    params: &HeadParams,
    batch: &Batch,
    weights: &[f64; NUM_CLASSES],
    opts: ForwardOptions,
    rng: &mut dyn RngCore,
) -> Result<(f64, HeadGrads), HeadError> {
    let (loss, grads, _) = loss_grads_cache(params, batch, weights, opts, rng)?;
    Ok((loss, grads))
}

/// Forward, backward and one Adam update on `batch`. Returns the mean
/// weighted loss before the update; parameters are untouched when the loss is
/// not finite.
pub fn train_step(
    params: &mut HeadParams,
    batch: &Batch,
    weights: &[f64; NUM_CLASSES],
    adam: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<f64, HeadError> {
    if !adam.matches(params) {
        return Err(HeadError::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    let opts = ForwardOptions::train(cfg.dropout_p);
    let (loss, grads, cache) = loss_grads_cache(params, batch, weights, opts, rng)?;
    if !loss.is_finite() {
        return Err(HeadError::NonFiniteLoss {
            epoch: 0,
            step: adam.step_count() as usize + 1,
            loss,
        });
    }
    adam.update(params, &grads, cfg.learning_rate, &cfg.frozen());

    // running statistics (unbiased batch variance)
    let n = batch.labels.len() as f64;
    let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let frozen_meta = cfg.freeze_meta;
    for (i, (bn, block)) in [&mut params.bn1, &mut params.bn2, &mut params.bn3]
        .into_iter()
        .zip(&cache.blocks)
        .enumerate()
    {
        if frozen_meta && i < 2 {
            continue;
        }
        bn.running_mean
            .zip_mut_with(&block.batch_mean, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
        bn.running_var.zip_mut_with(&block.batch_var, |r, &b| {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * correction
        });
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_sensitivity: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_mean_sensitivity";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters at the evaluation with the highest validation mean
    /// sensitivity (earliest on ties).
    pub best: HeadParams,
    pub last: HeadParams,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// History as CSV; epochs without evaluation leave the last column empty.
    pub fn history_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.history {
            let val = r.val_mean_sensitivity.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{:.6},{}\n", r.epoch, r.train_loss, val));
        }
        s
    }
}

fn to_f64_row(dst: &mut [f64], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = f64::from(*s);
    }
}

/// Softmax predictions averaged over every replicate (view) of each image.
/// `items` pairs image ids with their encoded meta data.
pub fn predict_views(
    params: &HeadParams,
    store: &FeatureStore,
    items: &[(&str, MetaVector)],
) -> Result<Vec<Probs>, HeadError> {
    if store.dim() != params.dims.feature_dim {
        return Err(HeadError::ShapeMismatch(format!(
            "feature file has F={} but the head expects F={}",
            store.dim(),
            params.dims.feature_dim
        )));
    }
    let missing = store.missing(items.iter().map(|(id, _)| *id));
    if !missing.is_empty() {
        return Err(HeadError::MissingFeatures(missing));
    }
    let r = store.replicates();
    let f = store.dim();
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(items.len());
    let mut unused = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(0);
    let per_chunk = (CHUNK / r).max(1);
    for chunk in items.chunks(per_chunk) {
        let rows = chunk.len() * r;
        let mut feats = Array2::zeros((rows, f));
        let mut metas = Array2::zeros((rows, META_DIM));
        for (i, (id, meta)) in chunk.iter().enumerate() {
            for rep in 0..r {
                let row = i * r + rep;
                to_f64_row(feats.row_mut(row).as_slice_mut().unwrap(), store.get(id, rep).unwrap());
                metas.row_mut(row).as_slice_mut().unwrap().copy_from_slice(meta.as_slice());
            }
        }
        let (logits, _) =
            forward_batch(params, feats.view(), metas.view(), ForwardOptions::eval(), &mut unused)?;
        for i in 0..chunk.len() {
            let views: Vec<Probs> = (0..r)
                .map(|rep| {
                    let p = softmax(logits.row(i * r + rep).as_slice().unwrap());
                    let mut a = [0.0; NUM_CLASSES];
                    a.copy_from_slice(&p);
                    a
                })
                .collect();
            out.push(aggregate_predictions(&views).expect("at least one view"));
        }
    }
    Ok(out)
}

fn validation_score(
    params: &HeadParams,
    store: &FeatureStore,
    val: &[(&str, MetaVector, Label)],
) -> Option<f64> {
    if val.is_empty() {
        return None;
    }
    let items: Vec<(&str, MetaVector)> = val.iter().map(|(id, m, _)| (*id, *m)).collect();
    let probs = predict_views(params, store, &items).ok()?;
    let labels: Vec<Label> = val.iter().map(|v| v.2).collect();
    let conf = ConfusionMatrix::from_predictions(&probs, &labels).ok()?;
    metrics::mean_sensitivity_present(&conf).ok()
}

/// Train a fresh head on `train_rows`, tracking validation mean sensitivity.
///
/// Each epoch shuffles the training rows, samples one feature replicate per
/// image and applies meta-data dropout. Deterministic given `cfg.seed`.
pub fn train_head(
    store: &FeatureStore,
    train_rows: &[&ManifestRow],
    val_rows: &[&ManifestRow],
    weights: &ClassWeights,
    dims: HeadDims,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, HeadError> {
    cfg.validate()?;
    if dims.feature_dim != store.dim() {
        return Err(HeadError::ShapeMismatch(format!(
            "configured F={} but the feature file has F={}",
            dims.feature_dim,
            store.dim()
        )));
    }
    let missing = store.missing(
        train_rows
            .iter()
            .chain(val_rows)
            .map(|r| r.image.as_str()),
    );
    if !missing.is_empty() {
        return Err(HeadError::MissingFeatures(missing));
    }
    if train_rows.len() < 2 {
        return Err(HeadError::InvalidConfig(
            "batch normalization needs at least two training images".into(),
        ));
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut params = HeadParams::init(dims, &mut rng);
    let mut adam = AdamState::new(&params, cfg.adam);
    let class_w = weights.as_array();
    let val: Vec<(&str, MetaVector, Label)> = val_rows
        .iter()
        .map(|r| (r.image.as_str(), encode_meta_with(&r.meta, cfg.age_encoding), r.label))
        .collect();

    let mut best: Option<(f64, usize, HeadParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let f = dims.feature_dim;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                // a single-row batch has no batch statistics
                continue;
            }
            let n = chunk.len();
            let mut batch = Batch {
                feats: Array2::zeros((n, f)),
                metas: Array2::zeros((n, META_DIM)),
                labels: Vec::with_capacity(n),
            };
            for (i, &idx) in chunk.iter().enumerate() {
                let row = train_rows[idx];
                let rep = rng.random_range(0..store.replicates());
                let feat = store.get(&row.image, rep).expect("checked above");
                to_f64_row(batch.feats.row_mut(i).as_slice_mut().unwrap(), feat);
                let meta = meta_dropout(&row.meta, cfg.meta_dropout_p, &mut rng);
                batch
                    .metas
                    .row_mut(i)
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(encode_meta_with(&meta, cfg.age_encoding).as_slice());
                batch.labels.push(row.label.index());
            }
            step += 1;
            let loss = train_step(&mut params, &batch, &class_w, &mut adam, cfg, &mut rng).map_err(
                |e| match e {
                    HeadError::NonFiniteLoss { loss, .. } => {
                        log::error!(
                            "non-finite loss at epoch {epoch}, step {step}; batch labels {:?}",
                            batch.labels
                        );
                        HeadError::NonFiniteLoss { epoch, step, loss }
                    }
                    other => other,
                },
            )?;
            loss_sum += loss * n as f64;
            seen += n;
        }
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };

        let evaluate = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let mut val_s = None;
        if evaluate {
            val_s = validation_score(&params, store, &val);
            let score = val_s.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, params.clone()));
            }
            log::debug!("epoch {epoch}: loss {train_loss:.5}, val S {val_s:?}");
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mean_sensitivity: val_s,
        });
    }
    let (score, best_epoch, best_params) = best.expect("final epoch is always evaluated");
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        best_epoch,
        best_score: score.is_finite().then_some(score),
        history,
    })
}
