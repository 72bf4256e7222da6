use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::HeadError;
use crate::classes::NUM_CLASSES;
use crate::meta::{MetaVector, META_DIM};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Layer widths of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// CNN feature dimension `F`.
    pub feature_dim: usize,
    /// Width `H` of both meta-data layers.
    pub meta_hidden: usize,
    /// Width `D` of the layer after concatenation.
    pub fusion_dim: usize,
}

impl HeadDims {
    pub fn new(feature_dim: usize, meta_hidden: usize, fusion_dim: usize) -> Self {
        Self {
            feature_dim,
            meta_hidden,
            fusion_dim,
        }
    }
}

/// Fully connected layer `y = x W + b`, `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, limit: f64, rng: &mut R) -> Self {
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || {
            rng.random_range(-limit..=limit)
        });
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(n: usize) -> Self {
        Self {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// All tensors of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub dims: HeadDims,
    pub meta1: Dense,
    pub bn1: BatchNorm,
    pub meta2: Dense,
    pub bn2: BatchNorm,
    pub fusion: Dense,
    pub bn3: BatchNorm,
    pub classifier: Dense,
}

/// Gradients for every trainable tensor of [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub meta1: Dense,
    pub bn1: BnGrad,
    pub meta2: Dense,
    pub bn2: BnGrad,
    pub fusion: Dense,
    pub bn3: BnGrad,
    pub classifier: Dense,
}

/// Number of trainable tensors.
pub(crate) const TRAINABLE: usize = 14;

/// Indices (into the trainable order) of the meta-data path tensors.
pub(crate) const META_PATH: std::ops::Range<usize> = 0..8;

impl HeadParams {
    /// He-uniform ReLU layers, Glorot-uniform classifier, zero biases,
    /// identity batch norms.
    pub fn init<R: Rng + ?Sized>(dims: HeadDims, rng: &mut R) -> Self {
        let HeadDims {
            feature_dim: f,
            meta_hidden: h,
            fusion_dim: d,
        } = dims;
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let meta1 = Dense::uniform(META_DIM, h, he(META_DIM), rng);
        let meta2 = Dense::uniform(h, h, he(h), rng);
        let fusion = Dense::uniform(f + h, d, he(f + h), rng);
        let glorot = (6.0 / (d + NUM_CLASSES) as f64).sqrt();
        let classifier = Dense::uniform(d, NUM_CLASSES, glorot, rng);
        Self {
            dims,
            meta1,
            bn1: BatchNorm::new(h),
            meta2,
            bn2: BatchNorm::new(h),
            fusion,
            bn3: BatchNorm::new(d),
            classifier,
        }
    }

    /// All-zero dense layers with identity batch norms.
    pub fn zeros(dims: HeadDims) -> Self {
        let HeadDims {
            feature_dim: f,
            meta_hidden: h,
            fusion_dim: d,
        } = dims;
        Self {
            dims,
            meta1: Dense::zeros(META_DIM, h),
            bn1: BatchNorm::new(h),
            meta2: Dense::zeros(h, h),
            bn2: BatchNorm::new(h),
            fusion: Dense::zeros(f + h, d),
            bn3: BatchNorm::new(d),
            classifier: Dense::zeros(d, NUM_CLASSES),
        }
    }

    /// Zero both meta-data dense layers (used with a frozen meta path to
    /// ablate meta data).
    pub fn zero_meta_path(&mut self) {
        self.meta1.weight.fill(0.0);
        self.meta1.bias.fill(0.0);
        self.meta2.weight.fill(0.0);
        self.meta2.bias.fill(0.0);
    }

    /// Named tensors with shapes, including batch-norm running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        type Out<'a> = Vec<(String, Vec<usize>, &'a [f64])>;
        let mut out = Vec::new();
        fn dense<'a>(name: &str, d: &'a Dense, out: &mut Out<'a>) {
            out.push((format!("{name}.weight"), d.weight.shape().to_vec(), slice(&d.weight)));
            out.push((format!("{name}.bias"), d.bias.shape().to_vec(), slice1(&d.bias)));
        }
        fn bn<'a>(name: &str, b: &'a BatchNorm, out: &mut Out<'a>) {
            for (suffix, t) in [
                ("gamma", &b.gamma),
                ("beta", &b.beta),
                ("running_mean", &b.running_mean),
                ("running_var", &b.running_var),
            ] {
                out.push((format!("{name}.{suffix}"), t.shape().to_vec(), slice1(t)));
            }
        }
        dense("meta1", &self.meta1, &mut out);
        bn("bn1", &self.bn1, &mut out);
        dense("meta2", &self.meta2, &mut out);
        bn("bn2", &self.bn2, &mut out);
        dense("fusion", &self.fusion, &mut out);
        bn("bn3", &self.bn3, &mut out);
        dense("classifier", &self.classifier, &mut out);
        out
    }

    /// Mutable views of every named tensor, same order as [`named_tensors`](Self::named_tensors).
    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        macro_rules! dense {
            ($name:literal, $d:expr) => {
                out.push((concat!($name, ".weight").into(), $d.weight.as_slice_mut().unwrap()));
                out.push((concat!($name, ".bias").into(), $d.bias.as_slice_mut().unwrap()));
            };
        }
        macro_rules! bn {
            ($name:literal, $b:expr) => {
                out.push((concat!($name, ".gamma").into(), $b.gamma.as_slice_mut().unwrap()));
                out.push((concat!($name, ".beta").into(), $b.beta.as_slice_mut().unwrap()));
                out.push((concat!($name, ".running_mean").into(), $b.running_mean.as_slice_mut().unwrap()));
                out.push((concat!($name, ".running_var").into(), $b.running_var.as_slice_mut().unwrap()));
            };
        }
        dense!("meta1", self.meta1);
        bn!("bn1", self.bn1);
        dense!("meta2", self.meta2);
        bn!("bn2", self.bn2);
        dense!("fusion", self.fusion);
        bn!("bn3", self.bn3);
        dense!("classifier", self.classifier);
        out
    }

    /// Trainable tensors in a fixed order: meta1 W/b, bn1 gamma/beta, meta2
    /// W/b, bn2 gamma/beta, fusion W/b, bn3 gamma/beta, classifier W/b.
    pub fn trainable_mut(&mut self) -> [&mut [f64]; TRAINABLE] {
        [
            self.meta1.weight.as_slice_mut().unwrap(),
            self.meta1.bias.as_slice_mut().unwrap(),
            self.bn1.gamma.as_slice_mut().unwrap(),
            self.bn1.beta.as_slice_mut().unwrap(),
            self.meta2.weight.as_slice_mut().unwrap(),
            self.meta2.bias.as_slice_mut().unwrap(),
            self.bn2.gamma.as_slice_mut().unwrap(),
            self.bn2.beta.as_slice_mut().unwrap(),
            self.fusion.weight.as_slice_mut().unwrap(),
            self.fusion.bias.as_slice_mut().unwrap(),
            self.bn3.gamma.as_slice_mut().unwrap(),
            self.bn3.beta.as_slice_mut().unwrap(),
            self.classifier.weight.as_slice_mut().unwrap(),
            self.classifier.bias.as_slice_mut().unwrap(),
        ]
    }

    pub fn trainable(&self) -> [&[f64]; TRAINABLE] {
        [
            slice(&self.meta1.weight),
            slice1(&self.meta1.bias),
            slice1(&self.bn1.gamma),
            slice1(&self.bn1.beta),
            slice(&self.meta2.weight),
            slice1(&self.meta2.bias),
            slice1(&self.bn2.gamma),
            slice1(&self.bn2.beta),
            slice(&self.fusion.weight),
            slice1(&self.fusion.bias),
            slice1(&self.bn3.gamma),
            slice1(&self.bn3.beta),
            slice(&self.classifier.weight),
            slice1(&self.classifier.bias),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Check that every tensor agrees with `dims`.
    pub fn validate(&self) -> Result<(), HeadError> {
        let HeadDims {
            feature_dim: f,
            meta_hidden: h,
            fusion_dim: d,
        } = self.dims;
        let check = |name: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(HeadError::ShapeMismatch(format!("{name}: {got:?} != {want:?}")))
            }
        };
        check("meta1.weight", self.meta1.weight.shape(), &[META_DIM, h])?;
        check("meta1.bias", self.meta1.bias.shape(), &[h])?;
        check("meta2.weight", self.meta2.weight.shape(), &[h, h])?;
        check("meta2.bias", self.meta2.bias.shape(), &[h])?;
        check("fusion.weight", self.fusion.weight.shape(), &[f + h, d])?;
        check("fusion.bias", self.fusion.bias.shape(), &[d])?;
        check("classifier.weight", self.classifier.weight.shape(), &[d, NUM_CLASSES])?;
        check("classifier.bias", self.classifier.bias.shape(), &[NUM_CLASSES])?;
        for (name, bn, n) in [("bn1", &self.bn1, h), ("bn2", &self.bn2, h), ("bn3", &self.bn3, d)] {
            for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                check(name, t.shape(), &[n])?;
            }
            if bn.running_var.iter().any(|&v| !(v > 0.0)) {
                return Err(HeadError::ShapeMismatch(format!(
                    "{name}: running variance must be positive"
                )));
            }
        }
        Ok(())
    }
}

impl HeadGrads {
    pub fn tensors(&self) -> [&[f64]; TRAINABLE] {
        [
            slice(&self.meta1.weight),
            slice1(&self.meta1.bias),
            slice1(&self.bn1.gamma),
            slice1(&self.bn1.beta),
            slice(&self.meta2.weight),
            slice1(&self.meta2.bias),
            slice1(&self.bn2.gamma),
            slice1(&self.bn2.beta),
            slice(&self.fusion.weight),
            slice1(&self.fusion.bias),
            slice1(&self.bn3.gamma),
            slice1(&self.bn3.beta),
            slice(&self.classifier.weight),
            slice1(&self.classifier.bias),
        ]
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Training (batch statistics, dropout) or evaluation (running statistics,
/// no dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub bn: BnMode,
    /// Inverted-dropout drop probability; 0 disables dropout.
    pub dropout: f64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            bn: BnMode::Running,
            dropout: 0.0,
        }
    }

    pub fn train(dropout: f64) -> Self {
        Self {
            bn: BnMode::Batch,
            dropout,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pre_relu: Array2<f64>,
    mask: Option<Array2<f64>>,
    pub(crate) batch_mean: Array1<f64>,
    pub(crate) batch_var: Array1<f64>,
}

/// Intermediate values of a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) opts: ForwardOptions,
    pub(crate) blocks: [BlockCache; 3],
    classifier_input: Array2<f64>,
}

impl ForwardCache {
    /// Inputs to the three ReLUs (after batch norm), batch rows first.
    pub fn pre_activations(&self) -> [&Array2<f64>; 3] {
        self.blocks.each_ref().map(|b| &b.pre_relu)
    }
}

fn block_forward(
    dense: &Dense,
    bn: &BatchNorm,
    x: Array2<f64>,
    opts: ForwardOptions,
    rng: &mut dyn RngCore,
) -> (Array2<f64>, BlockCache) {
    let z = dense.forward(&x.view());
    let (mean, var) = match opts.bn {
        BnMode::Batch => {
            let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
            let var = (&z - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty batch");
            (mean, var)
        }
        BnMode::Running => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = (&z - &mean) * &inv_std;
    let pre_relu = &xhat * &bn.gamma + &bn.beta;
    let mut out = pre_relu.mapv(|v| v.max(0.0));
    let mask = (opts.dropout > 0.0).then(|| {
        let keep = 1.0 / (1.0 - opts.dropout);
        let m = Array2::from_shape_simple_fn(out.raw_dim(), || {
            if rng.random::<f64>() < opts.dropout {
                0.0
            } else {
                keep
            }
        });
        out *= &m;
        m
    });
    let cache = BlockCache {
        input: x,
        xhat,
        inv_std,
        pre_relu,
        mask,
        batch_mean: mean,
        batch_var: var,
    };
    (out, cache)
}

fn block_backward(
    dense: &Dense,
    bn: &BatchNorm,
    cache: &BlockCache,
    dout: Array2<f64>,
    bn_mode: BnMode,
) -> (Array2<f64>, Dense, BnGrad) {
    let mut dy = match &cache.mask {
        Some(m) => dout * m,
        None => dout,
    };
    dy.zip_mut_with(&cache.pre_relu, |g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
    let dbeta = dy.sum_axis(Axis(0));
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = &dy * &bn.gamma;
    let dz = match bn_mode {
        BnMode::Running => dxhat * &cache.inv_std,
        BnMode::Batch => {
            let n = dy.nrows() as f64;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
            let centered = dxhat * n - &sum_dxhat - &(&cache.xhat * &sum_dxhat_xhat);
            centered * &(&cache.inv_std / n)
        }
    };
    let dweight = cache.input.t().dot(&dz).as_standard_layout().into_owned();
    let dbias = dz.sum_axis(Axis(0));
    let dx = dz.dot(&dense.weight.t());
    (
        dx,
        Dense {
            weight: dweight,
            bias: dbias,
        },
        BnGrad {
            gamma: dgamma,
            beta: dbeta,
        },
    )
}

/// Forward pass over a batch; rows of `feats` and `metas` are examples.
pub fn forward_batch(
    params: &HeadParams,
    feats: ArrayView2<f64>,
    metas: ArrayView2<f64>,
    opts: ForwardOptions,
    rng: &mut dyn RngCore,
) -> Result<(Array2<f64>, ForwardCache), HeadError> {
    let n = feats.nrows();
    if n == 0 {
        return Err(HeadError::ShapeMismatch("empty batch".into()));
    }
    if metas.nrows() != n {
        return Err(HeadError::ShapeMismatch(format!(
            "{n} feature rows but {} meta rows",
            metas.nrows()
        )));
    }
    if feats.ncols() != params.dims.feature_dim {
        return Err(HeadError::ShapeMismatch(format!(
            "feature dimension {} != {}",
            feats.ncols(),
            params.dims.feature_dim
        )));
    }
    if metas.ncols() != META_DIM {
        return Err(HeadError::ShapeMismatch(format!(
            "meta dimension {} != {META_DIM}",
            metas.ncols()
        )));
    }
    let (h1, c1) = block_forward(&params.meta1, &params.bn1, metas.to_owned(), opts, rng);
    let (h2, c2) = block_forward(&params.meta2, &params.bn2, h1, opts, rng);
    let joined = concatenate(Axis(1), &[feats, h2.view()]).expect("row counts match");
    let (h3, c3) = block_forward(&params.fusion, &params.bn3, joined, opts, rng);
    let logits = params.classifier.forward(&h3.view());
    Ok((
        logits,
        ForwardCache {
            opts,
            blocks: [c1, c2, c3],
            classifier_input: h3,
        },
    ))
}

/// Backpropagate `dlogits` through a cached forward pass.
pub(crate) fn backward(params: &HeadParams, cache: &ForwardCache, dlogits: &Array2<f64>) -> HeadGrads {
    let bn_mode = cache.opts.bn;
    let classifier = Dense {
        weight: cache.classifier_input.t().dot(dlogits).as_standard_layout().into_owned(),
        bias: dlogits.sum_axis(Axis(0)),
    };
    let dh3 = dlogits.dot(&params.classifier.weight.t());
    let [c1, c2, c3] = &cache.blocks;
    let (djoined, fusion, bn3) = block_backward(&params.fusion, &params.bn3, c3, dh3, bn_mode);
    let f = params.dims.feature_dim;
    let dh2 = djoined.slice(ndarray::s![.., f..]).to_owned();
    let (dh1, meta2, bn2) = block_backward(&params.meta2, &params.bn2, c2, dh2, bn_mode);
    let (_, meta1, bn1) = block_backward(&params.meta1, &params.bn1, c1, dh1, bn_mode);
    HeadGrads {
        meta1,
        bn1,
        meta2,
        bn2,
        fusion,
        bn3,
        classifier,
    }
}

/// Logits for a single example. Train mode treats the example as a batch of
/// one; evaluation mode ignores `rng`.
pub fn head_forward<R: RngCore>(
    params: &HeadParams,
    feat: &[f64],
    meta: &MetaVector,
    mode: Mode,
    dropout: f64,
    rng: &mut R,
) -> Result<[f64; NUM_CLASSES], HeadError> {
    let f = ArrayView2::from_shape((1, feat.len()), feat)
        .map_err(|e| HeadError::ShapeMismatch(e.to_string()))?;
    let m = ArrayView2::from_shape((1, META_DIM), meta.as_slice()).expect("fixed meta length");
    let opts = match mode {
        Mode::Train => ForwardOptions::train(dropout),
        Mode::Eval => ForwardOptions::eval(),
    };
    let (logits, _) = forward_batch(params, f, m, opts, rng)?;
    let mut out = [0.0; NUM_CLASSES];
    out.copy_from_slice(logits.row(0).as_slice().expect("row-major"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::softmax;
    use crate::meta::{encode_meta, MetaRecord};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rng() -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(5)
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let p = HeadParams::zeros(HeadDims::new(4, 3, 5));
        let meta = encode_meta(&MetaRecord {
            age: Some(40.0),
            ..MetaRecord::MISSING
        });
        for mode in [Mode::Eval, Mode::Train] {
            let z = head_forward(&p, &[1.0, -2.0, 0.5, 3.0], &meta, mode, 0.4, &mut rng()).unwrap();
            assert_eq!(z, [0.0; NUM_CLASSES]);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let p = HeadParams::init(HeadDims::new(6, 4, 8), &mut rng());
        let meta = encode_meta(&MetaRecord::MISSING);
        let feat = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        let a = head_forward(&p, &feat, &meta, Mode::Eval, 0.4, &mut rng()).unwrap();
        let b = head_forward(&p, &feat, &meta, Mode::Eval, 0.4, &mut Xoshiro256PlusPlus::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
        let p_sum: f64 = softmax(&a).iter().sum();
        assert!((p_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let p = HeadParams::zeros(HeadDims::new(4, 3, 5));
        let meta = encode_meta(&MetaRecord::MISSING);
        assert!(matches!(
            head_forward(&p, &[1.0; 3], &meta, Mode::Eval, 0.0, &mut rng()),
            Err(HeadError::ShapeMismatch(_))
        ));
        let mut bad = p.clone();
        bad.bn2.running_var[0] = 0.0;
        assert!(bad.validate().is_err());
        assert!(p.validate().is_ok());
    }

    /// Hand-computed forward pass for F=3, H=2, D=2 with identity-like weights.
    #[test]
    fn toy_forward_matches_hand_computation() {
        let dims = HeadDims::new(3, 2, 2);
        let mut p = HeadParams::zeros(dims);
        // meta1 picks the age feature (index 10) and site #0
        p.meta1.weight[[10, 0]] = 0.1;
        p.meta1.weight[[0, 1]] = 1.0;
        p.meta1.bias = array![0.0, -0.5];
        p.meta2.weight = array![[1.0, 0.0], [0.0, 2.0]];
        // fusion: rows 0..3 are CNN features, rows 3..5 the meta output
        p.fusion.weight = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0], [0.0, -1.0]];
        p.fusion.bias = array![0.0, 0.25];
        p.classifier.weight.fill(0.0);
        p.classifier.weight[[0, 0]] = 1.0;
        p.classifier.weight[[1, 1]] = 1.0;
        p.classifier.weight[[0, 2]] = -1.0;
        p.classifier.bias[8] = 0.5;
        // running stats: mean 0, var 1 - BN_EPS so BN is exactly the identity
        for bn in [&mut p.bn1, &mut p.bn2, &mut p.bn3] {
            bn.running_var.fill(1.0 - BN_EPS);
        }

        let meta = encode_meta(&MetaRecord {
            age: Some(30.0),
            site: Some(crate::meta::AnatomSite::HeadNeck),
            sex: None,
        });
        let feat = [0.5, -1.0, 2.0];
        // h1 = relu([0.1*30, 1 - 0.5]) = [3, 0.5]
        // h2 = relu([3, 1]) = [3, 1]
        // fusion in = [0.5, -1, 2, 3, 1]
        // h3 = relu([0.5 + 2 + 3, -1 + 2 - 1 + 0.25]) = [5.5, 0.25]
        // logits = [5.5, 0.25, -5.5, 0, 0, 0, 0, 0, 0.5]
        let z = head_forward(&p, &feat, &meta, Mode::Eval, 0.0, &mut rng()).unwrap();
        let want = [5.5, 0.25, -5.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5];
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{z:?}");
        }
    }

    #[test]
    fn train_mode_uses_batch_statistics() {
        let dims = HeadDims::new(2, 2, 2);
        let mut p = HeadParams::init(dims, &mut rng());
        p.bn3.running_mean.fill(100.0);
        let feats = array![[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]];
        let metas = Array2::from_shape_fn((3, META_DIM), |(i, j)| (i * j) as f64 * 0.1);
        let (_, cache) =
            forward_batch(&p, feats.view(), metas.view(), ForwardOptions::train(0.0), &mut rng()).unwrap();
        // batch-normalized activations have zero mean per feature
        for col in cache.blocks[2].xhat.columns() {
            assert!(col.sum().abs() < 1e-9);
        }
    }
}
