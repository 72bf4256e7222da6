//! Analytic head gradients against central finite differences.

use dermpipe::head::{
    forward_batch, loss_and_gradients, weighted_cross_entropy_batch, Batch, ForwardOptions, HeadDims, HeadParams,
};
use dermpipe::meta::META_DIM;
use dermpipe::NUM_CLASSES;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

const EPS: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-2;

struct Instance {
    params: HeadParams,
    batch: Batch,
    weights: [f64; NUM_CLASSES],
}

fn gaussian(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn opts() -> ForwardOptions {
    ForwardOptions::train(0.0)
}

fn loss(inst: &Instance, params: &HeadParams) -> f64 {
    let mut unused = Xoshiro256PlusPlus::seed_from_u64(0);
    let (logits, _) = forward_batch(params, inst.batch.feats.view(), inst.batch.metas.view(), opts(), &mut unused).unwrap();
    weighted_cross_entropy_batch(&logits, &inst.batch.labels, &inst.weights).0
}

/// Random toy instance whose ReLU inputs all stay clear of the kink.
fn instance(rng: &mut Xoshiro256PlusPlus) -> Instance {
    loop {
        let dims = HeadDims::new(rng.random_range(1..=8), rng.random_range(1..=4), rng.random_range(1..=4));
        let mut params = HeadParams::init(dims, rng);
        for t in params.trainable_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let n = rng.random_range(4..=8);
        let batch = Batch {
            feats: gaussian(rng, n, dims.feature_dim),
            metas: gaussian(rng, n, META_DIM),
            labels: (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect(),
        };
        let weights = std::array::from_fn(|_| rng.random_range(0.5..3.0));
        let mut unused = Xoshiro256PlusPlus::seed_from_u64(0);
        let (_, cache) = forward_batch(&params, batch.feats.view(), batch.metas.view(), opts(), &mut unused).unwrap();
        if cache.pre_activations().iter().all(|a| a.iter().all(|v| v.abs() > KINK_MARGIN)) {
            return Instance { params, batch, weights };
        }
    }
}

fn max_relative_error(inst: &Instance) -> f64 {
    let mut unused = Xoshiro256PlusPlus::seed_from_u64(0);
    let (_, grads) = loss_and_gradients(&inst.params, &inst.batch, &inst.weights, opts(), &mut unused).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let mut p = inst.params.clone();
    for (t, a) in analytic.iter().enumerate() {
        for (j, &ga) in a.iter().enumerate() {
            let orig = p.trainable()[t][j];
            p.trainable_mut()[t][j] = orig + EPS;
            let up = loss(inst, &p);
            p.trainable_mut()[t][j] = orig - EPS;
            let down = loss(inst, &p);
            p.trainable_mut()[t][j] = orig;
            let gn = (up - down) / (2.0 * EPS);
            let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2024);
    for i in 0..25 {
        let inst = instance(&mut rng);
        let err = max_relative_error(&inst);
        assert!(err <= 1e-4, "instance {i}: max relative error {err:e}");
    }
}

#[test]
fn loss_is_weighted_mean() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let inst = instance(&mut rng);
    let mut doubled = Instance {
        params: inst.params.clone(),
        batch: inst.batch.clone(),
        weights: inst.weights.map(|w| 2.0 * w),
    };
    let base = loss(&inst, &inst.params);
    assert!((loss(&doubled, &doubled.params) - 2.0 * base).abs() < 1e-12);
    doubled.weights = [1.0; NUM_CLASSES];
    assert!(loss(&doubled, &doubled.params) > 0.0);
}
