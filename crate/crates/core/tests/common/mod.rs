#![allow(dead_code)]

use lwi_core::net::{HeadSelector, LayerWeights, Model};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_model(seed: u64, input: usize, hidden: &[usize], heads: &[usize]) -> Model {
    Model::init(input, hidden, heads, &mut rng(seed))
}

pub fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Reorders the channels of feature layer `layer` so that new channel `i` is
/// old channel `perm[i]`, and rewires the consumers to match.
pub fn permute_hidden(model: &Model, layer: usize, perm: &[usize]) -> Model {
    let mut out = model.clone();
    let l = &model.feature_layers[layer];
    out.feature_layers[layer] = LayerWeights {
        weight: Array2::from_shape_fn(l.shape(), |(r, c)| l.weight[[perm[r], c]]),
        bias: Array1::from_shape_fn(l.rows(), |r| l.bias[perm[r]]),
    };
    let rewire = |next: &LayerWeights| LayerWeights {
        weight: Array2::from_shape_fn(next.shape(), |(r, c)| next.weight[[r, perm[c]]]),
        bias: next.bias.clone(),
    };
    if layer + 1 < model.feature_layers.len() {
        out.feature_layers[layer + 1] = rewire(&model.feature_layers[layer + 1]);
    } else {
        out.heads = model.heads.iter().map(rewire).collect();
    }
    out
}

pub fn random_inputs(n: usize, width: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((n, width), || r.random_range(-3.0..3.0))
}

pub fn max_output_diff(a: &Model, b: &Model, x: &Array2<f64>) -> f64 {
    let ya = a.forward(x.view(), HeadSelector::All).unwrap();
    let yb = b.forward(x.view(), HeadSelector::All).unwrap();
    ya.iter().zip(yb.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

pub fn max_param_diff(a: &Model, b: &Model) -> f64 {
    a.parameters().zip(b.parameters()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}
