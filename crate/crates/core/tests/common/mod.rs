//! Plain-loop reference implementations used as oracles.
#![allow(dead_code)]

use meta_attack_core::model::ParamSet;
use meta_attack_core::rng;
use meta_attack_core::Tensor;
use rand::Rng as _;

pub type Matrix = Vec<Vec<f64>>;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn rows(t: &Tensor) -> Matrix {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(row, &l)| -log_softmax(row)[l])
        .sum()
}

/// `x @ w + b` for `w` stored row-major as `(fan_in, fan_out)`.
pub fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (fan_in, fan_out) = w.dims2().unwrap();
    assert_eq!(x.len(), fan_in);
    (0..fan_out)
        .map(|j| b[j] + (0..fan_in).map(|i| x[i] * w.data()[i * fan_out + j]).sum::<f64>())
        .collect()
}

/// ReLU MLP over `layer{i}.weight` / `layer{i}.bias` entries.
pub fn mlp(params: &ParamSet, x: &[f64]) -> Vec<f64> {
    let layers = params.len() / 2;
    let mut h = x.to_vec();
    for i in 0..layers {
        let w = params.get(&format!("layer{i}.weight")).unwrap();
        let b = params.get(&format!("layer{i}.bias")).unwrap();
        h = affine(&h, w, b.data());
        if i + 1 < layers {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

pub fn mlp_rows(params: &ParamSet, inputs: &Tensor) -> Matrix {
    rows(inputs).iter().map(|x| mlp(params, x)).collect()
}

pub fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
