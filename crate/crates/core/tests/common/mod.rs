#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use sagp_core::model::{FeaturizerSettings, ModelDims, Readout};
use sagp_core::{EvidenceGraph, Matrix, ModelCheckpoint};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).unwrap();
    Matrix::new(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect()).unwrap()
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EvidenceGraph {
    let features = gaussian(rng, n, dim, 1.0);
    let gold: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    EvidenceGraph::fully_connected(features, ids, Some(gold)).unwrap()
}

pub fn random_checkpoint(dim: usize, seed: u64) -> ModelCheckpoint {
    let dims = ModelDims {
        dim,
        layers: 2,
        residual: true,
        readout: Readout::Mean,
    };
    ModelCheckpoint::init(dims, FeaturizerSettings::default(), 0.3, seed).unwrap()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &Matrix, eps: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let mut hi = x.clone();
            hi.set(r, c, x.get(r, c) + eps);
            let mut lo = x.clone();
            lo.set(r, c, x.get(r, c) - eps);
            grad.set(r, c, (f(&hi) - f(&lo)) / (2.0 * eps));
        }
    }
    grad
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over entries.
pub fn max_rel_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
