#![allow(dead_code)]

use bolt_core::rng::rng_from;
use bolt_core::taskgen::ToyModel;
use bolt_core::{DMatrix, TensorContainer};
use rand::Rng;
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;

pub fn rng(seed: u64) -> Pcg64 {
    rng_from(seed, "tests")
}

pub fn gaussian(rng: &mut Pcg64, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormal columns from nalgebra's Householder QR, independent of the
/// crate's own SVD and polar code.
pub fn orthonormal(rng: &mut Pcg64, m: usize, r: usize) -> DMatrix<f64> {
    assert!(r <= m);
    gaussian(rng, m, r).qr().q().columns(0, r).clone_owned()
}

pub fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
    (q.transpose() * q - DMatrix::identity(q.ncols(), q.ncols())).norm()
}

/// `min(‖a − b‖, ‖a + b‖)` summed over columns.
pub fn columnwise_sign_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (0..a.ncols())
        .map(|j| {
            let d = (a.column(j) - b.column(j)).norm();
            let s = (a.column(j) + b.column(j)).norm();
            d.min(s)
        })
        .sum()
}

/// Singular values from nalgebra, descending.
pub fn reference_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn numerical_rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    let s = reference_singular_values(m);
    let max = s.first().copied().unwrap_or(0.0);
    s.iter().filter(|&&x| x > rtol * max).count()
}

/// `X (XᵀX)^{-1/2}` through a symmetric eigendecomposition.
pub fn whitening_oracle(x: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = x.transpose() * x;
    let eig = gram.symmetric_eigen();
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let q = &eig.eigenvectors;
    x * (q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose())
}

pub fn random_model(rng: &mut Pcg64, d: usize, h: usize, c: usize) -> ToyModel {
    ToyModel::init(d, h, c, rng)
}

/// `theta_0` with its weight matrices, and only those, perturbed.
pub fn perturb_weights(theta_0: &ToyModel, rng: &mut Pcg64, scale: f64) -> ToyModel {
    let mut m = theta_0.clone();
    m.w1 += gaussian(rng, m.w1.nrows(), m.w1.ncols()) * scale;
    m.w2 += gaussian(rng, m.w2.nrows(), m.w2.ncols()) * scale;
    m
}

pub fn payload_bits(c: &TensorContainer) -> Vec<(String, Vec<u64>)> {
    c.entries
        .iter()
        .map(|e| (e.name.clone(), e.data.iter().map(|x| x.to_bits()).collect()))
        .collect()
}
