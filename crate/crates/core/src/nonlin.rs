//! Norm and gated nonlinearities. Both only rescale a field by an invariant
//! factor, so they commute with every rotation.

use crate::activation::{sigmoid, Activation};

/// Guard added to the norm in the denominator.
pub const NORM_EPS: f64 = 1e-12;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `v · σ(‖v‖ − b) / (‖v‖ + ε)`.
pub fn norm_nonlinearity(v: &[f64], sigma: Activation, bias: f64) -> Vec<f64> {
    let n = norm(v);
    let s = sigma.apply(n - bias) / (n + NORM_EPS);
    v.iter().map(|x| x * s).collect()
}

/// `v · sigmoid(gate)`.
pub fn gated_nonlinearity(v: &[f64], gate: f64) -> Vec<f64> {
    let s = sigmoid(gate);
    v.iter().map(|x| x * s).collect()
}
