//! Central finite-difference gradient oracle.
//!
//! Test support: evaluates a forward-only scalar function at perturbed
//! inputs, never touching the backward pass it is used to check.

use crate::tensor::ArrD;

/// Numeric gradient of `f` w.r.t. every coordinate of every input, by
/// central differences with step `eps`.
pub fn fd_grads(f: &mut dyn FnMut(&[ArrD]) -> f64, inputs: &[ArrD], eps: f64) -> Vec<ArrD> {
    let mut work: Vec<ArrD> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = ArrD::zeros(inputs[i].raw_dim());
        for idx in 0..inputs[i].len() {
            let orig = inputs[i].as_slice().unwrap()[idx];
            work[i].as_slice_mut().unwrap()[idx] = orig + eps;
            let up = f(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig - eps;
            let down = f(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Relative error with a small absolute floor so near-zero pairs compare
/// sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between matching coordinates of analytic and
/// numeric gradient sets.
pub fn max_rel_err(analytic: &[ArrD], numeric: &[ArrD]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (x, y) in a.iter().zip(n.iter()) {
            worst = worst.max(rel_err(*x, *y));
        }
    }
    worst
}
