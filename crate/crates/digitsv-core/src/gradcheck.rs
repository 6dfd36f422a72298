//! Central-difference gradient checking.
//!
//! The verification oracle for every differentiable operation: rebuild the
//! forward pass as a pure function of flat parameter vectors, perturb one
//! coordinate at a time by ±h, and compare the quotient against the gradient
//! the tape produced. Used throughout the test suites; lives in the crate so
//! integration tests and downstream crates can reuse it.

use alloc::vec::Vec;

/// Central finite differences of `f` at `params`, step `h` per coordinate.
///
/// `f` receives the full parameter set and returns the scalar loss. The
/// parameter slices are restored after each probe.
pub fn central_diff<F>(f: &mut F, params: &mut [Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Vec::with_capacity(params[pi].len());
        for ci in 0..params[pi].len() {
            let orig = params[pi][ci];
            params[pi][ci] = orig + h;
            let up = f(params);
            params[pi][ci] = orig - h;
            let down = f(params);
            params[pi][ci] = orig;
            g.push((up - down) / (2.0 * h));
        }
        grads.push(g);
    }
    grads
}

/// Largest elementwise deviation between an analytic and a numeric gradient,
/// relative to `max(|a|, |n|, 1)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1.0);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
