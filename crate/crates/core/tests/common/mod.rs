//! Shared test oracles: finite differences and Monte Carlo statistics.
//!
//! Everything here is independent of the library's backward pass; these
//! routines only ever call forward evaluations.

#![allow(dead_code)]

use rand::Rng;

/// Central finite-difference gradient of `f` at `x` (step 1e-5).
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    fd_gradient_with_step(f, x, 1e-5)
}

pub fn fd_gradient_with_step(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Norm-relative deviation between two gradient vectors.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let diff: f64 = got.iter().zip(want).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = want.iter().map(|&b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Standard-normal-ish random vector from any rand::Rng.
pub fn randn_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Root mean square of a sample.
pub fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|&x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Composite Simpson weights for k+1 nodes on [0,1] (k even).
pub fn simpson_weights(k: usize) -> Vec<f64> {
    assert!(k >= 2 && k % 2 == 0);
    let h = 1.0 / k as f64;
    let mut w = vec![0.0; k + 1];
    w[0] = h / 3.0;
    w[k] = h / 3.0;
    for (i, wi) in w.iter_mut().enumerate().take(k).skip(1) {
        *wi = if i % 2 == 1 { 4.0 * h / 3.0 } else { 2.0 * h / 3.0 };
    }
    w
}
