//! Closed-form oracle for the isotropic-Gaussian translate problem with a
//! linear terminal kernel.
//!
//! With centered `P0 = N(0, sigma^2 I)` and `P1 = N(m, sigma^2 I)`, the
//! interaction-free problem with unit transport weight and terminal weight
//! `lambda` has the translation map `x + lambda/(1+lambda) m` as its
//! optimum, with value `lambda/(1+lambda) ||m||^2`. The plug-in map built
//! from the sample mean of n target draws carries an irreducible relative
//! error which the Monte Carlo summary below measures empirically.

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::problems::MfgWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMfgCase {
    pub dim: usize,
    pub sigma2: f64,
    pub mean: Vec<f64>,
    /// Terminal-to-transport weight ratio.
    pub lambda: f64,
    /// Number of target samples available to an estimator.
    pub samples: usize,
}

impl GaussianMfgCase {
    pub fn new(sigma2: f64, mean: Vec<f64>, lambda: f64, samples: usize) -> Result<GaussianMfgCase> {
        if sigma2 <= 0.0 || lambda <= 0.0 || samples == 0 || mean.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "need sigma2 > 0, lambda > 0, samples >= 1, non-empty mean; got sigma2={sigma2}, lambda={lambda}, samples={samples}"
            )));
        }
        Ok(GaussianMfgCase { dim: mean.len(), sigma2, mean, lambda, samples })
    }

    /// The effective terminal weight of an implemented objective is the
    /// terminal-to-transport ratio.
    pub fn from_weights(sigma2: f64, mean: Vec<f64>, weights: &MfgWeights, samples: usize) -> Result<GaussianMfgCase> {
        if weights.transport <= 0.0 {
            return Err(Error::InvalidParameter("transport weight must be positive to define lambda".into()));
        }
        GaussianMfgCase::new(sigma2, mean, weights.terminal / weights.transport, samples)
    }

    fn shrink(&self) -> f64 {
        self.lambda / (1.0 + self.lambda)
    }

    pub fn mean_sq_norm(&self) -> f64 {
        self.mean.iter().map(|&x| x * x).sum()
    }

    /// Optimal transport map: a constant shift of the identity.
    pub fn optimal_map(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).map(|(&xi, &mi)| xi + self.shrink() * mi).collect()
    }

    /// Optimal objective value with unit transport weight.
    pub fn optimal_value(&self) -> f64 {
        self.shrink() * self.mean_sq_norm()
    }

    /// Objective value of an arbitrary translation by `c` (unit transport
    /// weight): ||c||^2 + lambda ||c - m||^2.
    pub fn translation_value(&self, c: &[f64]) -> f64 {
        let sq: f64 = c.iter().map(|&x| x * x).sum();
        let miss: f64 = c.iter().zip(&self.mean).map(|(&ci, &mi)| (ci - mi) * (ci - mi)).sum();
        sq + self.lambda * miss
    }

    /// Relative L2 estimation error of the plug-in map from `samples`
    /// target draws.
    pub fn estimator_rel_error(&self) -> f64 {
        let s = self.shrink();
        let d = self.dim as f64;
        let num = s * s * d * self.sigma2;
        let den = self.samples as f64 * (d * self.sigma2 + (1.0 + s) * (1.0 + s) * self.mean_sq_norm());
        num / den
    }
}

/// Monte Carlo summary of the plug-in map's achievable cost.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginCostSummary {
    pub trials: usize,
    pub mean_cost: f64,
    pub se_cost: f64,
    /// Mean of cost - optimal value (non-negative in expectation).
    pub mean_excess: f64,
    /// Mean of |cost - optimal| / optimal: the statistically optimal
    /// relative L1 error floor.
    pub mean_rel_l1: f64,
    pub se_rel_l1: f64,
    /// Mean relative squared map error across trials (compare with
    /// `estimator_rel_error`).
    pub mean_map_rel_error: f64,
    pub se_map_rel_error: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Cost distribution of the plug-in map over resampled target means.
///
/// Each trial draws `case.samples` points from the target, forms the
/// sample-mean shift, and evaluates its exact objective value.
pub fn statistically_optimal_cost(case: &GaussianMfgCase, rng: &mut ChaCha12Rng, trials: usize) -> Result<PluginCostSummary> {
    if trials == 0 {
        return Err(Error::Usage("at least one trial required".into()));
    }
    let v_star = case.optimal_value();
    let sd = case.sigma2.sqrt();
    let shrink = case.shrink();
    let map_den = case.dim as f64 * case.sigma2 + (1.0 + shrink) * (1.0 + shrink) * case.mean_sq_norm();

    let mut costs = Vec::with_capacity(trials);
    let mut rel_l1 = Vec::with_capacity(trials);
    let mut map_err = Vec::with_capacity(trials);
    for _ in 0..trials {
        // Sample mean of n target draws.
        let mut xbar = vec![0.0; case.dim];
        for _ in 0..case.samples {
            for (j, xj) in xbar.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *xj += case.mean[j] + sd * z;
            }
        }
        for xj in &mut xbar {
            *xj /= case.samples as f64;
        }
        let c: Vec<f64> = xbar.iter().map(|&x| shrink * x).collect();
        let cost = case.translation_value(&c);
        costs.push(cost);
        rel_l1.push((cost - v_star).abs() / v_star);
        let sq_miss: f64 = xbar.iter().zip(&case.mean).map(|(&a, &b)| (a - b) * (a - b)).sum();
        map_err.push(shrink * shrink * sq_miss / map_den);
    }
    let (mean_cost, se_cost) = mean_se(&costs);
    let (mean_rel_l1, se_rel_l1) = mean_se(&rel_l1);
    let (mean_map_rel_error, se_map_rel_error) = mean_se(&map_err);
    Ok(PluginCostSummary {
        trials,
        mean_cost,
        se_cost,
        mean_excess: mean_cost - v_star,
        mean_rel_l1,
        se_rel_l1,
        mean_map_rel_error,
        se_map_rel_error,
    })
}
