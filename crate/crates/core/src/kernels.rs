//! Characteristic kernels and the unbiased squared maximum mean
//! discrepancy estimator used as the terminal cost.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::sample::SampleBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    /// exp(-||x-y||^2 / (2 sigma^2))
    Gaussian { bandwidth: f64 },
    /// exp(-rate * ||x-y||_1)
    Laplacian { rate: f64 },
}

impl Kernel {
    pub fn gaussian(bandwidth: f64) -> Result<Kernel> {
        if bandwidth <= 0.0 {
            return Err(Error::InvalidParameter(format!("gaussian bandwidth {bandwidth} must be positive")));
        }
        Ok(Kernel::Gaussian { bandwidth })
    }

    pub fn laplacian(rate: f64) -> Result<Kernel> {
        if rate <= 0.0 {
            return Err(Error::InvalidParameter(format!("laplacian rate {rate} must be positive")));
        }
        Ok(Kernel::Laplacian { rate })
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::Dimension { expected: x.len(), got: y.len() });
        }
        Ok(match *self {
            Kernel::Linear => x.iter().zip(y).map(|(&a, &b)| a * b).sum(),
            Kernel::Gaussian { bandwidth } => {
                let d2: f64 = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            Kernel::Laplacian { rate } => {
                let d1: f64 = x.iter().zip(y).map(|(&a, &b)| (a - b).abs()).sum();
                (-rate * d1).exp()
            }
        })
    }
}

fn check_sizes(n: usize, m: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::SampleSize { min: 2, got: n });
    }
    if m < 2 {
        return Err(Error::SampleSize { min: 2, got: m });
    }
    Ok(())
}

/// Unbiased MMD^2 U-statistic between sample batches. May be negative.
///
/// Plain value route with explicit diagonal-skipping loops; the tape route
/// below uses the trace-subtraction form. The two must agree exactly.
pub fn mmd2_unbiased_value(kernel: &Kernel, x: &SampleBatch, y: &SampleBatch) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension { expected: x.dim(), got: y.dim() });
    }
    let (n, m) = (x.len(), y.len());
    check_sizes(n, m)?;

    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xx += kernel.eval(x.row(i), x.row(j))?;
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                yy += kernel.eval(y.row(i), y.row(j))?;
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += kernel.eval(x.row(i), y.row(j))?;
        }
    }
    Ok(xx / (n * (n - 1)) as f64 - 2.0 * xy / (n * m) as f64 + yy / (m * (m - 1)) as f64)
}

/// Gram matrix of `kernel` between tape tensors `a [n,d]` and `b [m,d]`.
fn gram(tape: &mut Tape, kernel: &Kernel, a: TensorId, b: TensorId) -> Result<TensorId> {
    match *kernel {
        Kernel::Linear => tape.matmul_nt(a, b),
        Kernel::Gaussian { bandwidth } => {
            let d2 = tape.pairwise_sq_dist(a, b)?;
            let scaled = tape.scale(d2, -1.0 / (2.0 * bandwidth * bandwidth));
            Ok(tape.exp(scaled))
        }
        Kernel::Laplacian { rate } => {
            let d1 = tape.pairwise_l1(a, b)?;
            let scaled = tape.scale(d1, -rate);
            Ok(tape.exp(scaled))
        }
    }
}

/// Differentiable unbiased MMD^2 between tape tensors `x [n,d]`, `y [m,d]`.
///
/// Diagonal exclusion is done by subtracting the Gram trace, which is
/// algebraically identical to skipping the diagonal terms.
pub fn mmd2_unbiased(tape: &mut Tape, kernel: &Kernel, x: TensorId, y: TensorId) -> Result<TensorId> {
    let (n, m) = (tape.shape(x)[0], tape.shape(y)[0]);
    check_sizes(n, m)?;

    let kxx = gram(tape, kernel, x, x)?;
    let kxy = gram(tape, kernel, x, y)?;
    let kyy = gram(tape, kernel, y, y)?;

    let sum_xx = tape.sum_all(kxx);
    let tr_xx = tape.trace(kxx)?;
    let sum_yy = tape.sum_all(kyy);
    let tr_yy = tape.trace(kyy)?;
    let sum_xy = tape.sum_all(kxy);

    let cx = 1.0 / (n * (n - 1)) as f64;
    let cy = 1.0 / (m * (m - 1)) as f64;
    let cxy = -2.0 / (n * m) as f64;
    tape.lin_comb(&[sum_xx, tr_xx, sum_xy, sum_yy, tr_yy], &[cx, -cx, cxy, cy, -cy])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_point_evaluations() {
        let g = Kernel::gaussian(1.0).unwrap();
        // x = y gives 1 for the Gaussian kernel.
        assert_eq!(g.eval(&[0.3, -0.7], &[0.3, -0.7]).unwrap(), 1.0);

        let lin = Kernel::Linear;
        assert_eq!(lin.eval(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);

        let lap = Kernel::laplacian(1.0).unwrap();
        let got = lap.eval(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((got - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn bandwidths_must_be_positive() {
        assert!(Kernel::gaussian(0.0).is_err());
        assert!(Kernel::laplacian(-1.0).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(Kernel::Linear.eval(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hand_evaluated_linear_case() {
        // X = {0, 2}, Y = {1, 1} in one dimension: 0 - 2 + 1 = -1.
        let x = SampleBatch::new(vec![0.0, 2.0], 2, 1).unwrap();
        let y = SampleBatch::new(vec![1.0, 1.0], 2, 1).unwrap();
        let got = mmd2_unbiased_value(&Kernel::Linear, &x, &y).unwrap();
        assert!((got + 1.0).abs() < 1e-15, "{got}");
    }

    #[test]
    fn sample_size_checks() {
        let x = SampleBatch::new(vec![0.0], 1, 1).unwrap();
        let y = SampleBatch::new(vec![1.0, 1.0], 2, 1).unwrap();
        assert!(matches!(mmd2_unbiased_value(&Kernel::Linear, &x, &y), Err(Error::SampleSize { .. })));
        assert!(matches!(mmd2_unbiased_value(&Kernel::Linear, &y, &x), Err(Error::SampleSize { .. })));
    }

    #[test]
    fn tape_route_matches_value_route_exactly() {
        for kernel in [Kernel::Linear, Kernel::gaussian(0.8).unwrap(), Kernel::laplacian(1.3).unwrap()] {
            let xs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.91).sin()).collect();
            let ys: Vec<f64> = (0..9).map(|i| (i as f64 * 0.53).cos()).collect();
            let x = SampleBatch::new(xs.clone(), 4, 3).unwrap();
            let y = SampleBatch::new(ys.clone(), 3, 3).unwrap();
            let plain = mmd2_unbiased_value(&kernel, &x, &y).unwrap();

            let mut tape = Tape::new();
            let xt = tape.param(xs, vec![4, 3]).unwrap();
            let yt = tape.constant(ys, vec![3, 3]).unwrap();
            let m = mmd2_unbiased(&mut tape, &kernel, xt, yt).unwrap();
            let taped = tape.scalar_value(m);
            assert!((plain - taped).abs() < 1e-12, "{kernel:?}: {plain} vs {taped}");
        }
    }

    #[test]
    fn estimator_is_symmetric_in_batches() {
        let xs: Vec<f64> = (0..10).map(|i| (i as f64 * 1.7).sin()).collect();
        let ys: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).cos()).collect();
        let x = SampleBatch::new(xs, 5, 2).unwrap();
        let y = SampleBatch::new(ys, 5, 2).unwrap();
        for kernel in [Kernel::Linear, Kernel::gaussian(1.0).unwrap(), Kernel::laplacian(0.7).unwrap()] {
            let a = mmd2_unbiased_value(&kernel, &x, &y).unwrap();
            let b = mmd2_unbiased_value(&kernel, &y, &x).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
