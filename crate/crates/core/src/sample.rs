//! Row-major sample batches representing probability measures by iid draws.

use crate::error::{Error, Result};

/// An n x d matrix of points; each row is one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl SampleBatch {
    pub fn new(data: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::ShapeMismatch {
                op: "SampleBatch::new",
                left: vec![data.len()],
                right: vec![n, d],
            });
        }
        Ok(SampleBatch { data, n, d })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Dimension { expected: d, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(SampleBatch { data, n, d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// First `n` rows as a new batch. Used for nested sample-size sweeps.
    pub fn prefix(&self, n: usize) -> SampleBatch {
        assert!(n <= self.n);
        SampleBatch { data: self.data[..n * self.d].to_vec(), n, d: self.d }
    }

    /// Rows reordered by `perm` (a permutation of 0..n).
    pub fn permuted(&self, perm: &[usize]) -> SampleBatch {
        assert_eq!(perm.len(), self.n);
        let mut data = Vec::with_capacity(self.data.len());
        for &i in perm {
            data.extend_from_slice(self.row(i));
        }
        SampleBatch { data, n: self.n, d: self.d }
    }

    /// Coordinate-wise mean over rows.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for i in 0..self.n {
            for (mj, &x) in m.iter_mut().zip(self.row(i)) {
                *mj += x;
            }
        }
        for mj in &mut m {
            *mj /= self.n as f64;
        }
        m
    }

    /// Append a time coordinate to every row (for the time-augmented model).
    pub fn with_time(&self, t: f64) -> SampleBatch {
        let mut data = Vec::with_capacity(self.n * (self.d + 1));
        for i in 0..self.n {
            data.extend_from_slice(self.row(i));
            data.push(t);
        }
        SampleBatch { data, n: self.n, d: self.d + 1 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_access_and_mean() {
        let b = SampleBatch::new(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(b.row(1), &[3.0, 4.0]);
        assert_eq!(b.mean(), vec![2.0, 3.0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(SampleBatch::new(vec![1.0; 5], 2, 2).is_err());
    }

    #[test]
    fn with_time_appends_column() {
        let b = SampleBatch::new(vec![1.0, 2.0], 2, 1).unwrap();
        let bt = b.with_time(0.5);
        assert_eq!(bt.dim(), 2);
        assert_eq!(bt.row(0), &[1.0, 0.5]);
        assert_eq!(bt.row(1), &[2.0, 0.5]);
    }
}
