//! Point sets and small row-major matrices.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` points in `R^dim`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    coords: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::InvalidInstance(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInstance("coordinates must be finite".into()));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInstance(
                "points have mixed dimensions".into(),
            ));
        }
        Self::new(dim, rows.concat())
    }

    /// `count` copies of `point`.
    pub fn repeat(point: &[f64], count: usize) -> Self {
        Self {
            dim: point.len(),
            coords: point.repeat(count),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// `sum_i w_i x_i` for weights summing to one.
    pub fn weighted_mean(&self, weights: &[f64]) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (x, w) in self.rows().zip(weights) {
            for (m, xi) in mean.iter_mut().zip(x) {
                *m += w * xi;
            }
        }
        mean
    }

    /// Largest pairwise distance, from the bounding box diagonal. Never zero.
    pub fn diameter(&self) -> f64 {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for x in self.rows() {
            for k in 0..self.dim {
                lo[k] = lo[k].min(x[k]);
                hi[k] = hi[k].max(x[k]);
            }
        }
        let d = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l).powi(2))
            .sum::<f64>()
            .sqrt();
        if d > 0.0 {
            d
        } else {
            1.0
        }
    }

    /// Weighted covariance about the weighted mean (weights renormalized).
    pub fn covariance(&self, weights: &[f64]) -> DMatrix<f64> {
        let total: f64 = weights.iter().sum();
        let w: Vec<f64> = weights.iter().map(|v| v / total).collect();
        let mean = self.weighted_mean(&w);
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for (x, wi) in self.rows().zip(&w) {
            for a in 0..self.dim {
                for b in 0..self.dim {
                    cov[(a, b)] += wi * (x[a] - mean[a]) * (x[b] - mean[b]);
                }
            }
        }
        cov
    }

    /// Number of distinct points when points within `radius` are merged
    /// greedily in index order.
    pub fn distinct_count(&self, radius: f64) -> usize {
        let mut reps: Vec<&[f64]> = Vec::new();
        for y in self.rows() {
            if !reps.iter().any(|r| sq_dist(r, y).sqrt() <= radius) {
                reps.push(y);
            }
        }
        reps.len()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn largest_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Dense row-major matrix used for association and transition tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Largest `|row sum - 1|` over all rows.
    pub fn max_row_defect(&self) -> f64 {
        self.rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &RowMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_count_merges_nearby_points() {
        let p = Points::from_rows(&[vec![0.0, 0.0], vec![1e-4, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(p.distinct_count(1e-3), 2);
        assert_eq!(p.distinct_count(10.0), 1);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[0.25, 0.5, 0.5]), 1);
        assert_eq!(argmax_lowest(&[1.0, 1.0]), 0);
    }

    #[test]
    fn covariance_of_two_points() {
        let p = Points::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        let c = p.covariance(&[0.5, 0.5]);
        assert!((c[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((largest_eigenvalue(&c) - 1.0).abs() < 1e-12);
    }
}
