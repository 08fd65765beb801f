use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{FgccaError, Result};
use crate::numerics::{GridOperator, TimeGrid};

/// The J×J family of (cross-)covariance operators between processes.
///
/// Only the upper triangle `j ≤ k` is stored; `Σ_kj` is the exact transpose
/// of `Σ_jk` and its action is computed from the stored kernel.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    grids: Vec<Arc<TimeGrid>>,
    upper: Vec<GridOperator>,
}

fn upper_index(n: usize, j: usize, k: usize) -> usize {
    debug_assert!(j <= k && k < n);
    // row j starts after Σ_{r<j} (n − r) entries
    j * n - (j * j.saturating_sub(1)) / 2 + (k - j)
}

impl OperatorSet {
    /// Builds the set from a closure producing `Σ_jk` for `j ≤ k`.
    pub fn from_fn(
        grids: Vec<Arc<TimeGrid>>,
        mut make: impl FnMut(usize, usize) -> Result<GridOperator>,
    ) -> Result<Self> {
        let n = grids.len();
        let mut upper = Vec::with_capacity(n * (n + 1) / 2);
        for j in 0..n {
            for k in j..n {
                let op = make(j, k)?;
                check_shape(&grids, j, k, &op)?;
                upper.push(op);
            }
        }
        Ok(Self { grids, upper })
    }

    /// Builds the set from precomputed upper-triangle operators in row order.
    pub fn from_upper(grids: Vec<Arc<TimeGrid>>, upper: Vec<GridOperator>) -> Result<Self> {
        let n = grids.len();
        if upper.len() != n * (n + 1) / 2 {
            return Err(FgccaError::Dimension(format!(
                "{} operators for {n} processes",
                upper.len()
            )));
        }
        let mut it = 0;
        for j in 0..n {
            for k in j..n {
                check_shape(&grids, j, k, &upper[it])?;
                it += 1;
            }
        }
        Ok(Self { grids, upper })
    }

    pub fn n_processes(&self) -> usize {
        self.grids.len()
    }

    pub fn grids(&self) -> &[Arc<TimeGrid>] {
        &self.grids
    }

    pub fn grid(&self, j: usize) -> &Arc<TimeGrid> {
        &self.grids[j]
    }

    /// Stored operator for `j ≤ k`.
    pub fn upper(&self, j: usize, k: usize) -> &GridOperator {
        &self.upper[upper_index(self.grids.len(), j, k)]
    }

    pub fn upper_mut(&mut self, j: usize, k: usize) -> &mut GridOperator {
        let n = self.grids.len();
        &mut self.upper[upper_index(n, j, k)]
    }

    /// `Σ_jk` as an owned operator (a transpose when `j > k`).
    pub fn get(&self, j: usize, k: usize) -> GridOperator {
        if j <= k {
            self.upper(j, k).clone()
        } else {
            self.upper(k, j).transpose()
        }
    }

    /// Applies `Σ_jk` to values on grid `k`.
    pub fn apply(&self, j: usize, k: usize, values: &DVector<f64>) -> DVector<f64> {
        if j <= k {
            self.upper(j, k).apply_values(values)
        } else {
            self.upper(k, j).apply_transpose_values(values)
        }
    }

    /// `⟨f_j, Σ_jk f_k⟩`.
    pub fn bilinear(&self, j: usize, f_j: &DVector<f64>, k: usize, f_k: &DVector<f64>) -> f64 {
        let g = self.apply(j, k, f_k);
        crate::numerics::weighted_dot(self.grids[j].weights(), f_j, &g)
    }

    /// Multiplies `Σ_jk` by `scale[j] * scale[k]`.
    pub fn rescaled(&self, scale: &[f64]) -> Self {
        let n = self.grids.len();
        let mut upper = Vec::with_capacity(self.upper.len());
        for j in 0..n {
            for k in j..n {
                upper.push(self.upper(j, k).scaled(scale[j] * scale[k]));
            }
        }
        Self {
            grids: self.grids.clone(),
            upper,
        }
    }

    /// Multiplies every kernel by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grids: self.grids.clone(),
            upper: self.upper.iter().map(|op| op.scaled(factor)).collect(),
        }
    }
}

fn check_shape(grids: &[Arc<TimeGrid>], j: usize, k: usize, op: &GridOperator) -> Result<()> {
    if !op.row_grid().matches(&grids[j]) || !op.col_grid().matches(&grids[k]) {
        return Err(FgccaError::IncompatibleGrid(format!(
            "operator ({}, {}) does not live on the process grids",
            j + 1,
            k + 1
        )));
    }
    Ok(())
}
